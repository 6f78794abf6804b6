// Command-line entry point: dataset generation, two-stage training, unpaired
// synthesis, reference generation, sampling and evaluation.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "tryflow/checkpoint.hpp"
#include "tryflow/config.hpp"
#include "tryflow/metrics.hpp"
#include "tryflow/pipeline.hpp"
#include "tryflow/png_io.hpp"
#include "tryflow/refgen.hpp"
#include "tryflow/synthworld.hpp"

namespace fs = std::filesystem;
using namespace tryflow;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::array<double, 3> parse_mix(const std::string& s) {
    std::array<double, 3> mix{};
    if (std::sscanf(s.c_str(), "%lf,%lf,%lf", &mix[0], &mix[1], &mix[2]) != 3)
        throw UsageError("category mix must be three comma-separated fractions, got '" + s + "'");
    return mix;
}

std::vector<EvalMode> parse_modes(const std::string& s) {
    std::vector<EvalMode> modes;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok == "mask")
            modes.push_back({false, false});
        else if (tok == "mask+ref")
            modes.push_back({false, true});
        else if (tok == "mf")
            modes.push_back({true, false});
        else if (tok == "mf+ref")
            modes.push_back({true, true});
        else
            throw UsageError("unknown mode '" + tok + "' (expected mask, mask+ref, mf, mf+ref)");
    }
    if (modes.empty()) throw UsageError("no evaluation modes given");
    return modes;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::string out;
    int n = 100;
    uint64_t seed = 0;
    std::string split = "train";
    std::string mix = "0.34,0.33,0.33";
    double translucent_prob = 0.5;
    int canvas = 32;
    bool twins = false;
};

int cmd_gen_data(const GenDataArgs& a) {
    BuildOptions opts;
    opts.category_mix = parse_mix(a.mix);
    opts.translucent_prob = a.translucent_prob;
    opts.canvas = a.canvas;
    opts.twins = a.twins;
    opts.split = a.split;
    std::vector<DatasetRecord> records;
    try {
        records = build_dataset(a.n, opts, a.seed);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    save_dataset(records, a.out, a.split);

    RunConfig cfg;
    cfg.set("run.command", "gen-data");
    cfg.set_int("run.seed", static_cast<long long>(a.seed));
    cfg.set_int("data.n", a.n);
    cfg.set("data.split", a.split);
    cfg.set("data.category_mix", a.mix);
    cfg.set_double("data.translucent_prob", a.translucent_prob);
    cfg.set_int("data.canvas", a.canvas);
    cfg.set_int("data.twins", a.twins ? 1 : 0);
    cfg.save(fs::path(a.out) / a.split / "config.txt");
    std::cout << (fs::path(a.out) / a.split / "manifest.txt").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string data;
    std::string split = "train";
    std::string out;
    std::string unpaired;  // stage 2 only
    std::string init_from;
    int steps = 2000;
    int batch = 8;
    uint64_t seed = 0;
    double lr = 1e-4;
    double weight_decay = 0.01;
    double p_person = 0.5;
    double p_reference = 0.25;
    int width = 72;
    int depth = 3;
    int heads = 3;
    int patch = 4;
    int time_dim = 64;
    int lora_rank = 0;  // > 0 attaches adapters and trains them only
    double lora_alpha = 16.0;
    int ckpt_every = 0;
    int log_every = 50;
};

ModelParams<float> make_or_load_model(const TrainArgs& a, Rng& rng, long* start_step) {
    *start_step = 0;
    ModelParams<float> model;
    if (!a.init_from.empty()) {
        model = checkpoint_load(a.init_from, start_step);
    } else {
        ModelConfig mc;
        mc.patch_size = a.patch;
        mc.width = a.width;
        mc.depth = a.depth;
        mc.heads = a.heads;
        mc.time_embed_dim = a.time_dim;
        mc.lora_rank = a.lora_rank > 0 ? a.lora_rank : 8;
        mc.lora_alpha = a.lora_alpha;
        model = init_model<float>(mc, rng);
    }
    if (a.lora_rank > 0 && !model.has_lora()) {
        model.config.lora_rank = a.lora_rank;
        model.config.lora_alpha = a.lora_alpha;
        Rng lora_rng = rng.fork(0x10aa);
        attach_lora(model, {"q", "k", "v", "out"}, lora_rng);
    }
    return model;
}

void save_train_config(const TrainArgs& a, int stage, long start_step) {
    RunConfig cfg;
    cfg.set("run.command", stage == 1 ? "train-stage1" : "train-stage2");
    cfg.set_int("run.seed", static_cast<long long>(a.seed));
    cfg.set("data.root", a.data);
    cfg.set("data.split", a.split);
    if (stage == 2) cfg.set("data.unpaired", a.unpaired);
    cfg.set_int("train.steps", a.steps);
    cfg.set_int("train.batch", a.batch);
    cfg.set_double("train.lr", a.lr);
    cfg.set_double("train.weight_decay", a.weight_decay);
    cfg.set_int("train.start_step", start_step);
    if (stage == 2) {
        cfg.set_double("train.p_person", a.p_person);
        cfg.set_double("train.p_reference", a.p_reference);
    }
    cfg.set("train.init_from", a.init_from.empty() ? "none" : a.init_from);
    cfg.set_int("model.width", a.width);
    cfg.set_int("model.depth", a.depth);
    cfg.set_int("model.heads", a.heads);
    cfg.set_int("model.patch_size", a.patch);
    cfg.set_int("model.time_embed_dim", a.time_dim);
    cfg.set_int("model.lora_rank", a.lora_rank);
    cfg.set_double("model.lora_alpha", a.lora_alpha);
    cfg.set_int("train.checkpoint_every", a.ckpt_every);
    cfg.set_int("train.log_every", a.log_every);
    fs::create_directories(a.out);
    cfg.save(fs::path(a.out) / "config.txt");
}

int cmd_train(const TrainArgs& a, int stage) {
    Rng rng(a.seed);
    long start_step = 0;
    ModelParams<float> model = make_or_load_model(a, rng, &start_step);
    save_train_config(a, stage, start_step);

    StageConfig sc;
    sc.steps = a.steps;
    sc.batch = a.batch;
    sc.optim.lr = a.lr;
    sc.optim.weight_decay = a.weight_decay;
    sc.checkpoint_every = a.ckpt_every;
    sc.log_every = a.log_every;

    const auto data = load_dataset(a.data, a.split);
    TrainResult result;
    if (stage == 1) {
        sc.stage = Stage::one;
        result = train_stage1(data, sc, std::move(model), rng, a.out, start_step);
    } else {
        sc.stage = Stage::two;
        sc.p_person = a.p_person;
        sc.p_reference = a.p_reference;
        const auto unpaired = load_unpaired(a.unpaired);
        result = train_stage2(data, unpaired, sc, std::move(model), rng, a.out, start_step);
    }
    std::cout << (fs::path(a.out) / "ckpt_final.manifest").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string data;
    std::string split = "train";
    std::string ckpt;
    std::string out;
    uint64_t seed = 0;
    int steps = 24;
};

int cmd_synth_unpaired(const SynthArgs& a) {
    const auto data = load_dataset(a.data, a.split);
    ModelParams<float> model = checkpoint_load(a.ckpt);
    SamplerConfig sampler;
    sampler.steps = a.steps;
    Rng rng(a.seed);
    const auto unpaired = synthesize_unpaired(model, data, sampler, rng);
    save_unpaired(unpaired, a.out);

    RunConfig cfg;
    cfg.set("run.command", "synth-unpaired");
    cfg.set_int("run.seed", static_cast<long long>(a.seed));
    cfg.set("data.root", a.data);
    cfg.set("data.split", a.split);
    cfg.set("model.checkpoint", a.ckpt);
    cfg.set_int("sampler.steps", a.steps);
    cfg.save(fs::path(a.out) / "config.txt");
    std::cout << (fs::path(a.out) / "unpaired_manifest.txt").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct GenRefsArgs {
    std::string data;
    std::string split = "train";
    std::string out;
    uint64_t seed = 0;
    double dedup_threshold = 0.95;
    std::string bank;                 // optional bank file
    std::string editor = "synth";     // "synth" or host:port
    std::string describer = "template";  // "template" or host:port
};

std::pair<std::string, int> parse_endpoint(const std::string& s) {
    const size_t colon = s.rfind(':');
    if (colon == std::string::npos)
        throw UsageError("expected host:port endpoint, got '" + s + "'");
    return {s.substr(0, colon), std::stoi(s.substr(colon + 1))};
}

int cmd_gen_refs(const GenRefsArgs& a) {
    const auto data = load_dataset(a.data, a.split);
    const DescriptionBank bank =
        a.bank.empty() ? DescriptionBank::builtin() : DescriptionBank::load(a.bank);

    std::unique_ptr<EditorInterface> editor;
    std::unique_ptr<DescriberInterface> describer;
    if (a.editor == "synth") {
        editor = std::make_unique<SynthEditor>(data);
    } else {
        auto [host, port] = parse_endpoint(a.editor);
        editor = std::make_unique<ExternalEditor>(host, port, fs::path(a.out) / "scratch");
    }
    if (a.describer == "template") {
        describer = std::make_unique<TemplateDescriber>();
    } else {
        auto [host, port] = parse_endpoint(a.describer);
        describer = std::make_unique<ExternalDescriber>(host, port, fs::path(a.out) / "scratch");
    }

    Rng rng(a.seed);
    const auto result =
        generate_reference_set(data, *editor, *describer, bank, rng, a.out, a.dedup_threshold);

    RunConfig cfg;
    cfg.set("run.command", "gen-refs");
    cfg.set_int("run.seed", static_cast<long long>(a.seed));
    cfg.set("data.root", a.data);
    cfg.set("data.split", a.split);
    cfg.set_double("refgen.dedup_threshold", a.dedup_threshold);
    cfg.set("refgen.editor", a.editor);
    cfg.set("refgen.describer", a.describer);
    cfg.set("refgen.bank", a.bank.empty() ? "builtin" : a.bank);
    cfg.save(fs::path(a.out) / "config.txt");
    std::cout << result.kept_ids.size() << " references kept of " << data.size() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct SampleArgs {
    std::string data;
    std::string split = "test";
    std::string ckpt;
    std::string out;
    std::string mode = "mask";
    bool with_ref = false;
    int steps = 50;
    uint64_t seed = 0;
    int count = 0;  // 0 = all
};

int cmd_sample(const SampleArgs& a) {
    if (a.mode != "mask" && a.mode != "mf")
        throw UsageError("mode must be 'mask' or 'mf', got '" + a.mode + "'");
    const bool mask_free = a.mode == "mf";

    auto data = load_dataset(a.data, a.split);
    if (a.count > 0 && static_cast<size_t>(a.count) < data.size())
        data.resize(static_cast<size_t>(a.count));

    // Role presence check for the requested mode.
    std::vector<std::string> missing;
    for (const auto& rec : data) {
        const fs::path dir = fs::path(a.data) / a.split;
        if (a.with_ref && rec.reference.size() == 0)
            missing.push_back((dir / (std::to_string(rec.idx) + "_ref.png")).string());
    }
    if (!missing.empty()) {
        std::string msg = "missing input roles for mode " + a.mode + (a.with_ref ? "+ref" : "");
        for (const auto& m : missing) msg += "\n  " + m;
        throw std::runtime_error(msg);
    }

    ModelParams<float> model = checkpoint_load(a.ckpt);
    SamplerConfig sampler;
    sampler.steps = a.steps;
    Rng rng(a.seed);
    fs::create_directories(a.out);
    for (const auto& rec : data) {
        Rng sample_rng = rng.fork(static_cast<uint64_t>(rec.idx));
        const auto conds = eval_conditions(rec, mask_free, a.with_ref);
        const Image gen =
            sample_ode(model, conds, rec.target.height, rec.target.width, sampler, sample_rng);
        write_png(fs::path(a.out) / ("gen_" + std::to_string(rec.idx) + ".png"), gen);
    }

    RunConfig cfg;
    cfg.set("run.command", "sample");
    cfg.set_int("run.seed", static_cast<long long>(a.seed));
    cfg.set("data.root", a.data);
    cfg.set("data.split", a.split);
    cfg.set("model.checkpoint", a.ckpt);
    cfg.set("sample.mode", a.mode);
    cfg.set_int("sample.with_ref", a.with_ref ? 1 : 0);
    cfg.set_int("sample.steps", a.steps);
    cfg.set_int("sample.count", a.count);
    cfg.save(fs::path(a.out) / "config.txt");
    return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string data;
    std::string split = "test";
    std::string out;
    std::string ckpt;
    std::string gen;  // pre-generated images (gen_<idx>.png)
    std::string modes = "mask,mf";
    int steps = 50;
    uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
    const auto data = load_dataset(a.data, a.split);
    fs::create_directories(a.out);
    MetricReport report;
    if (!a.gen.empty()) {
        // Score an existing generated set against the paired targets.
        const ConvFeatureExtractor extractor;
        std::vector<Image> generated, targets, persons;
        double ssim_sum = 0, perc_sum = 0;
        for (const auto& rec : data) {
            const fs::path p = fs::path(a.gen) / ("gen_" + std::to_string(rec.idx) + ".png");
            if (!fs::exists(p))
                throw std::runtime_error("eval: missing generated image " + p.string());
            Image gen = read_png(p);
            ssim_sum += ssim(gen, rec.target);
            perc_sum += perceptual_distance(gen, rec.target, extractor);
            generated.push_back(std::move(gen));
            targets.push_back(rec.target);
            persons.push_back(rec.person_img);
        }
        const double n = static_cast<double>(data.size());
        const FeatureSet gen_f = extractor.extract_set(generated);
        const FeatureSet tgt_f = extractor.extract_set(targets);
        const FeatureSet per_f = extractor.extract_set(persons);
        report.add("ssim", "paired", "ext", ssim_sum / n);
        report.add("percdist", "paired", "ext", perc_sum / n);
        report.add("fid", "paired", "ext", fid(fit_gaussian(gen_f), fit_gaussian(tgt_f)));
        report.add("kid", "paired", "ext", kid(gen_f, tgt_f));
        report.add("fid", "unpaired", "ext", fid(fit_gaussian(gen_f), fit_gaussian(per_f)));
        report.add("kid", "unpaired", "ext", kid(gen_f, per_f));
        report.save(fs::path(a.out) / "report.txt");
    } else {
        if (a.ckpt.empty()) throw UsageError("eval: either --ckpt or --gen is required");
        ModelParams<float> model = checkpoint_load(a.ckpt);
        SamplerConfig sampler;
        sampler.steps = a.steps;
        Rng rng(a.seed);
        report = evaluate_run(model, data, parse_modes(a.modes), sampler, rng, a.out);
    }

    RunConfig cfg;
    cfg.set("run.command", "eval");
    cfg.set_int("run.seed", static_cast<long long>(a.seed));
    cfg.set("data.root", a.data);
    cfg.set("data.split", a.split);
    cfg.set("eval.modes", a.modes);
    cfg.set("eval.ckpt", a.ckpt.empty() ? "none" : a.ckpt);
    cfg.set("eval.gen", a.gen.empty() ? "none" : a.gen);
    cfg.set_int("eval.steps", a.steps);
    cfg.save(fs::path(a.out) / "config.txt");
    std::cout << (fs::path(a.out) / "report.txt").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"flow-matching virtual try-on workbench"};
    app.require_subcommand(1);

    GenDataArgs gd;
    auto* gen_data = app.add_subcommand("gen-data", "Generate a synthetic try-on dataset");
    gen_data->add_option("--out", gd.out)->required();
    gen_data->add_option("--n", gd.n);
    gen_data->add_option("--seed", gd.seed);
    gen_data->add_option("--split", gd.split);
    gen_data->add_option("--category-mix", gd.mix);
    gen_data->add_option("--translucent-prob", gd.translucent_prob);
    gen_data->add_option("--canvas", gd.canvas);
    gen_data->add_flag("--twins", gd.twins);

    TrainArgs t1, t2;
    auto add_train_opts = [](CLI::App* cmd, TrainArgs& t) {
        cmd->add_option("--data", t.data)->required();
        cmd->add_option("--split", t.split);
        cmd->add_option("--out", t.out)->required();
        cmd->add_option("--init-from", t.init_from);
        cmd->add_option("--steps", t.steps);
        cmd->add_option("--batch", t.batch);
        cmd->add_option("--seed", t.seed);
        cmd->add_option("--lr", t.lr);
        cmd->add_option("--weight-decay", t.weight_decay);
        cmd->add_option("--width", t.width);
        cmd->add_option("--depth", t.depth);
        cmd->add_option("--heads", t.heads);
        cmd->add_option("--patch", t.patch);
        cmd->add_option("--time-dim", t.time_dim);
        cmd->add_option("--lora-rank", t.lora_rank);
        cmd->add_option("--lora-alpha", t.lora_alpha);
        cmd->add_option("--ckpt-every", t.ckpt_every);
        cmd->add_option("--log-every", t.log_every);
    };
    auto* train1 = app.add_subcommand("train-stage1", "Train the mask-based stage-1 model");
    add_train_opts(train1, t1);
    auto* train2 = app.add_subcommand("train-stage2", "Train the person-to-person stage-2 model");
    add_train_opts(train2, t2);
    train2->add_option("--unpaired", t2.unpaired)->required();
    train2->add_option("--p-person", t2.p_person);
    train2->add_option("--p-ref", t2.p_reference);

    SynthArgs sy;
    auto* synth = app.add_subcommand("synth-unpaired", "Synthesize unpaired person images");
    synth->add_option("--data", sy.data)->required();
    synth->add_option("--split", sy.split);
    synth->add_option("--ckpt", sy.ckpt)->required();
    synth->add_option("--out", sy.out)->required();
    synth->add_option("--seed", sy.seed);
    synth->add_option("--steps", sy.steps);

    GenRefsArgs gr;
    auto* refs = app.add_subcommand("gen-refs", "Run the reference-image generation pipeline");
    refs->add_option("--data", gr.data)->required();
    refs->add_option("--split", gr.split);
    refs->add_option("--out", gr.out)->required();
    refs->add_option("--seed", gr.seed);
    refs->add_option("--dedup-threshold", gr.dedup_threshold);
    refs->add_option("--bank", gr.bank);
    refs->add_option("--editor", gr.editor);
    refs->add_option("--describer", gr.describer);

    SampleArgs sa;
    auto* sample = app.add_subcommand("sample", "Generate try-on images from a checkpoint");
    sample->add_option("--data", sa.data)->required();
    sample->add_option("--split", sa.split);
    sample->add_option("--ckpt", sa.ckpt)->required();
    sample->add_option("--out", sa.out)->required();
    sample->add_option("--mode", sa.mode);
    sample->add_flag("--ref", sa.with_ref);
    sample->add_option("--steps", sa.steps);
    sample->add_option("--seed", sa.seed);
    sample->add_option("--count", sa.count);

    EvalArgs ev;
    auto* eval = app.add_subcommand("eval", "Score generated try-ons");
    eval->add_option("--data", ev.data)->required();
    eval->add_option("--split", ev.split);
    eval->add_option("--out", ev.out)->required();
    eval->add_option("--ckpt", ev.ckpt);
    eval->add_option("--gen", ev.gen);
    eval->add_option("--modes", ev.modes);
    eval->add_option("--steps", ev.steps);
    eval->add_option("--seed", ev.seed);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen_data->parsed()) return cmd_gen_data(gd);
        if (train1->parsed()) return cmd_train(t1, 1);
        if (train2->parsed()) return cmd_train(t2, 2);
        if (synth->parsed()) return cmd_synth_unpaired(sy);
        if (refs->parsed()) return cmd_gen_refs(gr);
        if (sample->parsed()) return cmd_sample(sa);
        if (eval->parsed()) return cmd_eval(ev);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
