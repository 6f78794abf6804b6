#include "tryflow/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "tryflow/checkpoint.hpp"
#include "tryflow/png_io.hpp"

namespace tryflow {

void StageConfig::validate() const {
    if (steps < 0) throw std::invalid_argument("StageConfig: steps must be >= 0");
    if (batch < 1) throw std::invalid_argument("StageConfig: batch must be >= 1");
    if (p_person < 0 || p_person > 1 || p_reference < 0 || p_reference > 1)
        throw std::invalid_argument("StageConfig: probabilities must lie in [0,1]");
    if (stage == Stage::one && (p_person != 0.0 || p_reference != 0.0))
        throw std::invalid_argument("StageConfig: stage one forces p_person = p_reference = 0");
}

ConditionDraw draw_condition_pattern(Rng& rng, const StageConfig& cfg) {
    ConditionDraw d;
    d.use_person = rng.bernoulli(cfg.p_person);
    d.use_reference = rng.bernoulli(cfg.p_reference);
    return d;
}

Image stack_slot1(const Image& rgb, const Image* pose) {
    if (rgb.channels != 3) throw std::invalid_argument("stack_slot1: RGB image required");
    if (pose && (!pose->same_shape(rgb)))
        throw std::invalid_argument("stack_slot1: pose map shape mismatch");
    Image out(rgb.height, rgb.width, 6, 0.0f);
    for (int y = 0; y < rgb.height; ++y)
        for (int x = 0; x < rgb.width; ++x) {
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = rgb.at(y, x, c);
            if (pose)
                for (int c = 0; c < 3; ++c) out.at(y, x, 3 + c) = pose->at(y, x, c);
        }
    return out;
}

std::vector<ConditionImage> stage1_conditions(const DatasetRecord& rec) {
    std::vector<ConditionImage> conds;
    conds.push_back({stack_slot1(rec.agnostic, &rec.pose), 1});
    conds.push_back({rec.cloth, 2});
    return conds;
}

std::vector<ConditionImage> eval_conditions(const DatasetRecord& rec, bool mask_free,
                                            bool with_ref) {
    std::vector<ConditionImage> conds;
    if (mask_free) {
        if (rec.person_img.size() == 0)
            throw std::runtime_error("eval_conditions: record " + std::to_string(rec.idx) +
                                     " is missing the person image role");
        conds.push_back({stack_slot1(rec.person_img, nullptr), 1});
    } else {
        if (rec.agnostic.size() == 0 || rec.pose.size() == 0)
            throw std::runtime_error("eval_conditions: record " + std::to_string(rec.idx) +
                                     " is missing the agnostic/pose roles");
        conds.push_back({stack_slot1(rec.agnostic, &rec.pose), 1});
    }
    conds.push_back({rec.cloth, 2});
    if (with_ref) {
        if (rec.reference.size() == 0)
            throw std::runtime_error("eval_conditions: record " + std::to_string(rec.idx) +
                                     " is missing the reference role");
        conds.push_back({rec.reference, 3});
    }
    return conds;
}

namespace {

void write_loss_csv(const std::filesystem::path& path,
                    const std::vector<std::pair<long, double>>& curve) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("train: cannot write " + path.string());
    out << "step,loss\n";
    char buf[64];
    for (const auto& [step, loss] : curve) {
        std::snprintf(buf, sizeof(buf), "%ld,%.9g", step, loss);
        out << buf << "\n";
    }
}

using ItemBuilder = std::function<TrainItem(Rng&, int)>;  // (step_rng, slot) -> item

TrainResult train_loop(const StageConfig& cfg, ModelParams<float> model, Rng& rng,
                       const std::filesystem::path& run_dir, const ItemBuilder& build_item,
                       long start_step) {
    cfg.validate();
    std::filesystem::create_directories(run_dir);
    AdamW<float> opt(model, cfg.optim);
    opt.set_step_count(start_step);
    TrainResult result;

    for (long step = start_step; step < start_step + cfg.steps; ++step) {
        Rng step_rng = rng.fork(0x57e9'0000ull + static_cast<uint64_t>(step));
        std::vector<TrainItem> items;
        items.reserve(static_cast<size_t>(cfg.batch));
        for (int b = 0; b < cfg.batch; ++b) items.push_back(build_item(step_rng, b));
        FlowBatch batch = make_flow_batch(std::move(items), step_rng);
        LossResult<float> res = fm_loss(model, batch);
        if (!std::isfinite(res.loss)) {
            checkpoint_save(model, run_dir / "ckpt_diverged", step);
            write_loss_csv(run_dir / "loss.csv", result.loss_curve);
            throw std::runtime_error("train: loss diverged at step " + std::to_string(step) +
                                     "; last checkpoint written to " +
                                     (run_dir / "ckpt_diverged").string());
        }
        opt.step(model, res.grads);
        if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == start_step + cfg.steps))
            result.loss_curve.push_back({step, res.loss});
        if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
            char name[64];
            std::snprintf(name, sizeof(name), "ckpt_step%08ld", step + 1);
            checkpoint_save(model, run_dir / name, step + 1);
        }
    }
    result.final_step = start_step + cfg.steps;
    checkpoint_save(model, run_dir / "ckpt_final", result.final_step);
    write_loss_csv(run_dir / "loss.csv", result.loss_curve);
    result.params = std::move(model);
    return result;
}

}  // namespace

TrainResult train_stage1(const std::vector<DatasetRecord>& data, const StageConfig& cfg,
                         ModelParams<float> model, Rng& rng, const std::filesystem::path& run_dir,
                         long start_step) {
    if (cfg.stage != Stage::one) throw std::invalid_argument("train_stage1: cfg.stage must be one");
    if (data.empty()) throw std::invalid_argument("train_stage1: empty dataset");
    auto build = [&](Rng& step_rng, int) {
        const auto& rec = data[static_cast<size_t>(step_rng.uniform_int(static_cast<int>(data.size())))];
        TrainItem item;
        item.target = rec.target;
        item.conditions = stage1_conditions(rec);
        return item;
    };
    return train_loop(cfg, std::move(model), rng, run_dir, build, start_step);
}

std::vector<UnpairedRecord> synthesize_unpaired(const ModelParams<float>& stage1_model,
                                                const std::vector<DatasetRecord>& data,
                                                const SamplerConfig& sampler, Rng& rng,
                                                bool category_match) {
    std::vector<UnpairedRecord> result;
    result.reserve(data.size());
    for (size_t i = 0; i < data.size(); ++i) {
        const auto& rec = data[i];
        std::vector<int> donors;
        for (size_t j = 0; j < data.size(); ++j) {
            if (j == i) continue;
            if (category_match && data[j].category != rec.category) continue;
            donors.push_back(static_cast<int>(j));
        }
        if (donors.empty())
            throw std::runtime_error(
                "synthesize_unpaired: no same-category donor garments for category " +
                std::string(category_name(rec.category)));
        Rng item_rng = rng.fork(static_cast<uint64_t>(rec.idx));
        const auto& donor = data[static_cast<size_t>(
            donors[static_cast<size_t>(item_rng.uniform_int(static_cast<int>(donors.size())))])];

        std::vector<ConditionImage> conds;
        conds.push_back({stack_slot1(rec.agnostic, &rec.pose), 1});
        conds.push_back({donor.cloth, 2});
        UnpairedRecord up;
        up.target_idx = rec.idx;
        up.donor_idx = donor.idx;
        up.donor_garment = donor.garment;
        up.synthesized = sample_ode(stage1_model, conds, rec.target.height, rec.target.width,
                                    sampler, item_rng);
        result.push_back(std::move(up));
    }
    return result;
}

void save_unpaired(const std::vector<UnpairedRecord>& records, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "unpaired_manifest.txt");
    if (!manifest)
        throw std::runtime_error("save_unpaired: cannot write manifest under " + dir.string());
    for (const auto& up : records) {
        const std::string name = "synth_" + std::to_string(up.target_idx) + ".png";
        write_png(dir / name, up.synthesized);
        manifest << up.target_idx << " " << up.donor_idx << " " << name << " "
                 << serialize_garment_params(up.donor_garment) << "\n";
    }
}

std::vector<UnpairedRecord> load_unpaired(const std::filesystem::path& dir) {
    std::ifstream manifest(dir / "unpaired_manifest.txt");
    if (!manifest)
        throw std::runtime_error("load_unpaired: cannot read manifest under " + dir.string());
    std::vector<UnpairedRecord> out;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        UnpairedRecord up;
        std::string name, garment;
        if (!(ls >> up.target_idx >> up.donor_idx >> name >> garment))
            throw std::runtime_error("load_unpaired: malformed line: " + line);
        up.donor_garment = parse_garment_params(garment);
        up.synthesized = read_png(dir / name);
        out.push_back(std::move(up));
    }
    return out;
}

TrainResult train_stage2(const std::vector<DatasetRecord>& data,
                         const std::vector<UnpairedRecord>& unpaired, const StageConfig& cfg,
                         ModelParams<float> model, Rng& rng, const std::filesystem::path& run_dir,
                         long start_step) {
    if (cfg.stage != Stage::two) throw std::invalid_argument("train_stage2: cfg.stage must be two");
    if (data.empty()) throw std::invalid_argument("train_stage2: empty dataset");
    std::map<int, const UnpairedRecord*> by_idx;
    for (const auto& up : unpaired) by_idx[up.target_idx] = &up;

    auto build = [&, cfg](Rng& step_rng, int) {
        const auto& rec = data[static_cast<size_t>(step_rng.uniform_int(static_cast<int>(data.size())))];
        const ConditionDraw draw = draw_condition_pattern(step_rng, cfg);
        TrainItem item;
        item.target = rec.target;
        const auto it = by_idx.find(rec.idx);
        if (draw.use_person && it != by_idx.end()) {
            item.conditions.push_back({stack_slot1(it->second->synthesized, nullptr), 1});
        } else {
            item.conditions.push_back({stack_slot1(rec.agnostic, &rec.pose), 1});
        }
        item.conditions.push_back({rec.cloth, 2});
        if (draw.use_reference) item.conditions.push_back({rec.reference, 3});
        return item;
    };
    return train_loop(cfg, std::move(model), rng, run_dir, build, start_step);
}

std::string mode_name(const EvalMode& mode) {
    std::string s = mode.mask_free ? "mf" : "mask";
    if (mode.with_ref) s += "+ref";
    return s;
}

MetricReport evaluate_run(const ModelParams<float>& model, const std::vector<DatasetRecord>& test,
                          const std::vector<EvalMode>& modes, const SamplerConfig& sampler,
                          Rng& rng, const std::filesystem::path& out_dir) {
    if (test.empty()) throw std::invalid_argument("evaluate_run: empty test split");
    std::filesystem::create_directories(out_dir);
    MetricReport report;
    const ConvFeatureExtractor extractor;

    std::vector<Image> real_targets, real_persons;
    for (const auto& rec : test) {
        real_targets.push_back(rec.target);
        real_persons.push_back(rec.person_img);
    }
    const FeatureSet target_feats = extractor.extract_set(real_targets);
    const FeatureSet person_feats = extractor.extract_set(real_persons);
    const GaussianStats target_stats = fit_gaussian(target_feats);
    const GaussianStats person_stats = fit_gaussian(person_feats);

    for (size_t m = 0; m < modes.size(); ++m) {
        const EvalMode mode = modes[m];
        const std::string mname = mode_name(mode);
        const std::filesystem::path mode_dir = out_dir / mname;
        std::filesystem::create_directories(mode_dir);

        std::vector<Image> generated;
        double ssim_sum = 0, ssim_garment_sum = 0, perc_sum = 0;
        int hue_hits = 0, hue_total = 0;
        for (const auto& rec : test) {
            Rng sample_rng =
                rng.fork((static_cast<uint64_t>(m) << 32) ^ static_cast<uint64_t>(rec.idx));
            const auto conds = eval_conditions(rec, mode.mask_free, mode.with_ref);
            Image gen = sample_ode(model, conds, rec.target.height, rec.target.width, sampler,
                                   sample_rng);
            write_png(mode_dir / ("gen_" + std::to_string(rec.idx) + ".png"), gen);

            ssim_sum += ssim(gen, rec.target);
            const Rect region = garment_rect(rec.garment, rec.person.canvas);
            ssim_garment_sum += ssim_region(gen, rec.target, region);
            perc_sum += perceptual_distance(gen, rec.target, extractor);
            const auto hue_gen = dominant_hue(gen, region);
            const auto hue_ref = dominant_hue(rec.target, region);
            if (hue_ref) {
                ++hue_total;
                if (hue_gen && hue_distance(*hue_gen, *hue_ref) <= 0.1f) ++hue_hits;
            }
            generated.push_back(std::move(gen));
        }
        const double n = static_cast<double>(test.size());
        const FeatureSet gen_feats = extractor.extract_set(generated);
        const GaussianStats gen_stats = fit_gaussian(gen_feats);

        report.add("ssim", "paired", mname, ssim_sum / n);
        report.add("ssim_garment", "paired", mname, ssim_garment_sum / n);
        report.add("percdist", "paired", mname, perc_sum / n);
        report.add("hue_acc", "paired", mname,
                   hue_total > 0 ? static_cast<double>(hue_hits) / hue_total : 0.0);
        report.add("fid", "paired", mname, fid(gen_stats, target_stats));
        report.add("kid", "paired", mname, kid(gen_feats, target_feats));
        report.add("fid", "unpaired", mname, fid(gen_stats, person_stats));
        report.add("kid", "unpaired", mname, kid(gen_feats, person_feats));
    }
    report.save(out_dir / "report.txt");
    return report;
}

}  // namespace tryflow
