// End-to-end checks of the command-line surface, run through the shell.

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tryflow/metrics.hpp"
#include "tryflow/png_io.hpp"
#include "tryflow/synthworld.hpp"

using namespace tryflow;
namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "tryflow_cli_smoke";

int run(const std::string& args) {
    const std::string cmd = std::string(TRYFLOW_BIN) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), {});
}

std::string dataset_fingerprint(const fs::path& split_dir) {
    std::string all = slurp(split_dir / "manifest.txt");
    for (int i = 0; i < 3; ++i)
        for (const char* role : {"target", "cloth", "ref", "pose"})
            all += slurp(split_dir / (std::to_string(i) + "_" + role + ".png"));
    return all;
}

struct Workspace {
    Workspace() {
        fs::remove_all(kWork);
        fs::create_directories(kWork);
    }
};

Workspace& workspace() {
    static Workspace w;
    return w;
}

std::string common_train_flags() {
    return " --steps 4 --batch 2 --width 24 --depth 1 --heads 2 --patch 8 --time-dim 16";
}

}  // namespace

TEST_CASE("gen-data is reproducible and creates missing directories") {
    workspace();
    const fs::path d1 = kWork / "data_a";
    const fs::path d2 = kWork / "data_b";
    REQUIRE(run("gen-data --out " + d1.string() + " --n 3 --seed 7 --category-mix 1,0,0") == 0);
    REQUIRE(run("gen-data --out " + d2.string() + " --n 3 --seed 7 --category-mix 1,0,0") == 0);
    CHECK(dataset_fingerprint(d1 / "train") == dataset_fingerprint(d2 / "train"));

    // Different seed changes the bytes.
    const fs::path d3 = kWork / "data_c";
    REQUIRE(run("gen-data --out " + d3.string() + " --n 3 --seed 8 --category-mix 1,0,0") == 0);
    CHECK(dataset_fingerprint(d1 / "train") != dataset_fingerprint(d3 / "train"));
}

TEST_CASE("invalid category mix is a usage error") {
    workspace();
    CHECK(run("gen-data --out " + (kWork / "bad").string() + " --n 2 --category-mix 0.5,0.2,0.2") ==
          2);
}

TEST_CASE("train, resume, and the lr=0 identity") {
    workspace();
    const fs::path data = kWork / "train_data";
    REQUIRE(run("gen-data --out " + data.string() + " --n 4 --seed 3 --category-mix 1,0,0") == 0);

    const fs::path runa = kWork / "run_a";
    REQUIRE(run("train-stage1 --data " + data.string() + " --out " + runa.string() + " --seed 5" +
                common_train_flags()) == 0);
    REQUIRE(fs::exists(runa / "ckpt_final.manifest"));
    REQUIRE(fs::exists(runa / "loss.csv"));
    REQUIRE(fs::exists(runa / "config.txt"));

    // Resume continues the step counter.
    const fs::path runb = kWork / "run_b";
    REQUIRE(run("train-stage1 --data " + data.string() + " --out " + runb.string() +
                " --init-from " + (runa / "ckpt_final").string() + " --seed 5" +
                common_train_flags()) == 0);
    const std::string manifest = slurp(runb / "ckpt_final.manifest");
    CHECK(manifest.find("step = 8") != std::string::npos);

    // lr = 0 leaves the checkpoint equal to a 0-step run from the same init.
    const fs::path run0 = kWork / "run_zero";
    REQUIRE(run("train-stage1 --data " + data.string() + " --out " + run0.string() +
                " --init-from " + (runa / "ckpt_final").string() + " --seed 6 --lr 0" +
                common_train_flags()) == 0);
    const fs::path runnone = kWork / "run_none";
    REQUIRE(run("train-stage1 --data " + data.string() + " --out " + runnone.string() +
                " --init-from " + (runa / "ckpt_final").string() + " --seed 6 --steps 0" +
                " --batch 2") == 0);
    CHECK(slurp(run0 / "ckpt_final.blob") == slurp(runnone / "ckpt_final.blob"));
}

TEST_CASE("sample validates roles, reproduces bytes, and runs one-step") {
    workspace();
    const fs::path data = kWork / "sample_data";
    REQUIRE(run("gen-data --out " + data.string() + " --n 3 --seed 11 --split test "
                "--category-mix 1,0,0") == 0);
    const fs::path runa = kWork / "sample_run";
    REQUIRE(run("train-stage1 --data " + data.string() + " --split test --out " + runa.string() +
                " --seed 5" + common_train_flags()) == 0);
    const std::string ckpt = (runa / "ckpt_final").string();

    const fs::path s1 = kWork / "samp_1";
    const fs::path s2 = kWork / "samp_2";
    REQUIRE(run("sample --data " + data.string() + " --split test --ckpt " + ckpt + " --out " +
                s1.string() + " --mode mask --ref --steps 2 --seed 9") == 0);
    REQUIRE(run("sample --data " + data.string() + " --split test --ckpt " + ckpt + " --out " +
                s2.string() + " --mode mask --ref --steps 2 --seed 9") == 0);
    CHECK(slurp(s1 / "gen_0.png") == slurp(s2 / "gen_0.png"));

    // Degenerate one-step sampler still emits output.
    const fs::path s3 = kWork / "samp_3";
    REQUIRE(run("sample --data " + data.string() + " --split test --ckpt " + ckpt + " --out " +
                s3.string() + " --mode mf --steps 1 --seed 2") == 0);
    CHECK(fs::exists(s3 / "gen_0.png"));

    // Remove the reference role: --ref must fail, plain mask must not.
    for (int i = 0; i < 3; ++i)
        fs::remove(data / "test" / (std::to_string(i) + "_ref.png"));
    CHECK(run("sample --data " + data.string() + " --split test --ckpt " + ckpt + " --out " +
              (kWork / "samp_4").string() + " --mode mask --ref --steps 1") == 1);
    CHECK(run("sample --data " + data.string() + " --split test --ckpt " + ckpt + " --out " +
              (kWork / "samp_5").string() + " --mode mask --steps 1") == 0);
}

TEST_CASE("eval scores self-targets as perfect and reports requested modes") {
    workspace();
    const fs::path data = kWork / "eval_data";
    REQUIRE(run("gen-data --out " + data.string() + " --n 4 --seed 13 --split test "
                "--category-mix 1,0,0") == 0);

    // Copy the targets as a generated set.
    const fs::path gen = kWork / "eval_gen";
    fs::create_directories(gen);
    for (int i = 0; i < 4; ++i)
        fs::copy_file(data / "test" / (std::to_string(i) + "_target.png"),
                      gen / ("gen_" + std::to_string(i) + ".png"));

    const fs::path out = kWork / "eval_out";
    REQUIRE(run("eval --data " + data.string() + " --split test --out " + out.string() +
                " --gen " + gen.string()) == 0);
    const MetricReport report = MetricReport::load(out / "report.txt");
    const MetricRow* ssim_row = report.find("ssim", "ext");
    REQUIRE(ssim_row != nullptr);
    CHECK(ssim_row->value == doctest::Approx(1.0).epsilon(1e-9));
    const MetricRow* fid_row = report.find("fid", "ext");
    REQUIRE(fid_row != nullptr);
    CHECK(std::fabs(fid_row->value) <= 1e-8);

    // Missing split directory errors, naming the path.
    CHECK(run("eval --data " + data.string() + " --split missing --out " +
              (kWork / "eval_missing").string() + " --gen " + gen.string()) == 1);

    // Model-driven eval covers all requested modes.
    const fs::path runa = kWork / "eval_run";
    REQUIRE(run("train-stage1 --data " + data.string() + " --split test --out " + runa.string() +
                " --seed 5" + common_train_flags()) == 0);
    const fs::path out2 = kWork / "eval_out2";
    REQUIRE(run("eval --data " + data.string() + " --split test --out " + out2.string() +
                " --ckpt " + (runa / "ckpt_final").string() +
                " --modes mask,mask+ref,mf,mf+ref --steps 2 --seed 3") == 0);
    const MetricReport rep2 = MetricReport::load(out2 / "report.txt");
    for (const char* m : {"mask", "mask+ref", "mf", "mf+ref"})
        CHECK(rep2.find("ssim", m) != nullptr);
}

TEST_CASE("the full two-stage chain runs at smoke scale") {
    workspace();
    const fs::path data = kWork / "chain_data";
    REQUIRE(run("gen-data --out " + data.string() + " --n 4 --seed 17 --category-mix 1,0,0") == 0);
    const fs::path s1 = kWork / "chain_s1";
    REQUIRE(run("train-stage1 --data " + data.string() + " --out " + s1.string() + " --seed 1" +
                common_train_flags()) == 0);
    const fs::path unp = kWork / "chain_unp";
    REQUIRE(run("synth-unpaired --data " + data.string() + " --ckpt " +
                (s1 / "ckpt_final").string() + " --out " + unp.string() + " --steps 2 --seed 2") ==
            0);
    const fs::path s2 = kWork / "chain_s2";
    REQUIRE(run("train-stage2 --data " + data.string() + " --unpaired " + unp.string() +
                " --out " + s2.string() + " --init-from " + (s1 / "ckpt_final").string() +
                " --seed 3 --p-person 0.5 --p-ref 0.25" + common_train_flags()) == 0);
    CHECK(fs::exists(s2 / "ckpt_final.manifest"));

    const fs::path refs = kWork / "chain_refs";
    REQUIRE(run("gen-refs --data " + data.string() + " --out " + refs.string() + " --seed 4") == 0);
    CHECK(fs::exists(refs / "pairs_manifest.txt"));
}
