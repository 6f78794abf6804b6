#pragma once

#include <filesystem>
#include <vector>

#include "tryflow/flow.hpp"
#include "tryflow/metrics.hpp"
#include "tryflow/model.hpp"
#include "tryflow/optim.hpp"
#include "tryflow/synthworld.hpp"

namespace tryflow {

enum class Stage { one = 1, two = 2 };

struct StageConfig {
    Stage stage = Stage::one;
    int steps = 2000;
    int batch = 8;
    double p_person = 0.0;     // stage-2: person image instead of agnostic
    double p_reference = 0.0;  // stage-2: append the reference image
    bool category_match = true;
    AdamWConfig optim;
    int checkpoint_every = 0;  // 0 = final checkpoint only
    int log_every = 50;

    void validate() const;  // stage one forces p_person = p_reference = 0
};

struct ConditionDraw {
    bool use_person = false;
    bool use_reference = false;
};

// The stochastic condition-dropout pattern for one stage-2 sample.
ConditionDraw draw_condition_pattern(Rng& rng, const StageConfig& cfg);

// Slot-1 input: RGB image with the pose map stacked as three extra channels
// (zeroed in the mask-free/person branch).
Image stack_slot1(const Image& rgb, const Image* pose);

// Stage-1 conditioning [a_i (+pose channels), c_i].
std::vector<ConditionImage> stage1_conditions(const DatasetRecord& rec);

// Evaluation-time conditioning for the four try-on modes.
std::vector<ConditionImage> eval_conditions(const DatasetRecord& rec, bool mask_free,
                                            bool with_ref);

struct TrainResult {
    ModelParams<float> params;
    std::vector<std::pair<long, double>> loss_curve;
    long final_step = 0;
};

// Flow-matching training on mask-based conditioning; persists loss.csv and
// checkpoints under run_dir. Aborts (after saving ckpt_diverged) when the
// loss goes non-finite.
TrainResult train_stage1(const std::vector<DatasetRecord>& data, const StageConfig& cfg,
                         ModelParams<float> model, Rng& rng, const std::filesystem::path& run_dir,
                         long start_step = 0);

struct UnpairedRecord {
    int target_idx = 0;
    int donor_idx = 0;
    GarmentParams donor_garment;
    Image synthesized;  // person i rendered into donor garment c_j by the stage-1 model
};

// Draws a same-category donor garment c_j != c_i per record and generates the
// unpaired person image from [a_i, c_j, d_i] with the stage-1 model.
std::vector<UnpairedRecord> synthesize_unpaired(const ModelParams<float>& stage1_model,
                                                const std::vector<DatasetRecord>& data,
                                                const SamplerConfig& sampler, Rng& rng,
                                                bool category_match = true);

void save_unpaired(const std::vector<UnpairedRecord>& records, const std::filesystem::path& dir);
std::vector<UnpairedRecord> load_unpaired(const std::filesystem::path& dir);

// Stage-2 training: slot 1 carries the synthesized person with probability
// p_person (else the agnostic image); the reference is appended with
// probability p_reference; the target is the paired person image.
TrainResult train_stage2(const std::vector<DatasetRecord>& data,
                         const std::vector<UnpairedRecord>& unpaired, const StageConfig& cfg,
                         ModelParams<float> model, Rng& rng, const std::filesystem::path& run_dir,
                         long start_step = 0);

struct EvalMode {
    bool mask_free = false;
    bool with_ref = false;
};

std::string mode_name(const EvalMode& mode);

// Generates try-ons for every record and mode, writes the PNGs and a report
// with paired (SSIM, garment SSIM, perceptual, hue accuracy, FID, KID) and
// unpaired (FID, KID against the person-image distribution) rows.
MetricReport evaluate_run(const ModelParams<float>& model, const std::vector<DatasetRecord>& test,
                          const std::vector<EvalMode>& modes, const SamplerConfig& sampler,
                          Rng& rng, const std::filesystem::path& out_dir);

}  // namespace tryflow
