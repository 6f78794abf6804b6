#pragma once

#include <Eigen/Core>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tryflow/image.hpp"
#include "tryflow/posindex.hpp"
#include "tryflow/rng.hpp"

namespace tryflow {

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct ModelConfig {
    int patch_size = 4;
    int width = 72;
    int depth = 3;
    int heads = 3;
    int time_embed_dim = 64;
    int lora_rank = 8;
    double lora_alpha = 16.0;
    int image_channels = 3;
    int slot1_extra_channels = 3;  // pose map channels stacked onto the slot-1 image
    double rope_base = 10000.0;

    int head_dim() const { return width / heads; }
    // Per-axis rotated width inside each head; three axis blocks of this size
    // rotate, any remaining head features pass through.
    int rope_axis_dim() const { return 2 * (head_dim() / 6); }
    int patch_dim() const { return patch_size * patch_size * image_channels; }
    int slot1_patch_dim() const {
        return patch_size * patch_size * (image_channels + slot1_extra_channels);
    }
    int mlp_dim() const { return 4 * width; }

    void validate() const;  // throws std::invalid_argument

    bool operator==(const ModelConfig&) const = default;
};

template <typename S>
struct LoraPair {
    MatX<S> a;  // rank x in
    MatX<S> b;  // out x rank
};

template <typename S>
struct BlockParams {
    MatX<S> wq, wk, wv, wo;  // width x width
    VecX<S> bq, bk, bv, bo;
    MatX<S> w1;  // mlp_dim x width
    VecX<S> b1;
    MatX<S> w2;  // width x mlp_dim
    VecX<S> b2;
    MatX<S> wmod;  // 6*width x width -> (shift1, scale1, gate1, shift2, scale2, gate2)
    VecX<S> bmod;
    std::optional<LoraPair<S>> lora_q, lora_k, lora_v, lora_o;
};

template <typename S>
struct ModelParams {
    ModelConfig config;
    MatX<S> embed_img;  // width x patch_dim, shared by noise / cloth / reference grids
    VecX<S> embed_img_b;
    MatX<S> embed_slot1;  // width x slot1_patch_dim
    VecX<S> embed_slot1_b;
    MatX<S> time_w1;  // width x time_embed_dim
    VecX<S> time_b1;
    MatX<S> time_w2;  // width x width
    VecX<S> time_b2;
    MatX<S> final_mod_w;  // 2*width x width -> (shift, scale)
    VecX<S> final_mod_b;
    MatX<S> unembed;  // patch_dim x width
    VecX<S> unembed_b;
    std::vector<BlockParams<S>> blocks;

    bool has_lora() const;

    template <typename T>
    ModelParams<T> cast() const;
};

// Random initialization: scaled-normal projections, zeroed modulation and
// output head so the model is the identity-free zero map at step 0.
template <typename S>
ModelParams<S> init_model(const ModelConfig& cfg, Rng& rng);

// Same shapes, all tensors zero. Used for gradients and optimizer state.
template <typename S>
ModelParams<S> zeros_like(const ModelParams<S>& p);

// Non-degenerate random values in every tensor (modulation and head included);
// used by gradient checks and numerical tests.
template <typename S>
void randomize_all(ModelParams<S>& p, Rng& rng, double scale = 0.2);

template <typename S>
using TensorVisitor = std::function<void(const std::string&, S*, Eigen::Index rows, Eigen::Index cols)>;

// Enumerates every tensor (LoRA pairs included when attached) in a fixed
// order shared by the optimizer, checkpoints and gradient checks.
template <typename S>
void visit_tensors(ModelParams<S>& p, const TensorVisitor<S>& f);

template <typename S>
size_t parameter_count(const ModelParams<S>& p);

// LoRA target projections are named "q", "k", "v", "out".
template <typename S>
void attach_lora(ModelParams<S>& p, const std::vector<std::string>& targets, Rng& rng);

// Folds adapters into base weights: W' = W + (alpha/rank) * B * A, then clears
// the adapter slots. Throws when no adapter is attached.
template <typename S>
void merge_lora(ModelParams<S>& p);

// ---------------------------------------------------------------------------
// Token sequences

template <typename S>
struct SeqPart {
    GridSpec grid;
    int offset = 0;    // first token row in the sequence
    MatX<S> patches;   // token_count x (ps*ps*channels), raw pixels for embed grads
    int channels = 0;
};

template <typename S>
struct TokenSeq {
    MatX<S> tokens;  // L x width
    PositionIndex index;
    std::vector<SeqPart<S>> parts;  // parts[0] is the id-0 block

    Eigen::Index length() const { return tokens.rows(); }
    int noise_tokens() const { return parts.empty() ? 0 : parts[0].grid.token_count(); }
};

// One conditioning image; channels must be 3 (cloth/reference) or
// 3 + slot1_extra_channels (the agnostic-or-person slot).
struct ConditionImage {
    Image image;
    int condition_id = 0;
};

// Row-major patch extraction; columns ordered (patch-y, patch-x, channel).
template <typename S>
MatX<S> extract_patches(const Image& img, int patch_size);

// Linear patch embedding: tokens = patches * W^T + b.
template <typename S>
MatX<S> embed_patches(const MatX<S>& patches, const MatX<S>& w, const VecX<S>& b);

// Spec patchify = extract + embed; throws when dims are not divisible.
template <typename S>
MatX<S> patchify(const Image& img, int patch_size, const MatX<S>& w, const VecX<S>& b);

// Inverse patch arrangement from rows of ps*ps*channels values.
template <typename S>
Image patches_to_image(const MatX<S>& rows, int grid_rows, int grid_cols, int patch_size,
                       int channels);

// Assembles noise + condition tokens with their three-channel position index.
template <typename S>
TokenSeq<S> build_sequence(const ModelParams<S>& p, const Image& noisy_target,
                           const std::vector<ConditionImage>& conditions);

// ---------------------------------------------------------------------------
// Forward / backward

template <typename S>
struct BlockCache {
    VecX<S> rstd1, rstd2;
    MatX<S> n1, n2;          // layernorm outputs
    MatX<S> hmod1, hmod2;    // modulated layernorm outputs (projection inputs)
    MatX<S> q, k, v;         // post-rope q/k
    std::vector<MatX<S>> probs;  // per-head softmax
    MatX<S> attn_concat;
    MatX<S> attn_out;
    MatX<S> mlp_pre, mlp_act, mlp_out;
    VecX<S> mvec;
};

template <typename S>
struct ForwardCache {
    VecX<S> time_feats, th1_pre, th1, ht_pre, ht;
    std::vector<BlockCache<S>> blocks;
    VecX<S> rstdf;
    MatX<S> fnorm, fmod;
    VecX<S> fvec;
};

// Velocity prediction for the id-0 block: returns L0 x patch_dim rows.
// Condition tokens attend and are attended to but produce no output.
template <typename S>
MatX<S> dit_forward(const ModelParams<S>& p, const TokenSeq<S>& seq, double t,
                    ForwardCache<S>* cache = nullptr);

// Accumulates parameter gradients for d(loss)/d(output) into `grads`
// (same shapes as params; caller provides zeros or running sums).
template <typename S>
void dit_backward(const ModelParams<S>& p, const TokenSeq<S>& seq, double t,
                  const ForwardCache<S>& cache, const MatX<S>& d_out, ModelParams<S>& grads);

}  // namespace tryflow
