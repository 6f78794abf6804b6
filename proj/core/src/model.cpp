#include "tryflow/model.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace tryflow {

namespace {

constexpr double kLnEps = 1e-6;

template <typename S>
S silu(S x) {
    const S sig = S(1) / (S(1) + std::exp(-x));
    return x * sig;
}

template <typename S>
S silu_grad(S x) {
    const S sig = S(1) / (S(1) + std::exp(-x));
    return sig * (S(1) + x * (S(1) - sig));
}

template <typename S>
S gelu(S x) {
    return S(0.5) * x * (S(1) + std::erf(x * S(M_SQRT1_2)));
}

template <typename S>
S gelu_grad(S x) {
    const S phi = std::exp(S(-0.5) * x * x) * S(0.3989422804014326779);  // 1/sqrt(2*pi)
    return S(0.5) * (S(1) + std::erf(x * S(M_SQRT1_2))) + x * phi;
}

// Per-token layernorm without affine; returns normalized rows and caches rstd.
template <typename S>
MatX<S> layernorm(const MatX<S>& x, VecX<S>& rstd) {
    const auto w = static_cast<S>(x.cols());
    VecX<S> mean = x.rowwise().mean();
    MatX<S> centered = x.array().colwise() - mean.array();
    VecX<S> var = centered.array().square().rowwise().sum() / w;
    rstd = (var.array() + S(kLnEps)).rsqrt();
    return centered.array().colwise() * rstd.array();
}

template <typename S>
MatX<S> layernorm_backward(const MatX<S>& dn, const MatX<S>& n, const VecX<S>& rstd) {
    const auto w = static_cast<S>(n.cols());
    VecX<S> mean_dn = dn.rowwise().sum() / w;
    VecX<S> mean_dnn = (dn.array() * n.array()).rowwise().sum() / w;
    MatX<S> dx = ((dn.array().colwise() - mean_dn.array()) -
                  (n.array().colwise() * mean_dnn.array()))
                     .colwise() *
                 rstd.array();
    return dx;
}

// y = x * (1 + scale) + shift with per-channel vectors broadcast over tokens.
template <typename S>
MatX<S> modulate(const MatX<S>& x, const VecX<S>& shift, const VecX<S>& scale) {
    return (x.array().rowwise() * (scale.array() + S(1)).transpose()).rowwise() +
           shift.transpose().array();
}

template <typename S>
MatX<S> linear(const MatX<S>& x, const MatX<S>& w, const VecX<S>& b) {
    return (x * w.transpose()).rowwise() + b.transpose();
}

// Projection with optional LoRA adapter: y = x W^T + b + s (x A^T) B^T.
template <typename S>
MatX<S> project(const MatX<S>& x, const MatX<S>& w, const VecX<S>& b,
                const std::optional<LoraPair<S>>& lora, double lora_scale) {
    MatX<S> y = linear(x, w, b);
    if (lora) y.noalias() += static_cast<S>(lora_scale) * (x * lora->a.transpose()) * lora->b.transpose();
    return y;
}

template <typename S>
void project_backward(const MatX<S>& x, const MatX<S>& w,
                      const std::optional<LoraPair<S>>& lora, double lora_scale,
                      const MatX<S>& dy, MatX<S>& dw, VecX<S>& db,
                      std::optional<LoraPair<S>>& dlora, MatX<S>& dx_accum) {
    dw.noalias() += dy.transpose() * x;
    db.noalias() += dy.colwise().sum().transpose();
    dx_accum.noalias() += dy * w;
    if (lora) {
        const S s = static_cast<S>(lora_scale);
        MatX<S> u = x * lora->a.transpose();       // L x r
        MatX<S> du = s * (dy * lora->b);           // L x r
        dlora->b.noalias() += s * (dy.transpose() * u);
        dlora->a.noalias() += du.transpose() * x;
        dx_accum.noalias() += du * lora->a;
    }
}

template <typename S>
VecX<S> time_features(double t, int dim) {
    // Flux-style timestep features: log-spaced frequencies applied to 1000*t.
    VecX<S> f(dim);
    const int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * k / half);
        const double arg = 1000.0 * t * freq;
        f(2 * k) = static_cast<S>(std::cos(arg));
        f(2 * k + 1) = static_cast<S>(std::sin(arg));
    }
    return f;
}

template <typename S>
VecX<S> col_sums(const MatX<S>& m) {
    return m.colwise().sum().transpose();
}

template <typename S>
VecX<S> gate_grad(const MatX<S>& dx, const MatX<S>& branch) {
    return (dx.array() * branch.array()).colwise().sum().transpose();
}

}  // namespace

void ModelConfig::validate() const {
    if (patch_size < 1) throw std::invalid_argument("ModelConfig: patch_size must be >= 1");
    if (depth < 1) throw std::invalid_argument("ModelConfig: depth must be >= 1");
    if (heads < 1) throw std::invalid_argument("ModelConfig: heads must be >= 1");
    if (width < 1 || width % heads != 0)
        throw std::invalid_argument("ModelConfig: width must be a positive multiple of heads");
    if (head_dim() % 2 != 0) throw std::invalid_argument("ModelConfig: head_dim must be even");
    if (head_dim() < 6)
        throw std::invalid_argument("ModelConfig: head_dim must be >= 6 to host three rotary axes");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
        throw std::invalid_argument("ModelConfig: time_embed_dim must be a positive even integer");
    if (lora_rank < 0 || lora_rank > width)
        throw std::invalid_argument("ModelConfig: lora_rank must lie in [0, width]");
    if (lora_alpha <= 0) throw std::invalid_argument("ModelConfig: lora_alpha must be positive");
    if (image_channels != 3) throw std::invalid_argument("ModelConfig: image_channels must be 3");
    if (slot1_extra_channels < 0)
        throw std::invalid_argument("ModelConfig: slot1_extra_channels must be >= 0");
    if (rope_base <= 1.0) throw std::invalid_argument("ModelConfig: rope_base must exceed 1");
}

template <typename S>
bool ModelParams<S>::has_lora() const {
    for (const auto& b : blocks)
        if (b.lora_q || b.lora_k || b.lora_v || b.lora_o) return true;
    return false;
}

namespace {

template <typename S>
MatX<S> random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double std) {
    MatX<S> m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<S>(rng.normal(0.0, std));
    return m;
}

}  // namespace

template <typename S>
ModelParams<S> init_model(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParams<S> p;
    p.config = cfg;
    const int w = cfg.width;
    auto xavier = [&](Eigen::Index rows, Eigen::Index cols) {
        return random_matrix<S>(rows, cols, rng, 1.0 / std::sqrt(static_cast<double>(cols)));
    };
    p.embed_img = xavier(w, cfg.patch_dim());
    p.embed_img_b = VecX<S>::Zero(w);
    p.embed_slot1 = xavier(w, cfg.slot1_patch_dim());
    p.embed_slot1_b = VecX<S>::Zero(w);
    p.time_w1 = xavier(w, cfg.time_embed_dim);
    p.time_b1 = VecX<S>::Zero(w);
    p.time_w2 = xavier(w, w);
    p.time_b2 = VecX<S>::Zero(w);
    p.final_mod_w = MatX<S>::Zero(2 * w, w);
    p.final_mod_b = VecX<S>::Zero(2 * w);
    p.unembed = MatX<S>::Zero(cfg.patch_dim(), w);
    p.unembed_b = VecX<S>::Zero(cfg.patch_dim());
    p.blocks.resize(static_cast<size_t>(cfg.depth));
    for (auto& b : p.blocks) {
        b.wq = xavier(w, w);
        b.wk = xavier(w, w);
        b.wv = xavier(w, w);
        b.wo = xavier(w, w);
        b.bq = VecX<S>::Zero(w);
        b.bk = VecX<S>::Zero(w);
        b.bv = VecX<S>::Zero(w);
        b.bo = VecX<S>::Zero(w);
        b.w1 = xavier(cfg.mlp_dim(), w);
        b.b1 = VecX<S>::Zero(cfg.mlp_dim());
        b.w2 = xavier(w, cfg.mlp_dim());
        b.b2 = VecX<S>::Zero(w);
        b.wmod = MatX<S>::Zero(6 * w, w);
        b.bmod = VecX<S>::Zero(6 * w);
    }
    return p;
}

template <typename S>
ModelParams<S> zeros_like(const ModelParams<S>& p) {
    ModelParams<S> z;
    z.config = p.config;
    auto zero = [](const MatX<S>& m) { return MatX<S>::Zero(m.rows(), m.cols()).eval(); };
    auto zerov = [](const VecX<S>& v) { return VecX<S>::Zero(v.size()).eval(); };
    z.embed_img = zero(p.embed_img);
    z.embed_img_b = zerov(p.embed_img_b);
    z.embed_slot1 = zero(p.embed_slot1);
    z.embed_slot1_b = zerov(p.embed_slot1_b);
    z.time_w1 = zero(p.time_w1);
    z.time_b1 = zerov(p.time_b1);
    z.time_w2 = zero(p.time_w2);
    z.time_b2 = zerov(p.time_b2);
    z.final_mod_w = zero(p.final_mod_w);
    z.final_mod_b = zerov(p.final_mod_b);
    z.unembed = zero(p.unembed);
    z.unembed_b = zerov(p.unembed_b);
    z.blocks.resize(p.blocks.size());
    for (size_t i = 0; i < p.blocks.size(); ++i) {
        const auto& b = p.blocks[i];
        auto& zb = z.blocks[i];
        zb.wq = zero(b.wq);
        zb.wk = zero(b.wk);
        zb.wv = zero(b.wv);
        zb.wo = zero(b.wo);
        zb.bq = zerov(b.bq);
        zb.bk = zerov(b.bk);
        zb.bv = zerov(b.bv);
        zb.bo = zerov(b.bo);
        zb.w1 = zero(b.w1);
        zb.b1 = zerov(b.b1);
        zb.w2 = zero(b.w2);
        zb.b2 = zerov(b.b2);
        zb.wmod = zero(b.wmod);
        zb.bmod = zerov(b.bmod);
        auto zl = [&](const std::optional<LoraPair<S>>& l) -> std::optional<LoraPair<S>> {
            if (!l) return std::nullopt;
            return LoraPair<S>{zero(l->a), zero(l->b)};
        };
        zb.lora_q = zl(b.lora_q);
        zb.lora_k = zl(b.lora_k);
        zb.lora_v = zl(b.lora_v);
        zb.lora_o = zl(b.lora_o);
    }
    return z;
}

template <typename S>
void randomize_all(ModelParams<S>& p, Rng& rng, double scale) {
    visit_tensors<S>(p, [&](const std::string&, S* data, Eigen::Index rows, Eigen::Index cols) {
        const double std = scale / std::sqrt(static_cast<double>(std::max<Eigen::Index>(1, cols)));
        for (Eigen::Index i = 0; i < rows * cols; ++i) data[i] = static_cast<S>(rng.normal(0.0, std));
    });
}

template <typename S>
void visit_tensors(ModelParams<S>& p, const TensorVisitor<S>& f) {
    auto m = [&](const std::string& name, MatX<S>& t) { f(name, t.data(), t.rows(), t.cols()); };
    auto v = [&](const std::string& name, VecX<S>& t) { f(name, t.data(), t.size(), 1); };
    m("embed_img.w", p.embed_img);
    v("embed_img.b", p.embed_img_b);
    m("embed_slot1.w", p.embed_slot1);
    v("embed_slot1.b", p.embed_slot1_b);
    m("time.w1", p.time_w1);
    v("time.b1", p.time_b1);
    m("time.w2", p.time_w2);
    v("time.b2", p.time_b2);
    for (size_t i = 0; i < p.blocks.size(); ++i) {
        auto& b = p.blocks[i];
        const std::string pre = "block" + std::to_string(i) + ".";
        m(pre + "wq", b.wq);
        v(pre + "bq", b.bq);
        m(pre + "wk", b.wk);
        v(pre + "bk", b.bk);
        m(pre + "wv", b.wv);
        v(pre + "bv", b.bv);
        m(pre + "wo", b.wo);
        v(pre + "bo", b.bo);
        m(pre + "w1", b.w1);
        v(pre + "b1", b.b1);
        m(pre + "w2", b.w2);
        v(pre + "b2", b.b2);
        m(pre + "wmod", b.wmod);
        v(pre + "bmod", b.bmod);
        auto lora = [&](const std::string& tag, std::optional<LoraPair<S>>& l) {
            if (!l) return;
            m(pre + tag + ".lora_a", l->a);
            m(pre + tag + ".lora_b", l->b);
        };
        lora("wq", b.lora_q);
        lora("wk", b.lora_k);
        lora("wv", b.lora_v);
        lora("wo", b.lora_o);
    }
    m("final.mod_w", p.final_mod_w);
    v("final.mod_b", p.final_mod_b);
    m("unembed.w", p.unembed);
    v("unembed.b", p.unembed_b);
}

template <typename S>
size_t parameter_count(const ModelParams<S>& p) {
    size_t n = 0;
    visit_tensors<S>(const_cast<ModelParams<S>&>(p),
                     [&](const std::string&, S*, Eigen::Index rows, Eigen::Index cols) {
                         n += static_cast<size_t>(rows * cols);
                     });
    return n;
}

template <typename S>
void attach_lora(ModelParams<S>& p, const std::vector<std::string>& targets, Rng& rng) {
    if (p.config.lora_rank < 1)
        throw std::invalid_argument("attach_lora: config.lora_rank must be positive");
    std::set<std::string> want;
    for (const auto& t : targets) {
        if (t != "q" && t != "k" && t != "v" && t != "out")
            throw std::invalid_argument("attach_lora: unknown target '" + t +
                                        "' (expected q, k, v or out)");
        want.insert(t);
    }
    const int r = p.config.lora_rank;
    const int w = p.config.width;
    auto fresh = [&]() {
        // B starts at zero so the adapted projection equals the base projection.
        return LoraPair<S>{random_matrix<S>(r, w, rng, 0.02), MatX<S>::Zero(w, r).eval()};
    };
    for (auto& b : p.blocks) {
        if (want.count("q")) {
            if (b.lora_q) throw std::runtime_error("attach_lora: adapter already attached to q");
            b.lora_q = fresh();
        }
        if (want.count("k")) {
            if (b.lora_k) throw std::runtime_error("attach_lora: adapter already attached to k");
            b.lora_k = fresh();
        }
        if (want.count("v")) {
            if (b.lora_v) throw std::runtime_error("attach_lora: adapter already attached to v");
            b.lora_v = fresh();
        }
        if (want.count("out")) {
            if (b.lora_o) throw std::runtime_error("attach_lora: adapter already attached to out");
            b.lora_o = fresh();
        }
    }
}

template <typename S>
void merge_lora(ModelParams<S>& p) {
    if (!p.has_lora()) throw std::runtime_error("merge_lora: no adapters attached");
    const S s = static_cast<S>(p.config.lora_alpha / p.config.lora_rank);
    for (auto& b : p.blocks) {
        auto fold = [&](MatX<S>& w, std::optional<LoraPair<S>>& l) {
            if (!l) return;
            w.noalias() += s * (l->b * l->a);
            l.reset();
        };
        fold(b.wq, b.lora_q);
        fold(b.wk, b.lora_k);
        fold(b.wv, b.lora_v);
        fold(b.wo, b.lora_o);
    }
}

// ---------------------------------------------------------------------------

template <typename S>
MatX<S> extract_patches(const Image& img, int patch_size) {
    if (patch_size < 1) throw std::invalid_argument("extract_patches: patch_size must be >= 1");
    if (img.height % patch_size != 0 || img.width % patch_size != 0)
        throw std::invalid_argument("extract_patches: image dims " + std::to_string(img.height) +
                                    "x" + std::to_string(img.width) +
                                    " not divisible by patch_size " + std::to_string(patch_size));
    const int gr = img.height / patch_size;
    const int gc = img.width / patch_size;
    MatX<S> out(gr * gc, patch_size * patch_size * img.channels);
    for (int py = 0; py < gr; ++py)
        for (int px = 0; px < gc; ++px) {
            const Eigen::Index row = static_cast<Eigen::Index>(py) * gc + px;
            Eigen::Index col = 0;
            for (int dy = 0; dy < patch_size; ++dy)
                for (int dx = 0; dx < patch_size; ++dx)
                    for (int c = 0; c < img.channels; ++c)
                        out(row, col++) =
                            static_cast<S>(img.at(py * patch_size + dy, px * patch_size + dx, c));
        }
    return out;
}

template <typename S>
MatX<S> embed_patches(const MatX<S>& patches, const MatX<S>& w, const VecX<S>& b) {
    if (patches.cols() != w.cols())
        throw std::invalid_argument("embed_patches: patch dim " + std::to_string(patches.cols()) +
                                    " does not match embedding input dim " + std::to_string(w.cols()));
    return linear(patches, w, b);
}

template <typename S>
MatX<S> patchify(const Image& img, int patch_size, const MatX<S>& w, const VecX<S>& b) {
    return embed_patches(extract_patches<S>(img, patch_size), w, b);
}

template <typename S>
Image patches_to_image(const MatX<S>& rows, int grid_rows, int grid_cols, int patch_size,
                       int channels) {
    if (rows.rows() != static_cast<Eigen::Index>(grid_rows) * grid_cols)
        throw std::invalid_argument("patches_to_image: row count does not match grid");
    if (rows.cols() != static_cast<Eigen::Index>(patch_size) * patch_size * channels)
        throw std::invalid_argument("patches_to_image: column count does not match patch dim");
    Image img(grid_rows * patch_size, grid_cols * patch_size, channels);
    for (int py = 0; py < grid_rows; ++py)
        for (int px = 0; px < grid_cols; ++px) {
            const Eigen::Index row = static_cast<Eigen::Index>(py) * grid_cols + px;
            Eigen::Index col = 0;
            for (int dy = 0; dy < patch_size; ++dy)
                for (int dx = 0; dx < patch_size; ++dx)
                    for (int c = 0; c < channels; ++c)
                        img.at(py * patch_size + dy, px * patch_size + dx, c) =
                            static_cast<float>(rows(row, col++));
        }
    return img;
}

template <typename S>
TokenSeq<S> build_sequence(const ModelParams<S>& p, const Image& noisy_target,
                           const std::vector<ConditionImage>& conditions) {
    const auto& cfg = p.config;
    const int ps = cfg.patch_size;
    TokenSeq<S> seq;

    SeqPart<S> noise_part;
    noise_part.grid = {noisy_target.height / ps, noisy_target.width / ps, 0};
    noise_part.offset = 0;
    noise_part.channels = noisy_target.channels;
    if (noisy_target.channels != cfg.image_channels)
        throw std::invalid_argument("build_sequence: noisy target must have 3 channels");
    noise_part.patches = extract_patches<S>(noisy_target, ps);

    std::vector<GridSpec> cond_grids;
    std::vector<SeqPart<S>> cond_parts;
    int offset = noise_part.grid.token_count();
    for (const auto& cond : conditions) {
        SeqPart<S> part;
        part.grid = {cond.image.height / ps, cond.image.width / ps, cond.condition_id};
        part.offset = offset;
        part.channels = cond.image.channels;
        const int want = cond.condition_id == 1 ? cfg.image_channels + cfg.slot1_extra_channels
                                                : cfg.image_channels;
        if (cond.image.channels != want)
            throw std::invalid_argument(
                "build_sequence: condition_id " + std::to_string(cond.condition_id) + " expects " +
                std::to_string(want) + " channels, got " + std::to_string(cond.image.channels));
        part.patches = extract_patches<S>(cond.image, ps);
        offset += part.grid.token_count();
        cond_grids.push_back(part.grid);
        cond_parts.push_back(std::move(part));
    }

    seq.index = build_position_index(noise_part.grid, cond_grids);
    seq.tokens.resize(offset, cfg.width);
    seq.tokens.topRows(noise_part.grid.token_count()) =
        embed_patches(noise_part.patches, p.embed_img, p.embed_img_b);
    seq.parts.push_back(std::move(noise_part));
    for (auto& part : cond_parts) {
        const auto& w = part.grid.condition_id == 1 ? p.embed_slot1 : p.embed_img;
        const auto& b = part.grid.condition_id == 1 ? p.embed_slot1_b : p.embed_img_b;
        seq.tokens.middleRows(part.offset, part.grid.token_count()) =
            embed_patches(part.patches, w, b);
        seq.parts.push_back(std::move(part));
    }
    return seq;
}

// ---------------------------------------------------------------------------

namespace {

template <typename S>
void check_sequence(const ModelParams<S>& p, const TokenSeq<S>& seq, double t) {
    if (!std::isfinite(t)) throw std::invalid_argument("dit_forward: t must be finite");
    if (seq.parts.empty() || seq.parts[0].grid.condition_id != 0 || seq.parts[0].offset != 0)
        throw std::invalid_argument("dit_forward: sequence must start with the id-0 block");
    int id0 = 0;
    for (const auto& part : seq.parts)
        if (part.grid.condition_id == 0) ++id0;
    if (id0 != 1) throw std::invalid_argument("dit_forward: exactly one id-0 block required");
    if (seq.tokens.rows() != static_cast<Eigen::Index>(seq.index.size()))
        throw std::invalid_argument("dit_forward: token/index length mismatch");
    if (seq.tokens.cols() != p.config.width)
        throw std::invalid_argument("dit_forward: token width does not match model width");
}

// Applies per-head rope to q or k in place. Rotates three axis blocks of
// axis_dim features at the head start; the rest of the head passes through.
template <typename S>
void rope_heads(MatX<S>& x, const PositionIndex& index, const ModelConfig& cfg, bool inverse) {
    const int axis_dim = cfg.rope_axis_dim();
    if (axis_dim == 0) return;
    const RopeTable table = rope_table(axis_dim, cfg.rope_base);
    const int dh = cfg.head_dim();
    const double sign = inverse ? -1.0 : 1.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const PosEntry& e = index[static_cast<size_t>(i)];
        const double coords[3] = {static_cast<double>(e.id), e.row, e.col};
        for (int h = 0; h < cfg.heads; ++h)
            for (int axis = 0; axis < 3; ++axis) {
                auto block = x.block(i, h * dh + axis * axis_dim, 1, axis_dim);
                detail::rope_rotate_axis(block, table, sign * coords[axis]);
            }
    }
}

}  // namespace

template <typename S>
MatX<S> dit_forward(const ModelParams<S>& p, const TokenSeq<S>& seq, double t,
                    ForwardCache<S>* cache) {
    check_sequence(p, seq, t);
    const auto& cfg = p.config;
    const int w = cfg.width;
    const int dh = cfg.head_dim();
    const Eigen::Index L = seq.tokens.rows();
    const Eigen::Index L0 = seq.parts[0].grid.token_count();
    const double lora_scale = cfg.lora_rank > 0 ? cfg.lora_alpha / cfg.lora_rank : 0.0;

    ForwardCache<S> local;
    ForwardCache<S>& cc = cache ? *cache : local;
    cc.blocks.assign(p.blocks.size(), BlockCache<S>{});

    cc.time_feats = time_features<S>(t, cfg.time_embed_dim);
    cc.th1_pre = p.time_w1 * cc.time_feats + p.time_b1;
    cc.th1 = cc.th1_pre.unaryExpr([](S x) { return silu(x); });
    cc.ht_pre = p.time_w2 * cc.th1 + p.time_b2;
    cc.ht = cc.ht_pre.unaryExpr([](S x) { return silu(x); });

    MatX<S> x = seq.tokens;
    const S attn_scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

    for (size_t bi = 0; bi < p.blocks.size(); ++bi) {
        const auto& b = p.blocks[bi];
        auto& bc = cc.blocks[bi];
        bc.mvec = b.wmod * cc.ht + b.bmod;
        const auto shift1 = bc.mvec.segment(0, w);
        const auto scale1 = bc.mvec.segment(w, w);
        const auto gate1 = bc.mvec.segment(2 * w, w);
        const auto shift2 = bc.mvec.segment(3 * w, w);
        const auto scale2 = bc.mvec.segment(4 * w, w);
        const auto gate2 = bc.mvec.segment(5 * w, w);

        bc.n1 = layernorm(x, bc.rstd1);
        bc.hmod1 = modulate<S>(bc.n1, shift1, scale1);
        bc.q = project(bc.hmod1, b.wq, b.bq, b.lora_q, lora_scale);
        bc.k = project(bc.hmod1, b.wk, b.bk, b.lora_k, lora_scale);
        bc.v = project(bc.hmod1, b.wv, b.bv, b.lora_v, lora_scale);
        rope_heads(bc.q, seq.index, cfg, false);
        rope_heads(bc.k, seq.index, cfg, false);

        bc.attn_concat.resize(L, w);
        bc.probs.assign(static_cast<size_t>(cfg.heads), MatX<S>());
        for (int h = 0; h < cfg.heads; ++h) {
            auto qh = bc.q.middleCols(h * dh, dh);
            auto kh = bc.k.middleCols(h * dh, dh);
            auto vh = bc.v.middleCols(h * dh, dh);
            MatX<S> scores = (qh * kh.transpose()) * attn_scale;
            VecX<S> row_max = scores.rowwise().maxCoeff();
            MatX<S> e = (scores.colwise() - row_max).array().exp();
            VecX<S> denom = e.rowwise().sum();
            bc.probs[static_cast<size_t>(h)] = e.array().colwise() / denom.array();
            bc.attn_concat.middleCols(h * dh, dh).noalias() =
                bc.probs[static_cast<size_t>(h)] * vh;
        }
        bc.attn_out = project(bc.attn_concat, b.wo, b.bo, b.lora_o, lora_scale);
        x.array() += bc.attn_out.array().rowwise() * gate1.transpose().array();

        bc.n2 = layernorm(x, bc.rstd2);
        bc.hmod2 = modulate<S>(bc.n2, shift2, scale2);
        bc.mlp_pre = linear(bc.hmod2, b.w1, b.b1);
        bc.mlp_act = bc.mlp_pre.unaryExpr([](S v) { return gelu(v); });
        bc.mlp_out = linear(bc.mlp_act, b.w2, b.b2);
        x.array() += bc.mlp_out.array().rowwise() * gate2.transpose().array();
    }

    cc.fvec = p.final_mod_w * cc.ht + p.final_mod_b;
    MatX<S> x0 = x.topRows(L0);
    cc.fnorm = layernorm(x0, cc.rstdf);
    cc.fmod = modulate<S>(cc.fnorm, cc.fvec.segment(0, w), cc.fvec.segment(w, w));
    return linear(cc.fmod, p.unembed, p.unembed_b);
}

template <typename S>
void dit_backward(const ModelParams<S>& p, const TokenSeq<S>& seq, double t,
                  const ForwardCache<S>& cache, const MatX<S>& d_out, ModelParams<S>& grads) {
    (void)t;
    const auto& cfg = p.config;
    const int w = cfg.width;
    const int dh = cfg.head_dim();
    const Eigen::Index L = seq.tokens.rows();
    const Eigen::Index L0 = seq.parts[0].grid.token_count();
    const double lora_scale = cfg.lora_rank > 0 ? cfg.lora_alpha / cfg.lora_rank : 0.0;
    const S attn_scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

    VecX<S> dht = VecX<S>::Zero(w);

    // Final head.
    grads.unembed.noalias() += d_out.transpose() * cache.fmod;
    grads.unembed_b.noalias() += col_sums(d_out);
    MatX<S> dfmod = d_out * p.unembed;
    VecX<S> dfvec(2 * w);
    dfvec.segment(0, w) = col_sums(dfmod);
    dfvec.segment(w, w) = gate_grad(dfmod, cache.fnorm);
    MatX<S> dfnorm =
        dfmod.array().rowwise() * (cache.fvec.segment(w, w).array() + S(1)).transpose();
    grads.final_mod_w.noalias() += dfvec * cache.ht.transpose();
    grads.final_mod_b.noalias() += dfvec;
    dht.noalias() += p.final_mod_w.transpose() * dfvec;

    MatX<S> dx = MatX<S>::Zero(L, w);
    dx.topRows(L0) = layernorm_backward(dfnorm, cache.fnorm, cache.rstdf);

    for (size_t bi = p.blocks.size(); bi-- > 0;) {
        const auto& b = p.blocks[bi];
        const auto& bc = cache.blocks[bi];
        auto& gb = grads.blocks[bi];
        const auto scale1 = bc.mvec.segment(w, w);
        const auto gate1 = bc.mvec.segment(2 * w, w);
        const auto scale2 = bc.mvec.segment(4 * w, w);
        const auto gate2 = bc.mvec.segment(5 * w, w);
        VecX<S> dmvec(6 * w);

        // Second residual: x_out = x_mid + gate2 .* mlp_out.
        MatX<S> d_mlp_out = dx.array().rowwise() * gate2.transpose().array();
        dmvec.segment(5 * w, w) = gate_grad(dx, bc.mlp_out);

        MatX<S> d_act = d_mlp_out * b.w2;
        gb.w2.noalias() += d_mlp_out.transpose() * bc.mlp_act;
        gb.b2.noalias() += col_sums(d_mlp_out);
        MatX<S> d_pre = d_act.array() * bc.mlp_pre.unaryExpr([](S v) { return gelu_grad(v); }).array();
        gb.w1.noalias() += d_pre.transpose() * bc.hmod2;
        gb.b1.noalias() += col_sums(d_pre);
        MatX<S> dhmod2 = d_pre * b.w1;

        dmvec.segment(3 * w, w) = col_sums(dhmod2);
        dmvec.segment(4 * w, w) = gate_grad(dhmod2, bc.n2);
        MatX<S> dn2 = dhmod2.array().rowwise() * (scale2.array() + S(1)).transpose();
        dx.noalias() += layernorm_backward(dn2, bc.n2, bc.rstd2);

        // First residual: x_mid = x_in + gate1 .* attn_out.
        MatX<S> d_ao = dx.array().rowwise() * gate1.transpose().array();
        dmvec.segment(2 * w, w) = gate_grad(dx, bc.attn_out);

        MatX<S> d_concat = MatX<S>::Zero(L, w);
        MatX<S> dhmod1 = MatX<S>::Zero(L, w);
        project_backward(bc.attn_concat, b.wo, b.lora_o, lora_scale, d_ao, gb.wo, gb.bo,
                         gb.lora_o, d_concat);

        MatX<S> dq = MatX<S>::Zero(L, w);
        MatX<S> dk = MatX<S>::Zero(L, w);
        MatX<S> dv = MatX<S>::Zero(L, w);
        for (int h = 0; h < cfg.heads; ++h) {
            const auto& P = bc.probs[static_cast<size_t>(h)];
            auto d_oh = d_concat.middleCols(h * dh, dh);
            auto qh = bc.q.middleCols(h * dh, dh);
            auto kh = bc.k.middleCols(h * dh, dh);
            auto vh = bc.v.middleCols(h * dh, dh);
            dv.middleCols(h * dh, dh).noalias() = P.transpose() * d_oh;
            MatX<S> dP = d_oh * vh.transpose();
            VecX<S> rs = (dP.array() * P.array()).rowwise().sum();
            MatX<S> dS = P.array() * (dP.array().colwise() - rs.array());
            dq.middleCols(h * dh, dh).noalias() = (dS * kh) * attn_scale;
            dk.middleCols(h * dh, dh).noalias() = (dS.transpose() * qh) * attn_scale;
        }
        rope_heads(dq, seq.index, cfg, true);
        rope_heads(dk, seq.index, cfg, true);

        project_backward(bc.hmod1, b.wq, b.lora_q, lora_scale, dq, gb.wq, gb.bq, gb.lora_q, dhmod1);
        project_backward(bc.hmod1, b.wk, b.lora_k, lora_scale, dk, gb.wk, gb.bk, gb.lora_k, dhmod1);
        project_backward(bc.hmod1, b.wv, b.lora_v, lora_scale, dv, gb.wv, gb.bv, gb.lora_v, dhmod1);

        dmvec.segment(0, w) = col_sums(dhmod1);
        dmvec.segment(w, w) = gate_grad(dhmod1, bc.n1);
        MatX<S> dn1 = dhmod1.array().rowwise() * (scale1.array() + S(1)).transpose();
        dx.noalias() += layernorm_backward(dn1, bc.n1, bc.rstd1);

        gb.wmod.noalias() += dmvec * cache.ht.transpose();
        gb.bmod.noalias() += dmvec;
        dht.noalias() += b.wmod.transpose() * dmvec;
    }

    // Patch embeddings.
    for (const auto& part : seq.parts) {
        const auto dpart = dx.middleRows(part.offset, part.grid.token_count());
        if (part.grid.condition_id == 1) {
            grads.embed_slot1.noalias() += dpart.transpose() * part.patches;
            grads.embed_slot1_b.noalias() += col_sums(MatX<S>(dpart));
        } else {
            grads.embed_img.noalias() += dpart.transpose() * part.patches;
            grads.embed_img_b.noalias() += col_sums(MatX<S>(dpart));
        }
    }

    // Time MLP.
    VecX<S> dht_pre =
        dht.array() * cache.ht_pre.unaryExpr([](S x) { return silu_grad(x); }).array();
    grads.time_w2.noalias() += dht_pre * cache.th1.transpose();
    grads.time_b2.noalias() += dht_pre;
    VecX<S> dth1 = p.time_w2.transpose() * dht_pre;
    VecX<S> dth1_pre =
        dth1.array() * cache.th1_pre.unaryExpr([](S x) { return silu_grad(x); }).array();
    grads.time_w1.noalias() += dth1_pre * cache.time_feats.transpose();
    grads.time_b1.noalias() += dth1_pre;
}

// ---------------------------------------------------------------------------

template <typename S>
template <typename T>
ModelParams<T> ModelParams<S>::cast() const {
    ModelParams<T> out;
    out.config = config;
    out.embed_img = embed_img.template cast<T>();
    out.embed_img_b = embed_img_b.template cast<T>();
    out.embed_slot1 = embed_slot1.template cast<T>();
    out.embed_slot1_b = embed_slot1_b.template cast<T>();
    out.time_w1 = time_w1.template cast<T>();
    out.time_b1 = time_b1.template cast<T>();
    out.time_w2 = time_w2.template cast<T>();
    out.time_b2 = time_b2.template cast<T>();
    out.final_mod_w = final_mod_w.template cast<T>();
    out.final_mod_b = final_mod_b.template cast<T>();
    out.unembed = unembed.template cast<T>();
    out.unembed_b = unembed_b.template cast<T>();
    out.blocks.resize(blocks.size());
    for (size_t i = 0; i < blocks.size(); ++i) {
        const auto& b = blocks[i];
        auto& ob = out.blocks[i];
        ob.wq = b.wq.template cast<T>();
        ob.wk = b.wk.template cast<T>();
        ob.wv = b.wv.template cast<T>();
        ob.wo = b.wo.template cast<T>();
        ob.bq = b.bq.template cast<T>();
        ob.bk = b.bk.template cast<T>();
        ob.bv = b.bv.template cast<T>();
        ob.bo = b.bo.template cast<T>();
        ob.w1 = b.w1.template cast<T>();
        ob.b1 = b.b1.template cast<T>();
        ob.w2 = b.w2.template cast<T>();
        ob.b2 = b.b2.template cast<T>();
        ob.wmod = b.wmod.template cast<T>();
        ob.bmod = b.bmod.template cast<T>();
        auto cl = [](const std::optional<LoraPair<S>>& l) -> std::optional<LoraPair<T>> {
            if (!l) return std::nullopt;
            return LoraPair<T>{l->a.template cast<T>(), l->b.template cast<T>()};
        };
        ob.lora_q = cl(b.lora_q);
        ob.lora_k = cl(b.lora_k);
        ob.lora_v = cl(b.lora_v);
        ob.lora_o = cl(b.lora_o);
    }
    return out;
}

// Explicit instantiations.

template struct ModelParams<float>;
template struct ModelParams<double>;
template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;
template ModelParams<double> ModelParams<double>::cast<double>() const;

#define TRYFLOW_INSTANTIATE(S)                                                                   \
    template ModelParams<S> init_model<S>(const ModelConfig&, Rng&);                            \
    template ModelParams<S> zeros_like<S>(const ModelParams<S>&);                               \
    template void randomize_all<S>(ModelParams<S>&, Rng&, double);                              \
    template void visit_tensors<S>(ModelParams<S>&, const TensorVisitor<S>&);                   \
    template size_t parameter_count<S>(const ModelParams<S>&);                                  \
    template void attach_lora<S>(ModelParams<S>&, const std::vector<std::string>&, Rng&);       \
    template void merge_lora<S>(ModelParams<S>&);                                               \
    template MatX<S> extract_patches<S>(const Image&, int);                                     \
    template MatX<S> embed_patches<S>(const MatX<S>&, const MatX<S>&, const VecX<S>&);          \
    template MatX<S> patchify<S>(const Image&, int, const MatX<S>&, const VecX<S>&);            \
    template Image patches_to_image<S>(const MatX<S>&, int, int, int, int);                     \
    template TokenSeq<S> build_sequence<S>(const ModelParams<S>&, const Image&,                 \
                                           const std::vector<ConditionImage>&);                 \
    template MatX<S> dit_forward<S>(const ModelParams<S>&, const TokenSeq<S>&, double,          \
                                    ForwardCache<S>*);                                          \
    template void dit_backward<S>(const ModelParams<S>&, const TokenSeq<S>&, double,            \
                                  const ForwardCache<S>&, const MatX<S>&, ModelParams<S>&);

TRYFLOW_INSTANTIATE(float)
TRYFLOW_INSTANTIATE(double)

#undef TRYFLOW_INSTANTIATE

}  // namespace tryflow
