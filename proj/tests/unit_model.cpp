#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "tryflow/flow.hpp"
#include "tryflow/model.hpp"
#include "tryflow/rng.hpp"

using namespace tryflow;

namespace {

Image random_image(int h, int w, int c, Rng& rng) {
    Image img(h, w, c);
    for (float& v : img.data) v = static_cast<float>(rng.uniform());
    return img;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.patch_size = 2;
    cfg.width = 12;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.time_embed_dim = 8;
    return cfg;
}

std::vector<ConditionImage> tiny_conditions(Rng& rng) {
    std::vector<ConditionImage> conds;
    conds.push_back({random_image(4, 4, 6, rng), 1});
    conds.push_back({random_image(4, 4, 3, rng), 2});
    return conds;
}

// ---------------------------------------------------------------------------
// Straight-line scalar re-implementation of the whole forward pass.

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // rows of doubles

Mat to_rows(const MatX<double>& m) {
    Mat out(static_cast<size_t>(m.rows()), Vec(static_cast<size_t>(m.cols())));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            out[static_cast<size_t>(i)][static_cast<size_t>(j)] = m(i, j);
    return out;
}

Vec matvec(const MatX<double>& w, const Vec& x, const VecX<double>& b) {
    Vec y(static_cast<size_t>(w.rows()));
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
        double acc = b(i);
        for (Eigen::Index j = 0; j < w.cols(); ++j) acc += w(i, j) * x[static_cast<size_t>(j)];
        y[static_cast<size_t>(i)] = acc;
    }
    return y;
}

double silu_s(double x) { return x / (1.0 + std::exp(-x)); }
double gelu_s(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

Vec layernorm_s(const Vec& x) {
    double mean = 0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double var = 0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x.size());
    const double rstd = 1.0 / std::sqrt(var + 1e-6);
    Vec out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * rstd;
    return out;
}

Mat scalar_forward(const ModelParams<double>& p, const TokenSeq<double>& seq, double t) {
    const ModelConfig& cfg = p.config;
    const int w = cfg.width;
    const int dh = cfg.head_dim();
    const int axis_dim = cfg.rope_axis_dim();
    const size_t L = static_cast<size_t>(seq.tokens.rows());
    const size_t L0 = static_cast<size_t>(seq.parts[0].grid.token_count());

    // Time features and MLP.
    Vec feats(static_cast<size_t>(cfg.time_embed_dim));
    const int half = cfg.time_embed_dim / 2;
    for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * k / half);
        feats[static_cast<size_t>(2 * k)] = std::cos(1000.0 * t * freq);
        feats[static_cast<size_t>(2 * k + 1)] = std::sin(1000.0 * t * freq);
    }
    Vec th1 = matvec(p.time_w1, feats, p.time_b1);
    for (double& v : th1) v = silu_s(v);
    Vec ht = matvec(p.time_w2, th1, p.time_b2);
    for (double& v : ht) v = silu_s(v);

    Mat x = to_rows(seq.tokens);

    for (const auto& blk : p.blocks) {
        Vec mvec = matvec(blk.wmod, ht, blk.bmod);
        auto seg = [&](int s, size_t i) { return mvec[static_cast<size_t>(s * w) + i]; };

        // LN + modulation.
        Mat hmod(L, Vec(static_cast<size_t>(w)));
        for (size_t i = 0; i < L; ++i) {
            Vec n = layernorm_s(x[i]);
            for (size_t j = 0; j < static_cast<size_t>(w); ++j)
                hmod[i][j] = n[j] * (1.0 + seg(1, j)) + seg(0, j);
        }
        // Projections.
        Mat q(L), k(L), v(L);
        for (size_t i = 0; i < L; ++i) {
            q[i] = matvec(blk.wq, hmod[i], blk.bq);
            k[i] = matvec(blk.wk, hmod[i], blk.bk);
            v[i] = matvec(blk.wv, hmod[i], blk.bv);
        }
        // RoPE on q and k: per head, three axis blocks of adjacent pairs.
        RopeTable table = rope_table(axis_dim, cfg.rope_base);
        auto rope_row = [&](Vec& row, const PosEntry& e) {
            const double coords[3] = {static_cast<double>(e.id), e.row, e.col};
            for (int h = 0; h < cfg.heads; ++h)
                for (int axis = 0; axis < 3; ++axis)
                    for (int pr = 0; pr < axis_dim / 2; ++pr) {
                        const double a = coords[axis] * table.freqs[static_cast<size_t>(pr)];
                        const size_t o =
                            static_cast<size_t>(h * dh + axis * axis_dim + 2 * pr);
                        const double x0 = row[o], y0 = row[o + 1];
                        row[o] = std::cos(a) * x0 - std::sin(a) * y0;
                        row[o + 1] = std::sin(a) * x0 + std::cos(a) * y0;
                    }
        };
        for (size_t i = 0; i < L; ++i) {
            rope_row(q[i], seq.index[i]);
            rope_row(k[i], seq.index[i]);
        }
        // Attention per head.
        Mat attn(L, Vec(static_cast<size_t>(w), 0.0));
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        for (int h = 0; h < cfg.heads; ++h) {
            const size_t off = static_cast<size_t>(h * dh);
            for (size_t i = 0; i < L; ++i) {
                Vec scores(L);
                double mx = -1e300;
                for (size_t j = 0; j < L; ++j) {
                    double acc = 0;
                    for (int d = 0; d < dh; ++d)
                        acc += q[i][off + static_cast<size_t>(d)] *
                               k[j][off + static_cast<size_t>(d)];
                    scores[j] = acc * scale;
                    mx = std::max(mx, scores[j]);
                }
                double denom = 0;
                for (size_t j = 0; j < L; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    denom += scores[j];
                }
                for (size_t j = 0; j < L; ++j) {
                    const double prob = scores[j] / denom;
                    for (int d = 0; d < dh; ++d)
                        attn[i][off + static_cast<size_t>(d)] +=
                            prob * v[j][off + static_cast<size_t>(d)];
                }
            }
        }
        // Output projection, gate, residual.
        for (size_t i = 0; i < L; ++i) {
            Vec ao = matvec(blk.wo, attn[i], blk.bo);
            for (size_t j = 0; j < static_cast<size_t>(w); ++j) x[i][j] += seg(2, j) * ao[j];
        }
        // MLP branch.
        for (size_t i = 0; i < L; ++i) {
            Vec n = layernorm_s(x[i]);
            Vec hm(static_cast<size_t>(w));
            for (size_t j = 0; j < static_cast<size_t>(w); ++j)
                hm[j] = n[j] * (1.0 + seg(4, j)) + seg(3, j);
            Vec pre = matvec(blk.w1, hm, blk.b1);
            for (double& u : pre) u = gelu_s(u);
            Vec out = matvec(blk.w2, pre, blk.b2);
            for (size_t j = 0; j < static_cast<size_t>(w); ++j) x[i][j] += seg(5, j) * out[j];
        }
    }

    // Final modulated layernorm + unembed over the id-0 rows.
    Vec fvec = matvec(p.final_mod_w, ht, p.final_mod_b);
    Mat out(L0);
    for (size_t i = 0; i < L0; ++i) {
        Vec n = layernorm_s(x[i]);
        Vec fm(static_cast<size_t>(w));
        for (size_t j = 0; j < static_cast<size_t>(w); ++j)
            fm[j] = n[j] * (1.0 + fvec[static_cast<size_t>(w) + j]) + fvec[j];
        out[i] = matvec(p.unembed, fm, p.unembed_b);
    }
    return out;
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.width = 13;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);  // not divisible by heads
    cfg = tiny_config();
    cfg.heads = 3;  // head_dim 4 < 6
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_config();
    cfg.lora_rank = 20;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    // width 32 / heads 4 -> head_dim 8: partial rotary layout is legal.
    cfg = tiny_config();
    cfg.width = 32;
    cfg.heads = 4;
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.rope_axis_dim() == 2);
}

TEST_CASE("patchify token counts and identity embedding") {
    Rng rng(1);
    const Image img = random_image(4, 4, 3, rng);
    const MatX<float> patches = extract_patches<float>(img, 2);
    CHECK(patches.rows() == 4);
    CHECK(patches.cols() == 12);

    // Identity embedding on a single 2x2 patch returns the flattened patch.
    const Image one = random_image(2, 2, 3, rng);
    MatX<float> eye = MatX<float>::Identity(12, 12);
    VecX<float> zero = VecX<float>::Zero(12);
    const MatX<float> tok = patchify<float>(one, 2, eye, zero);
    REQUIRE(tok.rows() == 1);
    const MatX<float> expect = extract_patches<float>(one, 2);
    CHECK((tok - expect).cwiseAbs().maxCoeff() == 0.0f);

    CHECK_THROWS_AS(extract_patches<float>(random_image(5, 4, 3, rng), 2), std::invalid_argument);
}

TEST_CASE("patchify round-trips through the inverse arrangement") {
    Rng rng(2);
    const Image img = random_image(8, 8, 3, rng);
    const MatX<double> patches = extract_patches<double>(img, 2);
    const Image back = patches_to_image(patches, 4, 4, 2, 3);
    double max_err = 0;
    for (size_t i = 0; i < img.data.size(); ++i)
        max_err = std::max(max_err, static_cast<double>(std::fabs(img.data[i] - back.data[i])));
    CHECK(max_err <= 1e-12);
}

TEST_CASE("zero weights produce zero output") {
    Rng rng(3);
    ModelConfig cfg = tiny_config();
    ModelParams<double> p = init_model<double>(cfg, rng);
    ModelParams<double> z = zeros_like(p);
    z.config = cfg;
    const Image noisy = random_image(4, 4, 3, rng);
    auto conds = tiny_conditions(rng);
    const TokenSeq<double> seq = build_sequence(z, noisy, conds);
    const MatX<double> out = dit_forward<double>(z, seq, 0.3, nullptr);
    CHECK(out.rows() == 4);
    CHECK(out.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward requires exactly one id-0 block") {
    Rng rng(4);
    ModelConfig cfg = tiny_config();
    ModelParams<double> p = init_model<double>(cfg, rng);
    const Image noisy = random_image(4, 4, 3, rng);
    TokenSeq<double> seq = build_sequence(p, noisy, tiny_conditions(rng));
    seq.parts[0].grid.condition_id = 2;  // corrupt the block structure
    CHECK_THROWS_AS(dit_forward<double>(p, seq, 0.5, nullptr), std::invalid_argument);
}

TEST_CASE("condition blocks may be permuted when the index moves with them") {
    Rng rng(5);
    ModelConfig cfg = tiny_config();
    ModelParams<double> p = init_model<double>(cfg, rng);
    randomize_all(p, rng);
    const Image noisy = random_image(4, 4, 3, rng);
    const Image cloth = random_image(4, 4, 3, rng);
    const Image ref = random_image(8, 8, 3, rng);

    std::vector<ConditionImage> order1 = {{cloth, 2}, {ref, 3}};
    std::vector<ConditionImage> order2 = {{ref, 3}, {cloth, 2}};
    const MatX<double> out1 =
        dit_forward<double>(p, build_sequence(p, noisy, order1), 0.4, nullptr);
    const MatX<double> out2 =
        dit_forward<double>(p, build_sequence(p, noisy, order2), 0.4, nullptr);
    CHECK((out1 - out2).cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("velocity output shape is fixed by the id-0 block for any condition subset") {
    Rng rng(6);
    ModelConfig cfg = tiny_config();
    ModelParams<double> p = init_model<double>(cfg, rng);
    const Image noisy = random_image(4, 4, 3, rng);
    const Image slot1 = random_image(4, 4, 6, rng);
    const Image cloth = random_image(4, 4, 3, rng);
    const Image ref = random_image(4, 4, 3, rng);

    const std::vector<std::vector<ConditionImage>> subsets = {
        {},
        {{slot1, 1}},
        {{cloth, 2}},
        {{ref, 3}},
        {{slot1, 1}, {cloth, 2}},
        {{slot1, 1}, {cloth, 2}, {ref, 3}},
    };
    for (const auto& conds : subsets) {
        const MatX<double> out = dit_forward<double>(p, build_sequence(p, noisy, conds), 0.7, nullptr);
        CHECK(out.rows() == 4);
        CHECK(out.cols() == cfg.patch_dim());
    }
}

TEST_CASE("forward matches the straight-line scalar oracle") {
    Rng rng(7);
    ModelConfig cfg = tiny_config();
    ModelParams<double> p = init_model<double>(cfg, rng);
    randomize_all(p, rng, 0.4);
    const Image noisy = random_image(4, 4, 3, rng);
    const TokenSeq<double> seq = build_sequence(p, noisy, tiny_conditions(rng));
    const MatX<double> out = dit_forward<double>(p, seq, 0.37, nullptr);
    const Mat oracle = scalar_forward(p, seq, 0.37);
    REQUIRE(out.rows() == static_cast<Eigen::Index>(oracle.size()));
    double max_err = 0;
    for (Eigen::Index i = 0; i < out.rows(); ++i)
        for (Eigen::Index j = 0; j < out.cols(); ++j)
            max_err = std::max(max_err, std::fabs(out(i, j) -
                                                  oracle[static_cast<size_t>(i)][static_cast<size_t>(j)]));
    CHECK(max_err <= 1e-10);
}

TEST_CASE("forward determinism is bit-exact") {
    Rng rng(8);
    ModelConfig cfg = tiny_config();
    ModelParams<float> p = init_model<float>(cfg, rng);
    randomize_all(p, rng);
    const Image noisy = random_image(4, 4, 3, rng);
    auto conds = tiny_conditions(rng);
    const TokenSeq<float> seq = build_sequence(p, noisy, conds);
    const MatX<float> a = dit_forward<float>(p, seq, 0.9, nullptr);
    const MatX<float> b = dit_forward<float>(p, seq, 0.9, nullptr);
    CHECK((a.array() == b.array()).all());
}

// ---------------------------------------------------------------------------
// Gradient checks (a faster version of the acceptance criterion).

TEST_CASE("analytic gradients match central finite differences") {
    Rng rng(9);
    ModelConfig cfg = tiny_config();
    ModelParams<double> p = init_model<double>(cfg, rng);
    randomize_all(p, rng, 0.3);

    std::vector<TrainItem> items;
    for (int b = 0; b < 2; ++b) {
        TrainItem item;
        item.target = random_image(4, 4, 3, rng);
        item.conditions = tiny_conditions(rng);
        items.push_back(std::move(item));
    }
    Rng brm(10);
    FlowBatch batch = make_flow_batch(std::move(items), brm);

    LossResult<double> res = fm_loss(p, batch);

    struct Slot {
        double* ptr;
        double* gptr;
    };
    std::vector<Slot> slots;
    {
        std::vector<std::pair<double*, long>> ptensors, gtensors;
        visit_tensors<double>(p, [&](const std::string&, double* d, Eigen::Index r, Eigen::Index c) {
            ptensors.push_back({d, r * c});
        });
        visit_tensors<double>(res.grads,
                              [&](const std::string&, double* d, Eigen::Index r, Eigen::Index c) {
                                  gtensors.push_back({d, r * c});
                              });
        for (size_t t = 0; t < ptensors.size(); ++t)
            for (long i = 0; i < ptensors[t].second; ++i)
                slots.push_back({ptensors[t].first + i, gtensors[t].first + i});
    }

    Rng pick(11);
    const double h = 1e-5;
    double worst = 0;
    for (int trial = 0; trial < 60; ++trial) {
        Slot s = slots[static_cast<size_t>(pick.uniform_int(static_cast<int>(slots.size())))];
        const double orig = *s.ptr;
        *s.ptr = orig + h;
        const double lp = fm_loss_value(p, batch);
        *s.ptr = orig - h;
        const double lm = fm_loss_value(p, batch);
        *s.ptr = orig;
        const double numeric = (lp - lm) / (2 * h);
        const double analytic = *s.gptr;
        const double rel =
            std::fabs(numeric - analytic) / std::max({1e-4, std::fabs(numeric), std::fabs(analytic)});
        worst = std::max(worst, rel);
    }
    CHECK(worst <= 1e-4);
}

// ---------------------------------------------------------------------------
// LoRA

TEST_CASE("lora attach keeps the forward bit-identical") {
    Rng rng(12);
    ModelConfig cfg = tiny_config();
    cfg.lora_rank = 4;
    ModelParams<float> p = init_model<float>(cfg, rng);
    randomize_all(p, rng);
    const Image noisy = random_image(4, 4, 3, rng);
    auto conds = tiny_conditions(rng);
    const MatX<float> before = dit_forward<float>(p, build_sequence(p, noisy, conds), 0.5, nullptr);

    Rng lrng(13);
    attach_lora(p, {"q", "k", "v", "out"}, lrng);
    const MatX<float> after = dit_forward<float>(p, build_sequence(p, noisy, conds), 0.5, nullptr);
    CHECK((before.array() == after.array()).all());

    CHECK_THROWS_AS(attach_lora(p, {"q"}, lrng), std::runtime_error);  // already attached
    ModelParams<float> q = init_model<float>(cfg, rng);
    CHECK_THROWS_AS(attach_lora(q, {"query"}, lrng), std::invalid_argument);
    ModelParams<float> r0 = init_model<float>(cfg, rng);
    r0.config.lora_rank = 0;
    CHECK_THROWS_AS(attach_lora(r0, {"q"}, lrng), std::invalid_argument);
}

TEST_CASE("full-rank adapter can represent any additive update") {
    Rng rng(14);
    const int n = 12;
    MatX<double> delta(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) delta(i, j) = rng.normal();
    // rank = width: solve B from a random full-rank A by least squares.
    MatX<double> a(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) a(i, j) = rng.normal();
    const double scale = 16.0 / n;  // alpha / rank
    // minimize || scale * B * A - delta ||  ->  B = delta * pinv(A) / scale
    MatX<double> b = (a.transpose().colPivHouseholderQr().solve(delta.transpose())).transpose() / scale;
    const double residual = (scale * b * a - delta).norm();
    CHECK(residual <= 1e-8);
}

TEST_CASE("adapter contribution scales linearly with alpha on a linear layer") {
    Rng rng(15);
    const int n = 8, r = 3;
    MatX<double> w(n, n), a(r, n), b(n, r);
    VecX<double> x(n);
    for (int i = 0; i < n; ++i) {
        x(i) = rng.normal();
        for (int j = 0; j < n; ++j) w(i, j) = rng.normal();
    }
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < n; ++j) a(i, j) = rng.normal();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < r; ++j) b(i, j) = rng.normal();
    auto out = [&](double alpha) {
        return (w * x + (alpha / r) * (b * (a * x))).eval();
    };
    const VecX<double> base = w * x;
    const VecX<double> d1 = out(16.0) - base;
    const VecX<double> d2 = out(32.0) - base;
    CHECK((d2 - 2.0 * d1).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("merge folds adapters and clears the slots") {
    Rng rng(16);
    ModelConfig cfg = tiny_config();
    cfg.lora_rank = 4;
    ModelParams<float> p = init_model<float>(cfg, rng);
    randomize_all(p, rng);
    Rng lrng(17);
    attach_lora(p, {"q", "k", "v", "out"}, lrng);
    // Give the adapters non-zero B so the merge is non-trivial.
    for (auto& blk : p.blocks) {
        for (auto* l : {&blk.lora_q, &blk.lora_k, &blk.lora_v, &blk.lora_o})
            for (Eigen::Index i = 0; i < (*l)->b.size(); ++i)
                (*l)->b.data()[i] = static_cast<float>(lrng.normal(0.0, 0.05));
    }
    const Image noisy = random_image(4, 4, 3, rng);
    auto conds = tiny_conditions(rng);
    const MatX<float> adapted = dit_forward<float>(p, build_sequence(p, noisy, conds), 0.2, nullptr);

    ModelParams<float> merged = p;
    merge_lora(merged);
    CHECK_FALSE(merged.has_lora());
    const MatX<float> out =
        dit_forward<float>(merged, build_sequence(merged, noisy, conds), 0.2, nullptr);
    CHECK((out - adapted).cwiseAbs().maxCoeff() <= 1e-5);

    CHECK_THROWS_AS(merge_lora(merged), std::runtime_error);  // slots already cleared
}

TEST_CASE("merging zero-B adapters is a no-op on the weights") {
    Rng rng(18);
    ModelConfig cfg = tiny_config();
    cfg.lora_rank = 4;
    ModelParams<float> p = init_model<float>(cfg, rng);
    const MatX<float> wq_before = p.blocks[0].wq;
    Rng lrng(19);
    attach_lora(p, {"q"}, lrng);
    merge_lora(p);
    CHECK((p.blocks[0].wq.array() == wq_before.array()).all());
}
