#include "tryflow/flow.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace tryflow {

Image interpolate(const Image& x_data, const Image& noise, double t) {
    if (!x_data.same_shape(noise))
        throw std::invalid_argument("interpolate: shape mismatch between data and noise");
    if (!(t >= 0.0 && t <= 1.0))
        throw std::invalid_argument("interpolate: t must lie in [0,1], got " + std::to_string(t));
    Image out = x_data;
    const float tf = static_cast<float>(t);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = (1.0f - tf) * x_data.data[i] + tf * noise.data[i];
    return out;
}

Image gaussian_image(int height, int width, int channels, Rng& rng) {
    Image img(height, width, channels);
    for (float& v : img.data) v = static_cast<float>(rng.normal());
    return img;
}

std::vector<double> SamplerConfig::grid() const {
    std::vector<double> g;
    if (schedule.empty()) {
        if (steps < 1) throw std::invalid_argument("SamplerConfig: steps must be >= 1");
        g.reserve(static_cast<size_t>(steps) + 1);
        for (int k = 0; k <= steps; ++k)
            g.push_back(1.0 - static_cast<double>(k) / steps);
        g.back() = 0.0;
    } else {
        g = schedule;
    }
    if (g.size() < 2 || g.front() != 1.0 || g.back() != 0.0)
        throw std::invalid_argument("SamplerConfig: schedule endpoints must be exactly 1 and 0");
    for (size_t i = 1; i < g.size(); ++i)
        if (!(g[i] < g[i - 1]))
            throw std::invalid_argument("SamplerConfig: schedule must be strictly decreasing");
    return g;
}

Eigen::VectorXd euler_integrate(const VectorField& field, Eigen::VectorXd x,
                                const std::vector<double>& grid) {
    for (size_t k = 0; k + 1 < grid.size(); ++k) {
        const double dt = grid[k] - grid[k + 1];
        x += dt * field(x, grid[k]);
        if (!x.allFinite())
            throw std::runtime_error("euler_integrate: non-finite state at step " +
                                     std::to_string(k));
    }
    return x;
}

FlowBatch make_flow_batch(std::vector<TrainItem> items, Rng& rng) {
    FlowBatch batch;
    batch.items = std::move(items);
    batch.noise.reserve(batch.items.size());
    batch.t.reserve(batch.items.size());
    for (const auto& item : batch.items) {
        batch.noise.push_back(
            gaussian_image(item.target.height, item.target.width, item.target.channels, rng));
        batch.t.push_back(rng.uniform());
    }
    return batch;
}

namespace {

void check_batch(const FlowBatch& batch) {
    if (batch.items.empty()) throw std::invalid_argument("fm_loss: empty batch");
    if (batch.noise.size() != batch.items.size() || batch.t.size() != batch.items.size())
        throw std::invalid_argument("fm_loss: batch arrays out of sync");
    for (size_t i = 0; i < batch.items.size(); ++i) {
        if (!batch.items[i].target.same_shape(batch.noise[i]))
            throw std::invalid_argument("fm_loss: noise shape mismatch at item " + std::to_string(i));
        if (!std::isfinite(batch.t[i]))
            throw std::invalid_argument("fm_loss: non-finite t at item " + std::to_string(i));
        if (has_non_finite(batch.items[i].target) || has_non_finite(batch.noise[i]))
            throw std::invalid_argument("fm_loss: non-finite values in item " + std::to_string(i));
        for (const auto& c : batch.items[i].conditions)
            if (has_non_finite(c.image))
                throw std::invalid_argument("fm_loss: non-finite condition in item " +
                                            std::to_string(i));
    }
}

template <typename S>
double fm_loss_impl(const ModelParams<S>& params, const FlowBatch& batch,
                    ModelParams<S>* grads) {
    check_batch(batch);
    const double b = static_cast<double>(batch.items.size());
    double loss = 0;
    for (size_t i = 0; i < batch.items.size(); ++i) {
        const auto& item = batch.items[i];
        const double t = batch.t[i];
        const Image x_t = interpolate(item.target, batch.noise[i], t);
        TokenSeq<S> seq = build_sequence(params, x_t, item.conditions);
        ForwardCache<S> cache;
        MatX<S> v = dit_forward(params, seq, t, &cache);
        MatX<S> target_v = extract_patches<S>(item.target, params.config.patch_size) -
                           extract_patches<S>(batch.noise[i], params.config.patch_size);
        MatX<S> r = v - target_v;
        const double elems = static_cast<double>(r.rows() * r.cols());
        loss += static_cast<double>(r.squaredNorm()) / (b * elems);
        if (grads) {
            MatX<S> d_out = r * static_cast<S>(2.0 / (b * elems));
            dit_backward(params, seq, t, cache, d_out, *grads);
        }
    }
    return loss;
}

}  // namespace

template <typename S>
LossResult<S> fm_loss(const ModelParams<S>& params, const FlowBatch& batch) {
    LossResult<S> out;
    out.grads = zeros_like(params);
    out.loss = fm_loss_impl(params, batch, &out.grads);
    return out;
}

template <typename S>
double fm_loss_value(const ModelParams<S>& params, const FlowBatch& batch) {
    return fm_loss_impl<S>(params, batch, nullptr);
}

template <typename S>
Image sample_ode(const ModelParams<S>& params, const std::vector<ConditionImage>& conditions,
                 int target_height, int target_width, const SamplerConfig& cfg, Rng& rng) {
    const std::vector<double> grid = cfg.grid();
    Image x = gaussian_image(target_height, target_width, params.config.image_channels, rng);
    const int ps = params.config.patch_size;
    const int gr = target_height / ps;
    const int gc = target_width / ps;
    for (size_t k = 0; k + 1 < grid.size(); ++k) {
        const double t = grid[k];
        const double dt = grid[k] - grid[k + 1];
        TokenSeq<S> seq = build_sequence(params, x, conditions);
        MatX<S> v = dit_forward<S>(params, seq, t, nullptr);
        Image v_img = patches_to_image(v, gr, gc, ps, params.config.image_channels);
        for (size_t j = 0; j < x.data.size(); ++j)
            x.data[j] += static_cast<float>(dt) * v_img.data[j];
        if (has_non_finite(x))
            throw std::runtime_error("sample_ode: non-finite state after step " + std::to_string(k));
    }
    return clamp01(std::move(x));
}

template LossResult<float> fm_loss<float>(const ModelParams<float>&, const FlowBatch&);
template LossResult<double> fm_loss<double>(const ModelParams<double>&, const FlowBatch&);
template double fm_loss_value<float>(const ModelParams<float>&, const FlowBatch&);
template double fm_loss_value<double>(const ModelParams<double>&, const FlowBatch&);
template Image sample_ode<float>(const ModelParams<float>&, const std::vector<ConditionImage>&,
                                 int, int, const SamplerConfig&, Rng&);
template Image sample_ode<double>(const ModelParams<double>&, const std::vector<ConditionImage>&,
                                  int, int, const SamplerConfig&, Rng&);

}  // namespace tryflow
