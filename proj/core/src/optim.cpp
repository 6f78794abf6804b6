#include "tryflow/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace tryflow {

template <typename S>
void adamw_update(S* param, const S* grad, S* m, S* v, long n, const AdamWConfig& cfg, long step,
                  bool decay) {
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (long i = 0; i < n; ++i) {
        const double g = static_cast<double>(grad[i]);
        const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * g;
        const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * g * g;
        m[i] = static_cast<S>(mi);
        v[i] = static_cast<S>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        double update = mhat / (std::sqrt(vhat) + cfg.eps);
        if (decay) update += cfg.weight_decay * static_cast<double>(param[i]);
        param[i] = static_cast<S>(static_cast<double>(param[i]) - cfg.lr * update);
    }
}

template <typename S>
AdamW<S>::AdamW(ModelParams<S>& shape, AdamWConfig cfg) : AdamW(shape, cfg, shape.has_lora()) {}

template <typename S>
AdamW<S>::AdamW(ModelParams<S>& shape, AdamWConfig cfg, bool lora_only)
    : cfg_(cfg), lora_only_(lora_only) {
    visit_tensors<S>(shape, [&](const std::string&, S*, Eigen::Index rows, Eigen::Index cols) {
        m_.push_back(VecX<S>::Zero(rows * cols));
        v_.push_back(VecX<S>::Zero(rows * cols));
    });
}

template <typename S>
void AdamW<S>::step(ModelParams<S>& params, ModelParams<S>& grads) {
    ++t_;
    size_t slot = 0;
    std::vector<std::pair<S*, std::pair<Eigen::Index, Eigen::Index>>> ptargets;
    std::vector<std::string> names;
    visit_tensors<S>(params, [&](const std::string& name, S* data, Eigen::Index r, Eigen::Index c) {
        ptargets.push_back({data, {r, c}});
        names.push_back(name);
    });
    visit_tensors<S>(grads, [&](const std::string& name, S* gdata, Eigen::Index r, Eigen::Index c) {
        if (slot >= ptargets.size() || names[slot] != name ||
            ptargets[slot].second != std::make_pair(r, c))
            throw std::invalid_argument("AdamW::step: gradient layout mismatch at " + name);
        if (slot >= m_.size()) throw std::invalid_argument("AdamW::step: optimizer state mismatch");
        const bool is_lora = name.find(".lora_") != std::string::npos;
        if (!lora_only_ || is_lora) {
            // Weight decay only on matrices; bias vectors are exempt.
            const bool decay = c > 1;
            adamw_update(ptargets[slot].first, gdata, m_[slot].data(), v_[slot].data(), r * c,
                         cfg_, t_, decay);
        }
        ++slot;
    });
    if (slot != m_.size()) throw std::invalid_argument("AdamW::step: tensor count changed");
}

template void adamw_update<float>(float*, const float*, float*, float*, long, const AdamWConfig&,
                                  long, bool);
template void adamw_update<double>(double*, const double*, double*, double*, long,
                                   const AdamWConfig&, long, bool);
template class AdamW<float>;
template class AdamW<double>;

}  // namespace tryflow
