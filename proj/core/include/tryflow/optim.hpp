#pragma once

#include <vector>

#include "tryflow/model.hpp"

namespace tryflow {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// One AdamW update on a raw parameter array with bias-corrected moments.
// `decay` toggles the decoupled weight-decay term (off for bias vectors).
template <typename S>
void adamw_update(S* param, const S* grad, S* m, S* v, long n, const AdamWConfig& cfg, long step,
                  bool decay);

// Optimizer over a model's tensors, aligned with visit_tensors order.
// When `lora_only` is set (the default once adapters are attached) base
// weights stay frozen and only LoRA tensors update.
template <typename S>
class AdamW {
public:
    AdamW(ModelParams<S>& shape, AdamWConfig cfg);
    AdamW(ModelParams<S>& shape, AdamWConfig cfg, bool lora_only);

    void step(ModelParams<S>& params, ModelParams<S>& grads);

    long step_count() const { return t_; }
    void set_step_count(long t) { t_ = t; }
    bool lora_only() const { return lora_only_; }

private:
    AdamWConfig cfg_;
    bool lora_only_ = false;
    long t_ = 0;
    std::vector<VecX<S>> m_, v_;
};

}  // namespace tryflow
