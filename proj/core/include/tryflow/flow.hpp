#pragma once

#include <Eigen/Core>
#include <functional>
#include <vector>

#include "tryflow/image.hpp"
#include "tryflow/model.hpp"
#include "tryflow/rng.hpp"

namespace tryflow {

// Linear interpolant x_t = (1 - t) * x_data + t * noise.
Image interpolate(const Image& x_data, const Image& noise, double t);

Image gaussian_image(int height, int width, int channels, Rng& rng);

struct SamplerConfig {
    int steps = 50;
    // Optional explicit t-grid from 1 to 0 (strictly decreasing, endpoints
    // exactly 1 and 0). Empty means a uniform grid with `steps` steps.
    std::vector<double> schedule;

    std::vector<double> grid() const;  // resolved + validated
};

// Fixed-grid Euler walk of the probability-flow ODE. The grid runs from
// t = 1 down to t = 0 and each update is x += (t_k - t_{k+1}) * field(x, t_k),
// the exact inverse of the training interpolant's velocity convention.
using VectorField = std::function<Eigen::VectorXd(const Eigen::VectorXd&, double)>;
Eigen::VectorXd euler_integrate(const VectorField& field, Eigen::VectorXd x,
                                const std::vector<double>& grid);

// One training sample: target image plus its conditioning images.
struct TrainItem {
    Image target;
    std::vector<ConditionImage> conditions;
};

struct FlowBatch {
    std::vector<TrainItem> items;
    std::vector<Image> noise;  // same shape as the matching target
    std::vector<double> t;     // drawn from U(0,1)
};

// Draws noise and t for the given items.
FlowBatch make_flow_batch(std::vector<TrainItem> items, Rng& rng);

template <typename S>
struct LossResult {
    double loss = 0;
    ModelParams<S> grads;
};

// Conditional flow-matching objective: mean over batch and elements of
// ||v(x_t, y, t) - (x_data - noise)||^2, with parameter gradients.
template <typename S>
LossResult<S> fm_loss(const ModelParams<S>& params, const FlowBatch& batch);

template <typename S>
double fm_loss_value(const ModelParams<S>& params, const FlowBatch& batch);

// Euler sampling of a try-on image from Gaussian noise at t=1, conditioned on
// the given images. Throws with the offending step index when the state goes
// non-finite; the result is clipped to [0,1].
template <typename S>
Image sample_ode(const ModelParams<S>& params, const std::vector<ConditionImage>& conditions,
                 int target_height, int target_width, const SamplerConfig& cfg, Rng& rng);

}  // namespace tryflow
