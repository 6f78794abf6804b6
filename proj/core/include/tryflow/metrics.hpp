#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <string>
#include <vector>

#include "tryflow/image.hpp"

namespace tryflow {

// Mean local SSIM over an 11x11 Gaussian window (sigma 1.5, K1=0.01,
// K2=0.03, dynamic range 1). RGB inputs are converted to grayscale. Windows
// are clipped and renormalized at the borders.
double ssim(const Image& a, const Image& b);

// Per-pixel local SSIM map (1 channel).
Image ssim_map(const Image& a, const Image& b);

// Mean of the SSIM map over a pixel region.
double ssim_region(const Image& a, const Image& b, const Rect& region);

struct GaussianStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;  // unbiased
    long n = 0;
};

struct FeatureSet {
    Eigen::MatrixXd features;  // n x d
    std::string extractor_id;
};

GaussianStats fit_gaussian(const FeatureSet& f);

// Squared Frechet distance between Gaussians:
// ||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), with the matrix square root
// taken through symmetric eigendecompositions and negative eigenvalues
// clipped at zero.
double fid(const GaussianStats& s1, const GaussianStats& s2);

// Unbiased squared MMD with the polynomial kernel k(x,y) = (x.y/d + 1)^3;
// diagonal terms excluded from the within-set sums. Reported raw (not x1000).
double kid(const FeatureSet& f1, const FeatureSet& f2);

double kid_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& y);

// Fixed seeded random convolution stack: three stride-2 3x3 layers with tanh,
// channels 3 -> 16 -> 32 -> 64, global average pooled to a 64-d feature.
// Weight-free in the sense that nothing is learned; the seed pins everything.
class ConvFeatureExtractor {
public:
    explicit ConvFeatureExtractor(uint64_t seed = 0x600dfeed, int out_channels = 64);

    Eigen::VectorXd extract(const Image& img) const;
    FeatureSet extract_set(const std::vector<Image>& images) const;

    // Per-layer activation maps (channels x positions), for perceptual distance.
    std::vector<Eigen::MatrixXd> feature_maps(const Image& img) const;

    const std::string& id() const { return id_; }
    int dim() const { return out_channels_; }

private:
    struct Layer {
        std::vector<Eigen::MatrixXd> kernels;  // out_ch entries of (in_ch x 9)
        Eigen::VectorXd bias;
    };
    std::vector<Layer> layers_;
    int out_channels_;
    std::string id_;
};

// LPIPS-style distance with a pluggable extractor: per layer, channel vectors
// at each position are unit-normalized and compared by mean squared distance,
// then averaged across layers.
double perceptual_distance(const Image& a, const Image& b, const ConvFeatureExtractor& extractor);

struct MetricRow {
    std::string metric;
    std::string protocol;  // "paired" | "unpaired"
    std::string mode;      // "mask" | "mask+ref" | "mf" | "mf+ref"
    double value = 0;
};

struct MetricReport {
    std::vector<MetricRow> rows;

    void add(const std::string& metric, const std::string& protocol, const std::string& mode,
             double value);
    const MetricRow* find(const std::string& metric, const std::string& mode) const;
    std::string to_table() const;
    void save(const std::filesystem::path& path) const;
    static MetricReport load(const std::filesystem::path& path);
};

}  // namespace tryflow
