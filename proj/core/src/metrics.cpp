#include "tryflow/metrics.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "tryflow/rng.hpp"

namespace tryflow {

namespace {

constexpr int kWin = 11;
constexpr int kHalf = kWin / 2;
constexpr double kSigma = 1.5;
constexpr double kK1 = 0.01;
constexpr double kK2 = 0.03;
constexpr double kC1 = (kK1 * 1.0) * (kK1 * 1.0);
constexpr double kC2 = (kK2 * 1.0) * (kK2 * 1.0);

const double* gaussian_kernel() {
    static double k[kWin];
    static bool ready = false;
    if (!ready) {
        double sum = 0;
        for (int i = 0; i < kWin; ++i) {
            const double d = i - kHalf;
            k[i] = std::exp(-d * d / (2 * kSigma * kSigma));
            sum += k[i];
        }
        for (int i = 0; i < kWin; ++i) k[i] /= sum;
        ready = true;
    }
    return k;
}

}  // namespace

Image ssim_map(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("ssim: shape mismatch");
    const Image ga = to_gray(a);
    const Image gb = to_gray(b);
    const int h = ga.height, w = ga.width;
    const double* kern = gaussian_kernel();
    Image map(h, w, 1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double sw = 0, ma = 0, mb = 0, va = 0, vb = 0, cab = 0;
            for (int dy = -kHalf; dy <= kHalf; ++dy) {
                const int yy = y + dy;
                if (yy < 0 || yy >= h) continue;
                for (int dx = -kHalf; dx <= kHalf; ++dx) {
                    const int xx = x + dx;
                    if (xx < 0 || xx >= w) continue;
                    const double wgt = kern[dy + kHalf] * kern[dx + kHalf];
                    const double pa = ga.at(yy, xx, 0);
                    const double pb = gb.at(yy, xx, 0);
                    sw += wgt;
                    ma += wgt * pa;
                    mb += wgt * pb;
                    va += wgt * pa * pa;
                    vb += wgt * pb * pb;
                    cab += wgt * pa * pb;
                }
            }
            ma /= sw;
            mb /= sw;
            va = va / sw - ma * ma;
            vb = vb / sw - mb * mb;
            cab = cab / sw - ma * mb;
            const double num = (2 * ma * mb + kC1) * (2 * cab + kC2);
            const double den = (ma * ma + mb * mb + kC1) * (va + vb + kC2);
            map.at(y, x, 0) = static_cast<float>(num / den);
        }
    return map;
}

double ssim(const Image& a, const Image& b) {
    const Image map = ssim_map(a, b);
    double sum = 0;
    for (float v : map.data) sum += v;
    return sum / static_cast<double>(map.data.size());
}

double ssim_region(const Image& a, const Image& b, const Rect& region) {
    const Image map = ssim_map(a, b);
    double sum = 0;
    long n = 0;
    for (int y = std::max(0, region.y0); y < std::min(map.height, region.y1); ++y)
        for (int x = std::max(0, region.x0); x < std::min(map.width, region.x1); ++x) {
            sum += map.at(y, x, 0);
            ++n;
        }
    if (n == 0) throw std::invalid_argument("ssim_region: empty region");
    return sum / static_cast<double>(n);
}

GaussianStats fit_gaussian(const FeatureSet& f) {
    const long n = f.features.rows();
    if (n < 2) throw std::invalid_argument("fit_gaussian: need at least 2 samples");
    GaussianStats s;
    s.n = n;
    s.mean = f.features.colwise().mean();
    Eigen::MatrixXd centered = f.features.rowwise() - s.mean.transpose();
    s.cov = centered.transpose() * centered / static_cast<double>(n - 1);
    return s;
}

namespace {

// Symmetric PSD square root via eigendecomposition with clipped eigenvalues.
Eigen::MatrixXd sym_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    Eigen::VectorXd lam = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double fid(const GaussianStats& s1, const GaussianStats& s2) {
    if (s1.mean.size() != s2.mean.size())
        throw std::invalid_argument("fid: feature dimensions differ");
    const Eigen::VectorXd dmu = s1.mean - s2.mean;
    // Tr((S1 S2)^{1/2}) computed through the symmetric product A S2 A with
    // A = S1^{1/2}; both decompositions clip negative eigenvalues at zero.
    const Eigen::MatrixXd a = sym_sqrt(s1.cov);
    Eigen::MatrixXd inner = a * s2.cov * a;
    inner = 0.5 * (inner + inner.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner);
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double result = dmu.squaredNorm() + s1.cov.trace() + s2.cov.trace() - 2.0 * tr_sqrt;
    if (!std::isfinite(result)) {
        std::ostringstream os;
        os << "fid: non-finite result (cov traces " << s1.cov.trace() << ", " << s2.cov.trace()
           << "; min product eigenvalue " << es.eigenvalues().minCoeff() << ")";
        throw std::runtime_error(os.str());
    }
    return result;
}

double kid_kernel(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    const double d = static_cast<double>(x.size());
    const double v = x.dot(y) / d + 1.0;
    return v * v * v;
}

double kid(const FeatureSet& f1, const FeatureSet& f2) {
    const long m = f1.features.rows();
    const long n = f2.features.rows();
    if (m < 2 || n < 2) throw std::invalid_argument("kid: need at least 2 samples per set");
    if (f1.features.cols() != f2.features.cols())
        throw std::invalid_argument("kid: feature dimensions differ");
    const double d = static_cast<double>(f1.features.cols());
    auto poly3 = [&](double dot) {
        const double v = dot / d + 1.0;
        return v * v * v;
    };
    const Eigen::MatrixXd k11 = f1.features * f1.features.transpose();
    const Eigen::MatrixXd k22 = f2.features * f2.features.transpose();
    const Eigen::MatrixXd k12 = f1.features * f2.features.transpose();
    double sum11 = 0, sum22 = 0, sum12 = 0;
    for (long i = 0; i < m; ++i)
        for (long j = 0; j < m; ++j)
            if (i != j) sum11 += poly3(k11(i, j));
    for (long i = 0; i < n; ++i)
        for (long j = 0; j < n; ++j)
            if (i != j) sum22 += poly3(k22(i, j));
    for (long i = 0; i < m; ++i)
        for (long j = 0; j < n; ++j) sum12 += poly3(k12(i, j));
    return sum11 / (static_cast<double>(m) * (m - 1)) + sum22 / (static_cast<double>(n) * (n - 1)) -
           2.0 * sum12 / (static_cast<double>(m) * n);
}

// ---------------------------------------------------------------------------

ConvFeatureExtractor::ConvFeatureExtractor(uint64_t seed, int out_channels)
    : out_channels_(out_channels) {
    id_ = "randconv3/" + std::to_string(seed) + "/" + std::to_string(out_channels);
    Rng rng(seed);
    const int chans[4] = {3, out_channels / 4, out_channels / 2, out_channels};
    for (int l = 0; l < 3; ++l) {
        Layer layer;
        const int cin = chans[l], cout = chans[l + 1];
        const double std = 1.0 / std::sqrt(9.0 * cin);
        layer.bias = Eigen::VectorXd(cout);
        for (int o = 0; o < cout; ++o) {
            Eigen::MatrixXd k(cin, 9);
            for (int i = 0; i < cin; ++i)
                for (int j = 0; j < 9; ++j) k(i, j) = rng.normal(0.0, std);
            layer.kernels.push_back(std::move(k));
            layer.bias(o) = rng.normal(0.0, 0.05);
        }
        layers_.push_back(std::move(layer));
    }
}

std::vector<Eigen::MatrixXd> ConvFeatureExtractor::feature_maps(const Image& img) const {
    if (img.channels != 3)
        throw std::invalid_argument("ConvFeatureExtractor: RGB input required");
    // Current activation: channels x (h*w), row-major positions.
    int h = img.height, w = img.width;
    Eigen::MatrixXd act(3, h * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) act(c, y * w + x) = img.at(y, x, c);

    std::vector<Eigen::MatrixXd> maps;
    for (const auto& layer : layers_) {
        const int oh = (h + 1) / 2, ow = (w + 1) / 2;
        const int cout = static_cast<int>(layer.kernels.size());
        const int cin = static_cast<int>(act.rows());
        Eigen::MatrixXd next(cout, oh * ow);
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                // Gather the 3x3 stride-2 receptive field with zero padding.
                Eigen::MatrixXd patch = Eigen::MatrixXd::Zero(cin, 9);
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int iy = 2 * oy + dy;
                        const int ix = 2 * ox + dx;
                        if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                        patch.col((dy + 1) * 3 + (dx + 1)) = act.col(iy * w + ix);
                    }
                for (int o = 0; o < cout; ++o)
                    next(o, oy * ow + ox) = std::tanh(
                        (layer.kernels[static_cast<size_t>(o)].cwiseProduct(patch)).sum() +
                        layer.bias(o));
            }
        act = std::move(next);
        h = oh;
        w = ow;
        maps.push_back(act);
    }
    return maps;
}

Eigen::VectorXd ConvFeatureExtractor::extract(const Image& img) const {
    const auto maps = feature_maps(img);
    return maps.back().rowwise().mean();
}

FeatureSet ConvFeatureExtractor::extract_set(const std::vector<Image>& images) const {
    FeatureSet fs;
    fs.extractor_id = id_;
    fs.features.resize(static_cast<long>(images.size()), out_channels_);
    for (size_t i = 0; i < images.size(); ++i)
        fs.features.row(static_cast<long>(i)) = extract(images[i]).transpose();
    if (!fs.features.allFinite())
        throw std::runtime_error("ConvFeatureExtractor: non-finite features");
    return fs;
}

double perceptual_distance(const Image& a, const Image& b, const ConvFeatureExtractor& extractor) {
    if (!a.same_shape(b)) throw std::invalid_argument("perceptual_distance: shape mismatch");
    const auto ma = extractor.feature_maps(a);
    const auto mb = extractor.feature_maps(b);
    double total = 0;
    for (size_t l = 0; l < ma.size(); ++l) {
        const auto& fa = ma[l];
        const auto& fb = mb[l];
        double layer_sum = 0;
        for (long p = 0; p < fa.cols(); ++p) {
            Eigen::VectorXd va = fa.col(p);
            Eigen::VectorXd vb = fb.col(p);
            const double na = va.norm(), nb = vb.norm();
            if (na > 1e-12) va /= na;
            if (nb > 1e-12) vb /= nb;
            layer_sum += (va - vb).squaredNorm();
        }
        total += layer_sum / static_cast<double>(fa.cols());
    }
    return total / static_cast<double>(ma.size());
}

// ---------------------------------------------------------------------------

void MetricReport::add(const std::string& metric, const std::string& protocol,
                       const std::string& mode, double value) {
    rows.push_back({metric, protocol, mode, value});
}

const MetricRow* MetricReport::find(const std::string& metric, const std::string& mode) const {
    for (const auto& r : rows)
        if (r.metric == metric && r.mode == mode) return &r;
    return nullptr;
}

std::string MetricReport::to_table() const {
    std::ostringstream os;
    os << "metric protocol mode value\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.9g", r.value);
        os << r.metric << " " << r.protocol << " " << r.mode << " " << buf << "\n";
    }
    return os.str();
}

void MetricReport::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("MetricReport: cannot write " + path.string());
    out << to_table();
}

MetricReport MetricReport::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("MetricReport: cannot read " + path.string());
    MetricReport rep;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        MetricRow r;
        if (!(ls >> r.metric >> r.protocol >> r.mode >> r.value))
            throw std::runtime_error("MetricReport: malformed row: " + line);
        rep.rows.push_back(std::move(r));
    }
    return rep;
}

}  // namespace tryflow
