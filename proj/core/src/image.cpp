#include "tryflow/image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tryflow {

Hsv rgb_to_hsv(float r, float g, float b) {
    const float mx = std::max({r, g, b});
    const float mn = std::min({r, g, b});
    const float d = mx - mn;
    Hsv out;
    out.v = mx;
    out.s = mx > 0 ? d / mx : 0.0f;
    if (d <= 0) {
        out.h = 0;
        return out;
    }
    float h;
    if (mx == r)
        h = std::fmod((g - b) / d, 6.0f);
    else if (mx == g)
        h = (b - r) / d + 2.0f;
    else
        h = (r - g) / d + 4.0f;
    h /= 6.0f;
    if (h < 0) h += 1.0f;
    out.h = h;
    return out;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
    h = h - std::floor(h);
    const float c = v * s;
    const float hp = h * 6.0f;
    const float x = c * (1.0f - std::fabs(std::fmod(hp, 2.0f) - 1.0f));
    float rp = 0, gp = 0, bp = 0;
    if (hp < 1) {
        rp = c; gp = x;
    } else if (hp < 2) {
        rp = x; gp = c;
    } else if (hp < 3) {
        gp = c; bp = x;
    } else if (hp < 4) {
        gp = x; bp = c;
    } else if (hp < 5) {
        rp = x; bp = c;
    } else {
        rp = c; bp = x;
    }
    const float m = v - c;
    r = rp + m;
    g = gp + m;
    b = bp + m;
}

float hue_distance(float a, float b) {
    float d = std::fabs(a - b);
    d = std::fmod(d, 1.0f);
    return d > 0.5f ? 1.0f - d : d;
}

std::optional<float> dominant_hue(const Image& img, const Rect& region,
                                  float min_saturation, float min_value) {
    if (img.channels != 3) throw std::invalid_argument("dominant_hue: RGB image required");
    constexpr int kBins = 36;
    int counts[kBins] = {0};
    std::vector<float> hues;
    hues.reserve(static_cast<size_t>(region.area()));
    for (int y = std::max(0, region.y0); y < std::min(img.height, region.y1); ++y) {
        for (int x = std::max(0, region.x0); x < std::min(img.width, region.x1); ++x) {
            const Hsv hsv = rgb_to_hsv(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
            if (hsv.s < min_saturation || hsv.v < min_value) continue;
            hues.push_back(hsv.h);
            int bin = static_cast<int>(hsv.h * kBins);
            if (bin >= kBins) bin = kBins - 1;
            counts[bin]++;
        }
    }
    if (hues.empty()) return std::nullopt;
    int best = 0;
    for (int i = 1; i < kBins; ++i)
        if (counts[i] > counts[best]) best = i;
    // Circular mean of hues belonging to the winning bin.
    double sx = 0, sy = 0;
    const float lo = static_cast<float>(best) / kBins;
    const float hi = static_cast<float>(best + 1) / kBins;
    for (float h : hues) {
        if (h >= lo && h < hi) {
            sx += std::cos(2.0 * M_PI * h);
            sy += std::sin(2.0 * M_PI * h);
        }
    }
    double ang = std::atan2(sy, sx) / (2.0 * M_PI);
    if (ang < 0) ang += 1.0;
    return static_cast<float>(ang);
}

Image to_gray(const Image& img) {
    if (img.channels == 1) return img;
    if (img.channels != 3) throw std::invalid_argument("to_gray: 1 or 3 channels expected");
    Image out(img.height, img.width, 1);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            out.at(y, x, 0) = 0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) +
                              0.114f * img.at(y, x, 2);
    return out;
}

Image clamp01(Image img) {
    for (float& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
    return img;
}

bool has_non_finite(const Image& img) {
    for (float v : img.data)
        if (!std::isfinite(v)) return true;
    return false;
}

Image avg_pool2(const Image& img) {
    if (img.height % 2 != 0 || img.width % 2 != 0)
        throw std::invalid_argument("avg_pool2: even dimensions required");
    Image out(img.height / 2, img.width / 2, img.channels);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                out.at(y, x, c) = 0.25f * (img.at(2 * y, 2 * x, c) + img.at(2 * y, 2 * x + 1, c) +
                                           img.at(2 * y + 1, 2 * x, c) + img.at(2 * y + 1, 2 * x + 1, c));
    return out;
}

Image upsample2_nearest(const Image& img) {
    Image out(img.height * 2, img.width * 2, img.channels);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                out.at(y, x, c) = img.at(y / 2, x / 2, c);
    return out;
}

float mean_abs_diff(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("mean_abs_diff: shape mismatch");
    double acc = 0;
    for (size_t i = 0; i < a.data.size(); ++i) acc += std::fabs(a.data[i] - b.data[i]);
    return static_cast<float>(acc / static_cast<double>(a.data.size()));
}

std::vector<float> region_mean(const Image& img, const Rect& region) {
    std::vector<double> acc(static_cast<size_t>(img.channels), 0.0);
    long n = 0;
    for (int y = std::max(0, region.y0); y < std::min(img.height, region.y1); ++y)
        for (int x = std::max(0, region.x0); x < std::min(img.width, region.x1); ++x) {
            for (int c = 0; c < img.channels; ++c) acc[c] += img.at(y, x, c);
            ++n;
        }
    std::vector<float> out(static_cast<size_t>(img.channels), 0.0f);
    if (n > 0)
        for (int c = 0; c < img.channels; ++c) out[c] = static_cast<float>(acc[c] / n);
    return out;
}

}  // namespace tryflow
