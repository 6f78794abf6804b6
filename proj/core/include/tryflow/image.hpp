#pragma once

#include <optional>
#include <vector>

namespace tryflow {

// Dense float image, row-major HWC, values nominally in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> data;

    Image() = default;
    Image(int h, int w, int c, float fill = 0.0f)
        : height(h), width(w), channels(c), data(static_cast<size_t>(h) * w * c, fill) {}

    float& at(int y, int x, int c) {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    float at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    size_t size() const { return data.size(); }
    bool same_shape(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }
};

// Half-open pixel rectangle [y0,y1) x [x0,x1).
struct Rect {
    int y0 = 0, x0 = 0, y1 = 0, x1 = 0;
    int rows() const { return y1 - y0; }
    int cols() const { return x1 - x0; }
    bool contains(int y, int x) const { return y >= y0 && y < y1 && x >= x0 && x < x1; }
    int area() const { return rows() * cols(); }
};

struct Hsv {
    float h = 0;  // [0,1)
    float s = 0;
    float v = 0;
};

Hsv rgb_to_hsv(float r, float g, float b);

// Inverse conversion; h wraps modulo 1.
void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b);

// Circular hue distance in [0, 0.5].
float hue_distance(float a, float b);

// Dominant hue of sufficiently saturated pixels inside `region`:
// 36-bin histogram over hue, circular mean of the winning bin.
// Empty result when no pixel passes the saturation/value gates.
std::optional<float> dominant_hue(const Image& img, const Rect& region,
                                  float min_saturation = 0.15f, float min_value = 0.08f);

Image to_gray(const Image& img);
Image clamp01(Image img);
bool has_non_finite(const Image& img);

// Fixed 2x average-pool "encoder" and nearest-neighbor "decoder".
Image avg_pool2(const Image& img);
Image upsample2_nearest(const Image& img);

// Mean absolute difference over all elements (shape-checked).
float mean_abs_diff(const Image& a, const Image& b);

// Mean per-channel color over a region.
std::vector<float> region_mean(const Image& img, const Rect& region);

}  // namespace tryflow
