#include "tryflow/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "tryflow/png_io.hpp"

namespace tryflow {

namespace {

constexpr float kBackground[3] = {0.92f, 0.92f, 0.95f};
constexpr float kMaskGray = 0.5f;
constexpr float kTranslucentAlpha = 0.5f;
constexpr float kPatternDarken = 0.55f;

const std::array<std::array<float, 3>, 6> kSkinPalette = {{{0.98f, 0.86f, 0.76f},
                                                           {0.93f, 0.78f, 0.66f},
                                                           {0.85f, 0.64f, 0.48f},
                                                           {0.72f, 0.51f, 0.36f},
                                                           {0.55f, 0.37f, 0.26f},
                                                           {0.40f, 0.26f, 0.18f}}};

const std::array<std::array<float, 3>, 6> kHairPalette = {{{0.08f, 0.07f, 0.07f},
                                                           {0.35f, 0.22f, 0.10f},
                                                           {0.85f, 0.72f, 0.35f},
                                                           {0.62f, 0.25f, 0.12f},
                                                           {0.55f, 0.55f, 0.58f},
                                                           {0.20f, 0.30f, 0.65f}}};

// 8 well-separated hues; neighbors are 0.125 apart so the 0.1 hue tolerance
// in evaluation separates correct colors from mistakes.
constexpr int kGarmentHues = 8;

const std::array<std::array<float, 3>, 4> kFillerPalette = {{{0.45f, 0.20f, 0.20f},
                                                             {0.20f, 0.40f, 0.22f},
                                                             {0.20f, 0.25f, 0.50f},
                                                             {0.42f, 0.30f, 0.20f}}};

void put(Image& img, int y, int x, const float* rgb) {
    if (y < 0 || y >= img.height || x < 0 || x >= img.width) return;
    img.at(y, x, 0) = rgb[0];
    img.at(y, x, 1) = rgb[1];
    img.at(y, x, 2) = rgb[2];
}

void fill_rect(Image& img, const Rect& r, const float* rgb) {
    for (int y = std::max(0, r.y0); y < std::min(img.height, r.y1); ++y)
        for (int x = std::max(0, r.x0); x < std::min(img.width, r.x1); ++x) put(img, y, x, rgb);
}

// Unit coordinates run over the reference 32x32 layout; pixels are tested at
// their centers so 64x64 canvases are exact 2x upscales of the same geometry.
struct UnitFrame {
    int canvas;
    double scale() const { return canvas / 32.0; }
    double uy(int y) const { return (y + 0.5) / scale(); }
    double ux(int x) const { return (x + 0.5) / scale(); }
    Rect pixel_rect(double y0, double x0, double y1, double x1) const {
        const double s = scale();
        return Rect{static_cast<int>(std::lround(y0 * s)), static_cast<int>(std::lround(x0 * s)),
                    static_cast<int>(std::lround(y1 * s)), static_cast<int>(std::lround(x1 * s))};
    }
};

void draw_disk(Image& img, const UnitFrame& f, double cy, double cx, double r, const float* rgb) {
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double dy = f.uy(y) - cy;
            const double dx = f.ux(x) - cx;
            if (dy * dy + dx * dx <= r * r) put(img, y, x, rgb);
        }
}

void draw_ring(Image& img, const UnitFrame& f, double cy, double cx, double r, double halfwidth,
               const float* rgb) {
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double dy = f.uy(y) - cy;
            const double dx = f.ux(x) - cx;
            const double d = std::sqrt(dy * dy + dx * dx);
            if (std::fabs(d - r) <= halfwidth) put(img, y, x, rgb);
        }
}

void draw_segment(Image& img, const UnitFrame& f, double y0, double x0, double y1, double x1,
                  double halfwidth, const float* rgb) {
    const double len2 = (y1 - y0) * (y1 - y0) + (x1 - x0) * (x1 - x0);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double py = f.uy(y), px = f.ux(x);
            double t = len2 > 0 ? ((py - y0) * (y1 - y0) + (px - x0) * (x1 - x0)) / len2 : 0.0;
            t = std::clamp(t, 0.0, 1.0);
            const double dy = py - (y0 + t * (y1 - y0));
            const double dx = px - (x0 + t * (x1 - x0));
            if (dy * dy + dx * dx <= halfwidth * halfwidth) put(img, y, x, rgb);
        }
}

// Body layout in unit coordinates.
constexpr double kHeadCy = 4.0, kHeadCx = 15.5, kHeadR = 2.7;
constexpr double kTorsoY0 = 9, kTorsoY1 = 20, kTorsoX0 = 11, kTorsoX1 = 21;
constexpr double kLegY0 = 20, kLegY1 = 30;
constexpr double kArmLen = 8.0;

void draw_body(Image& img, const UnitFrame& f, const PersonParams& p) {
    const float* skin = p.skin_tone.data();
    const float* hair = p.hair_color.data();
    draw_disk(img, f, kHeadCy, kHeadCx, kHeadR, skin);
    switch (p.hair_style) {
        case 0:
            fill_rect(img, f.pixel_rect(1, 13, 3, 19), hair);
            break;
        case 1:
            fill_rect(img, f.pixel_rect(1, 13, 3, 19), hair);
            fill_rect(img, f.pixel_rect(2, 11.5, 10, 13), hair);
            fill_rect(img, f.pixel_rect(2, 19, 10, 20.5), hair);
            break;
        case 2:
            fill_rect(img, f.pixel_rect(0, 14, 2, 18), hair);
            fill_rect(img, f.pixel_rect(1.5, 13, 3, 19), hair);
            break;
        default:
            break;  // bald
    }
    fill_rect(img, f.pixel_rect(kTorsoY0, kTorsoX0, kTorsoY1, kTorsoX1), skin);
    // Arms from the shoulders, angled outward from vertical.
    const double al = p.pose[0], ar = p.pose[1];
    draw_segment(img, f, 9.5, 10.5, 9.5 + kArmLen * std::cos(al), 10.5 - kArmLen * std::sin(al),
                 0.7, skin);
    draw_segment(img, f, 9.5, 21.5, 9.5 + kArmLen * std::cos(ar), 21.5 + kArmLen * std::sin(ar),
                 0.7, skin);
    // Legs: vertical strips with a per-row tilt offset.
    for (int y = 0; y < img.height; ++y) {
        const double uy = f.uy(y);
        if (uy < kLegY0 || uy >= kLegY1) continue;
        const double drop = uy - kLegY0;
        const double shift_l = -std::tan(p.pose[2]) * drop;
        const double shift_r = std::tan(p.pose[3]) * drop;
        for (int x = 0; x < img.width; ++x) {
            const double ux = f.ux(x);
            if ((ux >= 12 + shift_l && ux < 15 + shift_l) ||
                (ux >= 17 + shift_r && ux < 20 + shift_r))
                put(img, y, x, skin);
        }
    }
}

// Pattern color decision in unit-grid garment-local coordinates.
bool pattern_dark(const GarmentParams& g, int local_y, int local_x, int local_cols) {
    switch (g.pattern) {
        case 1:
            return local_y % 2 == 1;  // stripes
        case 2:
            return local_y % 3 == 1 && local_x % 3 == 1;  // dots
        case 3: {
            // "T" glyph near the top center.
            const int cx = local_cols / 2;
            if (local_y == 2 && std::abs(local_x - cx) <= 2) return true;
            return local_x == cx && local_y >= 2 && local_y <= 6;
        }
        default:
            return false;
    }
}

struct GarmentUnitRect {
    double y0, x0, y1, x1;
};

GarmentUnitRect garment_unit_rect(const GarmentParams& g) {
    switch (g.category) {
        case GarmentCategory::upper:
            return {9, 11, 9 + std::ceil(11 * g.length), 21};
        case GarmentCategory::lower:
            return {20, 12, 20 + std::ceil(10 * g.length), 20};
        case GarmentCategory::dress:
        default:
            return {9, 11, 9 + std::ceil(21 * g.length), 21};
    }
}

void draw_garment(Image& img, const UnitFrame& f, const GarmentParams& g, bool worn) {
    const GarmentUnitRect r = garment_unit_rect(g);
    const int local_cols = static_cast<int>(r.x1 - r.x0);
    float dark[3] = {g.base_color[0] * kPatternDarken, g.base_color[1] * kPatternDarken,
                     g.base_color[2] * kPatternDarken};
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double uy = f.uy(y), ux = f.ux(x);
            if (uy < r.y0 || uy >= r.y1 || ux < r.x0 || ux >= r.x1) continue;
            const int ly = static_cast<int>(std::floor(uy - r.y0));
            const int lx = static_cast<int>(std::floor(ux - r.x0));
            const float* col =
                pattern_dark(g, ly, lx, local_cols) ? dark : g.base_color.data();
            if (worn && g.translucent) {
                for (int c = 0; c < 3; ++c)
                    img.at(y, x, c) = kTranslucentAlpha * col[c] +
                                      (1.0f - kTranslucentAlpha) * img.at(y, x, c);
            } else {
                put(img, y, x, col);
            }
        }
}

}  // namespace

const char* category_name(GarmentCategory c) {
    switch (c) {
        case GarmentCategory::upper:
            return "upper";
        case GarmentCategory::lower:
            return "lower";
        case GarmentCategory::dress:
        default:
            return "dress";
    }
}

GarmentCategory category_from_name(const std::string& name) {
    if (name == "upper") return GarmentCategory::upper;
    if (name == "lower") return GarmentCategory::lower;
    if (name == "dress") return GarmentCategory::dress;
    throw std::invalid_argument("unknown garment category: " + name);
}

void PersonParams::validate() const {
    if (canvas != 32 && canvas != 64)
        throw std::invalid_argument("PersonParams: canvas must be 32 or 64");
    if (hair_style < 0 || hair_style > 3)
        throw std::invalid_argument("PersonParams: hair_style must be in 0..3");
    for (float v : skin_tone)
        if (v < 0 || v > 1) throw std::invalid_argument("PersonParams: skin tone out of [0,1]");
    for (float v : hair_color)
        if (v < 0 || v > 1) throw std::invalid_argument("PersonParams: hair color out of [0,1]");
    if (pose[0] < 0.05 || pose[0] > 1.2 || pose[1] < 0.05 || pose[1] > 1.2)
        throw std::invalid_argument("PersonParams: arm angles must lie in [0.05, 1.2]");
    if (std::fabs(pose[2]) > 0.25 || std::fabs(pose[3]) > 0.25)
        throw std::invalid_argument("PersonParams: leg angles must lie in [-0.25, 0.25]");
}

void GarmentParams::validate() const {
    if (!(length > 0.0 && length <= 1.0))
        throw std::invalid_argument("GarmentParams: length must lie in (0, 1]");
    if (pattern < 0 || pattern > 3)
        throw std::invalid_argument("GarmentParams: pattern must be in 0..3");
    for (float v : base_color)
        if (v < 0 || v > 1) throw std::invalid_argument("GarmentParams: color out of [0,1]");
}

int person_param_differences(const PersonParams& a, const PersonParams& b) {
    int n = 0;
    auto color_diff = [](const std::array<float, 3>& x, const std::array<float, 3>& y) {
        return std::fabs(x[0] - y[0]) + std::fabs(x[1] - y[1]) + std::fabs(x[2] - y[2]) > 1e-6f;
    };
    if (color_diff(a.skin_tone, b.skin_tone)) ++n;
    if (a.hair_style != b.hair_style) ++n;
    if (color_diff(a.hair_color, b.hair_color)) ++n;
    bool pose_diff = false;
    for (int i = 0; i < 4; ++i) pose_diff |= std::fabs(a.pose[i] - b.pose[i]) > 1e-9;
    if (pose_diff) ++n;
    return n;
}

Rect category_region(GarmentCategory category, int canvas) {
    const UnitFrame f{canvas};
    switch (category) {
        case GarmentCategory::upper:
            return f.pixel_rect(kTorsoY0, kTorsoX0, kTorsoY1, kTorsoX1);
        case GarmentCategory::lower:
            return f.pixel_rect(kLegY0, 12, kLegY1, 20);
        case GarmentCategory::dress:
        default:
            return f.pixel_rect(kTorsoY0, kTorsoX0, kLegY1, kTorsoX1);
    }
}

Rect garment_rect(const GarmentParams& garment, int canvas) {
    const UnitFrame f{canvas};
    const GarmentUnitRect r = garment_unit_rect(garment);
    return f.pixel_rect(r.y0, r.x0, r.y1, r.x1);
}

std::pair<double, double> mask_area_bounds(GarmentCategory category) {
    switch (category) {
        case GarmentCategory::upper:
            return {0.08, 0.14};  // 11x10 of 32x32
        case GarmentCategory::lower:
            return {0.05, 0.11};  // 10x8
        case GarmentCategory::dress:
        default:
            return {0.16, 0.25};  // 21x10
    }
}

GarmentParams neutral_filler(GarmentCategory target_category) {
    GarmentParams g;
    g.category = target_category == GarmentCategory::upper ? GarmentCategory::lower
                                                           : GarmentCategory::upper;
    g.base_color = {0.36f, 0.36f, 0.38f};
    g.pattern = 0;
    g.translucent = false;
    g.length = 1.0;
    return g;
}

Image render_wearing(const PersonParams& person, const GarmentParams& garment,
                     const std::optional<GarmentParams>& filler) {
    person.validate();
    garment.validate();
    const UnitFrame f{person.canvas};
    Image img(person.canvas, person.canvas, 3);
    fill_rect(img, Rect{0, 0, img.height, img.width}, kBackground);
    draw_body(img, f, person);

    if (garment.category == GarmentCategory::dress) {
        draw_garment(img, f, garment, true);
        return img;
    }
    GarmentParams fill = filler.value_or(neutral_filler(garment.category));
    if (fill.category == garment.category)
        throw std::invalid_argument("render_wearing: filler occupies the garment's slot");
    if (fill.category == GarmentCategory::dress)
        throw std::invalid_argument("render_wearing: filler cannot be a dress");
    // Lower slot first, then upper, so layering is deterministic.
    const GarmentParams& lower = garment.category == GarmentCategory::lower ? garment : fill;
    const GarmentParams& upper = garment.category == GarmentCategory::upper ? garment : fill;
    draw_garment(img, f, lower, true);
    draw_garment(img, f, upper, true);
    return img;
}

Image render_person(const PersonParams& person, const GarmentParams& garment) {
    return render_wearing(person, garment, std::nullopt);
}

Image render_pose_map(const PersonParams& person) {
    person.validate();
    const UnitFrame f{person.canvas};
    Image img(person.canvas, person.canvas, 3, 0.0f);
    const float white[3] = {1, 1, 1};
    const float red[3] = {1, 0, 0};
    const float green[3] = {0, 1, 0};
    const float arm_l[3] = {0.2f, 0.4f, 1.0f};
    const float arm_r[3] = {0.2f, 0.8f, 1.0f};
    const float leg_l[3] = {1.0f, 1.0f, 0.0f};
    const float leg_r[3] = {1.0f, 0.6f, 0.0f};
    draw_ring(img, f, kHeadCy, kHeadCx, kHeadR, 0.55, white);
    fill_rect(img, f.pixel_rect(9, 11, 10, 21), red);                 // shoulders
    fill_rect(img, f.pixel_rect(9, 15.25, 20, 16.75), green);         // spine
    const double al = person.pose[0], ar = person.pose[1];
    draw_segment(img, f, 9.5, 10.5, 9.5 + kArmLen * std::cos(al), 10.5 - kArmLen * std::sin(al),
                 0.6, arm_l);
    draw_segment(img, f, 9.5, 21.5, 9.5 + kArmLen * std::cos(ar), 21.5 + kArmLen * std::sin(ar),
                 0.6, arm_r);
    const double ll = person.pose[2], lr = person.pose[3];
    draw_segment(img, f, kLegY0, 13.5, kLegY1 - 0.5, 13.5 - std::tan(ll) * (kLegY1 - kLegY0), 0.6,
                 leg_l);
    draw_segment(img, f, kLegY0, 18.5, kLegY1 - 0.5, 18.5 + std::tan(lr) * (kLegY1 - kLegY0), 0.6,
                 leg_r);
    return img;
}

Image render_flat_cloth(const GarmentParams& garment, int canvas) {
    garment.validate();
    const UnitFrame f{canvas};
    Image img(canvas, canvas, 3);
    const float bg[3] = {0.97f, 0.97f, 0.97f};
    fill_rect(img, Rect{0, 0, img.height, img.width}, bg);
    // Flat layouts differ per category so the garment type stays readable;
    // translucency deliberately does not affect this render.
    GarmentUnitRect r;
    switch (garment.category) {
        case GarmentCategory::upper:
            r = {6, 7, 6 + std::ceil(14 * garment.length), 25};
            break;
        case GarmentCategory::lower:
            r = {8, 10, 8 + std::ceil(16 * garment.length), 22};
            break;
        case GarmentCategory::dress:
        default:
            r = {3, 9, 3 + std::ceil(26 * garment.length), 23};
            break;
    }
    const int local_cols = static_cast<int>(r.x1 - r.x0);
    float dark[3] = {garment.base_color[0] * kPatternDarken, garment.base_color[1] * kPatternDarken,
                     garment.base_color[2] * kPatternDarken};
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double uy = f.uy(y), ux = f.ux(x);
            if (uy < r.y0 || uy >= r.y1 || ux < r.x0 || ux >= r.x1) continue;
            const int ly = static_cast<int>(std::floor(uy - r.y0));
            const int lx = static_cast<int>(std::floor(ux - r.x0));
            put(img, y, x,
                pattern_dark(garment, ly, lx, local_cols) ? dark : garment.base_color.data());
        }
    return img;
}

std::pair<Image, Image> render_agnostic(const PersonParams& person, const GarmentParams& garment) {
    Image target = render_person(person, garment);
    const Rect region = category_region(garment.category, person.canvas);
    Image agnostic = target;
    Image mask(person.canvas, person.canvas, 1, 0.0f);
    for (int y = region.y0; y < region.y1; ++y)
        for (int x = region.x0; x < region.x1; ++x) {
            for (int c = 0; c < 3; ++c) agnostic.at(y, x, c) = kMaskGray;
            mask.at(y, x, 0) = 1.0f;
        }
    return {std::move(agnostic), std::move(mask)};
}

PersonParams sample_person(Rng& rng, int canvas) {
    PersonParams p;
    p.canvas = canvas;
    p.skin_tone = kSkinPalette[static_cast<size_t>(rng.uniform_int(kSkinPalette.size()))];
    p.hair_style = rng.uniform_int(4);
    p.hair_color = kHairPalette[static_cast<size_t>(rng.uniform_int(kHairPalette.size()))];
    p.pose[0] = rng.uniform(0.1, 1.1);
    p.pose[1] = rng.uniform(0.1, 1.1);
    p.pose[2] = rng.uniform(-0.2, 0.2);
    p.pose[3] = rng.uniform(-0.2, 0.2);
    return p;
}

GarmentParams sample_garment(Rng& rng, GarmentCategory category, double translucent_prob) {
    GarmentParams g;
    g.category = category;
    const int hue_idx = rng.uniform_int(kGarmentHues);
    float r, gr, b;
    hsv_to_rgb(static_cast<float>(hue_idx) / kGarmentHues, 0.85f, 0.85f, r, gr, b);
    g.base_color = {r, gr, b};
    g.pattern = rng.uniform_int(4);
    g.translucent = rng.bernoulli(translucent_prob);
    static const double lengths[5] = {0.6, 0.7, 0.8, 0.9, 1.0};
    g.length = lengths[rng.uniform_int(5)];
    return g;
}

ReferenceResult make_reference(const GarmentParams& garment, const PersonParams& target_person,
                               Rng& rng) {
    garment.validate();
    ReferenceResult out;
    do {
        out.person = sample_person(rng, target_person.canvas);
    } while (person_param_differences(out.person, target_person) < 2);
    out.filler = neutral_filler(garment.category);
    out.filler.base_color =
        kFillerPalette[static_cast<size_t>(rng.uniform_int(kFillerPalette.size()))];
    if (garment.category == GarmentCategory::dress) {
        out.image = render_wearing(out.person, garment, std::nullopt);
    } else {
        out.image = render_wearing(out.person, garment, out.filler);
    }
    return out;
}

bool detect_translucency(const Image& img, const PersonParams& person,
                         const GarmentParams& garment) {
    const Rect region = garment_rect(garment, person.canvas);
    GarmentParams opaque = garment;
    opaque.translucent = false;
    GarmentParams blend = garment;
    blend.translucent = true;
    const std::vector<float> m = region_mean(img, region);
    const std::vector<float> mo = region_mean(render_person(person, opaque), region);
    const std::vector<float> mb = region_mean(render_person(person, blend), region);
    double d_o = 0, d_b = 0;
    for (int c = 0; c < 3; ++c) {
        d_o += (m[c] - mo[c]) * (m[c] - mo[c]);
        d_b += (m[c] - mb[c]) * (m[c] - mb[c]);
    }
    return d_b < d_o;
}

// ---------------------------------------------------------------------------
// Dataset

namespace {

std::string fmt_color(const std::array<float, 3>& c) {
    char buf[80];
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g", c[0], c[1], c[2]);
    return buf;
}

std::array<float, 3> parse_color(const std::string& s) {
    std::array<float, 3> c{};
    if (std::sscanf(s.c_str(), "%f,%f,%f", &c[0], &c[1], &c[2]) != 3)
        throw std::invalid_argument("manifest: bad color triple: " + s);
    return c;
}

std::string fmt_person(const PersonParams& p) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "skin:%s;style:%d;hair:%s;pose:%.17g,%.17g,%.17g,%.17g;canvas:%d",
                  fmt_color(p.skin_tone).c_str(), p.hair_style, fmt_color(p.hair_color).c_str(),
                  p.pose[0], p.pose[1], p.pose[2], p.pose[3], p.canvas);
    return buf;
}

std::string fmt_garment(const GarmentParams& g) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "cat:%s;color:%s;pattern:%d;trans:%d;len:%.17g",
                  category_name(g.category), fmt_color(g.base_color).c_str(), g.pattern,
                  g.translucent ? 1 : 0, g.length);
    return buf;
}

// Splits "a:1;b:2" into {a:"1", b:"2"}.
std::map<std::string, std::string> parse_fields(const std::string& s) {
    std::map<std::string, std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ';')) {
        const size_t colon = item.find(':');
        if (colon == std::string::npos)
            throw std::invalid_argument("manifest: malformed field: " + item);
        out[item.substr(0, colon)] = item.substr(colon + 1);
    }
    return out;
}

PersonParams parse_person(const std::string& s) {
    auto f = parse_fields(s);
    PersonParams p;
    p.skin_tone = parse_color(f.at("skin"));
    p.hair_style = std::stoi(f.at("style"));
    p.hair_color = parse_color(f.at("hair"));
    if (std::sscanf(f.at("pose").c_str(), "%lf,%lf,%lf,%lf", &p.pose[0], &p.pose[1], &p.pose[2],
                    &p.pose[3]) != 4)
        throw std::invalid_argument("manifest: bad pose tuple: " + f.at("pose"));
    p.canvas = std::stoi(f.at("canvas"));
    return p;
}

GarmentParams parse_garment(const std::string& s) {
    auto f = parse_fields(s);
    GarmentParams g;
    g.category = category_from_name(f.at("cat"));
    g.base_color = parse_color(f.at("color"));
    g.pattern = std::stoi(f.at("pattern"));
    g.translucent = f.at("trans") == "1";
    g.length = std::stod(f.at("len"));
    return g;
}

}  // namespace

std::string serialize_garment_params(const GarmentParams& g) { return fmt_garment(g); }

GarmentParams parse_garment_params(const std::string& s) { return parse_garment(s); }

std::string serialize_record_params(const DatasetRecord& rec) {
    std::ostringstream os;
    os << "idx=" << rec.idx << " split=" << rec.split << " category=" << category_name(rec.category)
       << " person=" << fmt_person(rec.person) << " garment=" << fmt_garment(rec.garment)
       << " source=" << fmt_garment(rec.source_garment)
       << " refperson=" << fmt_person(rec.ref_person)
       << " reffiller=" << fmt_garment(rec.ref_filler);
    return os.str();
}

DatasetRecord parse_record_params(const std::string& line) {
    DatasetRecord rec;
    std::stringstream ss(line);
    std::string tok;
    std::map<std::string, std::string> kv;
    while (ss >> tok) {
        const size_t eq = tok.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("manifest: malformed token: " + tok);
        kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    rec.idx = std::stoi(kv.at("idx"));
    rec.split = kv.at("split");
    rec.category = category_from_name(kv.at("category"));
    rec.person = parse_person(kv.at("person"));
    rec.garment = parse_garment(kv.at("garment"));
    rec.source_garment = parse_garment(kv.at("source"));
    rec.ref_person = parse_person(kv.at("refperson"));
    rec.ref_filler = parse_garment(kv.at("reffiller"));
    return rec;
}

void render_record_images(DatasetRecord& rec) {
    rec.target = render_person(rec.person, rec.garment);
    rec.person_img = render_person(rec.person, rec.source_garment);
    auto [agn, mask] = render_agnostic(rec.person, rec.garment);
    rec.agnostic = std::move(agn);
    rec.mask = std::move(mask);
    rec.pose = render_pose_map(rec.person);
    rec.cloth = render_flat_cloth(rec.garment, rec.person.canvas);
    if (rec.garment.category == GarmentCategory::dress) {
        rec.reference = render_wearing(rec.ref_person, rec.garment, std::nullopt);
    } else {
        rec.reference = render_wearing(rec.ref_person, rec.garment, rec.ref_filler);
    }
}

namespace {

GarmentCategory draw_category(Rng& rng, const std::array<double, 3>& mix) {
    const double u = rng.uniform();
    if (u < mix[0]) return GarmentCategory::upper;
    if (u < mix[0] + mix[1]) return GarmentCategory::lower;
    return GarmentCategory::dress;
}

GarmentParams draw_source_garment(Rng& rng, const GarmentParams& target, double translucent_prob) {
    GarmentParams g;
    do {
        g = sample_garment(rng, target.category, translucent_prob);
    } while (std::fabs(g.base_color[0] - target.base_color[0]) +
                 std::fabs(g.base_color[1] - target.base_color[1]) +
                 std::fabs(g.base_color[2] - target.base_color[2]) <
             1e-6f);
    return g;
}

void fill_record(DatasetRecord& rec, const PersonParams& person, const GarmentParams& garment,
                 const GarmentParams& source, Rng& ref_rng) {
    rec.person = person;
    rec.garment = garment;
    rec.category = garment.category;
    rec.source_garment = source;
    ReferenceResult ref = make_reference(garment, person, ref_rng);
    rec.ref_person = ref.person;
    rec.ref_filler = ref.filler;
    render_record_images(rec);
    rec.reference = std::move(ref.image);
}

}  // namespace

std::vector<DatasetRecord> build_dataset(int n, const BuildOptions& opts, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("build_dataset: n must be >= 1");
    const double mix_sum = opts.category_mix[0] + opts.category_mix[1] + opts.category_mix[2];
    if (opts.category_mix[0] < 0 || opts.category_mix[1] < 0 || opts.category_mix[2] < 0 ||
        std::fabs(mix_sum - 1.0) > 1e-9)
        throw std::invalid_argument("build_dataset: category_mix must be non-negative and sum to 1");

    std::vector<DatasetRecord> records(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        DatasetRecord& rec = records[static_cast<size_t>(i)];
        rec.idx = i;
        rec.split = opts.split;
        if (opts.twins) {
            // Twin pairs share person and garment; only translucency differs.
            Rng pair_rng(derive_seed(seed, 0x7717u + static_cast<uint64_t>(i / 2)));
            const GarmentCategory cat = draw_category(pair_rng, opts.category_mix);
            PersonParams person = sample_person(pair_rng, opts.canvas);
            GarmentParams garment = sample_garment(pair_rng, cat, 0.0);
            GarmentParams source = draw_source_garment(pair_rng, garment, 0.0);
            garment.translucent = (i % 2) == 1;
            Rng ref_rng(derive_seed(seed, 0x9a110u + static_cast<uint64_t>(i)));
            fill_record(rec, person, garment, source, ref_rng);
        } else {
            Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
            const GarmentCategory cat = draw_category(rng, opts.category_mix);
            PersonParams person = sample_person(rng, opts.canvas);
            GarmentParams garment = sample_garment(rng, cat, opts.translucent_prob);
            GarmentParams source = draw_source_garment(rng, garment, opts.translucent_prob);
            fill_record(rec, person, garment, source, rng);
        }
    }
    return records;
}

void save_dataset(const std::vector<DatasetRecord>& records, const std::filesystem::path& root,
                  const std::string& split) {
    const std::filesystem::path dir = root / split;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw std::runtime_error("save_dataset: cannot create " + dir.string());

    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest)
        throw std::runtime_error("save_dataset: cannot write " + (dir / "manifest.txt").string());
    for (const auto& rec : records) {
        const std::string stem = std::to_string(rec.idx) + "_";
        try {
            write_png(dir / (stem + "person.png"), rec.person_img);
            write_png(dir / (stem + "agnostic.png"), rec.agnostic);
            write_png(dir / (stem + "mask.png"), rec.mask);
            write_png(dir / (stem + "pose.png"), rec.pose);
            write_png(dir / (stem + "cloth.png"), rec.cloth);
            write_png(dir / (stem + "ref.png"), rec.reference);
            write_png(dir / (stem + "target.png"), rec.target);
        } catch (const std::exception& e) {
            throw std::runtime_error("save_dataset: failed writing record " +
                                     std::to_string(rec.idx) + " under " + dir.string() + ": " +
                                     e.what());
        }
        manifest << serialize_record_params(rec) << "\n";
    }
}

std::vector<DatasetRecord> load_dataset(const std::filesystem::path& root,
                                        const std::string& split) {
    const std::filesystem::path dir = root / split;
    std::ifstream manifest(dir / "manifest.txt");
    if (!manifest)
        throw std::runtime_error("load_dataset: cannot read " + (dir / "manifest.txt").string());
    std::vector<DatasetRecord> records;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        DatasetRecord rec = parse_record_params(line);
        rec.split = split;
        const std::string stem = std::to_string(rec.idx) + "_";
        rec.person_img = read_png(dir / (stem + "person.png"));
        rec.agnostic = read_png(dir / (stem + "agnostic.png"));
        rec.mask = read_png(dir / (stem + "mask.png"));
        rec.pose = read_png(dir / (stem + "pose.png"));
        rec.cloth = read_png(dir / (stem + "cloth.png"));
        // The reference role is optional; modes that need it check presence.
        if (std::filesystem::exists(dir / (stem + "ref.png")))
            rec.reference = read_png(dir / (stem + "ref.png"));
        rec.target = read_png(dir / (stem + "target.png"));
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace tryflow
