#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tryflow/image.hpp"
#include "tryflow/rng.hpp"

namespace tryflow {

enum class GarmentCategory { upper = 0, lower = 1, dress = 2 };

const char* category_name(GarmentCategory c);
GarmentCategory category_from_name(const std::string& name);

struct PersonParams {
    std::array<float, 3> skin_tone{0.93f, 0.78f, 0.66f};
    int hair_style = 0;  // 0 short, 1 long, 2 bun, 3 bald
    std::array<float, 3> hair_color{0.08f, 0.07f, 0.07f};
    // arm_left, arm_right (radians from vertical, outward),
    // leg_left, leg_right (radians from vertical).
    std::array<double, 4> pose{0.4, 0.4, 0.0, 0.0};
    int canvas = 32;

    void validate() const;
};

struct GarmentParams {
    GarmentCategory category = GarmentCategory::upper;
    std::array<float, 3> base_color{0.8f, 0.2f, 0.2f};
    int pattern = 0;  // 0 solid, 1 stripes, 2 dots, 3 glyph
    bool translucent = false;
    double length = 1.0;  // fraction of the category region, (0, 1]

    void validate() const;
};

// Number of differing top-level person fields (skin, hair style, hair color,
// pose); make_reference enforces >= 2.
int person_param_differences(const PersonParams& a, const PersonParams& b);

// Fixed per-category mask rectangle (garment-independent).
Rect category_region(GarmentCategory category, int canvas);

// Rows actually covered by the garment given its length.
Rect garment_rect(const GarmentParams& garment, int canvas);

// Documented mask-area bounds per category as a fraction of the canvas.
std::pair<double, double> mask_area_bounds(GarmentCategory category);

// Deterministic rasterization of a person wearing `garment`; the slot not
// occupied by the garment wears `filler` (the fixed neutral filler when
// unset). Translucent garments blend the underlying pixels at alpha 0.5;
// dresses occupy both slots and take no filler.
Image render_wearing(const PersonParams& person, const GarmentParams& garment,
                     const std::optional<GarmentParams>& filler = std::nullopt);

// render_wearing with the default filler; the ground-truth try-on oracle.
Image render_person(const PersonParams& person, const GarmentParams& garment);

// Garment-independent pose/skeleton map.
Image render_pose_map(const PersonParams& person);

// Flat garment image; deliberately identical for translucent/opaque twins.
Image render_flat_cloth(const GarmentParams& garment, int canvas);

// Target with the category region replaced by 0.5 gray, plus the mask.
std::pair<Image, Image> render_agnostic(const PersonParams& person, const GarmentParams& garment);

// The fixed neutral filler garment worn in non-target slots of targets.
GarmentParams neutral_filler(GarmentCategory target_category);

PersonParams sample_person(Rng& rng, int canvas = 32);
GarmentParams sample_garment(Rng& rng, GarmentCategory category, double translucent_prob = 0.5);

struct ReferenceResult {
    PersonParams person;
    GarmentParams filler;
    Image image;
};

// Same garment worn by a freshly sampled person (>= 2 param fields away from
// the target person) with a randomized non-target garment.
ReferenceResult make_reference(const GarmentParams& garment, const PersonParams& target_person,
                               Rng& rng);

// True when the garment region of `img` looks alpha-blended with the wearer's
// body rather than opaque; decided against the exact renders of both variants.
bool detect_translucency(const Image& img, const PersonParams& person, const GarmentParams& garment);

struct DatasetRecord {
    int idx = 0;
    std::string split = "train";
    GarmentCategory category = GarmentCategory::upper;
    PersonParams person;
    GarmentParams garment;         // target garment
    GarmentParams source_garment;  // worn in person_img (same category, different garment)
    PersonParams ref_person;
    GarmentParams ref_filler;

    Image target;      // person wearing garment (oracle)
    Image person_img;  // same person wearing source_garment
    Image agnostic;
    Image mask;
    Image pose;
    Image cloth;
    Image reference;
};

struct BuildOptions {
    std::array<double, 3> category_mix{1.0 / 3, 1.0 / 3, 1.0 / 3};  // upper, lower, dress
    double translucent_prob = 0.5;
    int canvas = 32;
    // Emit consecutive (opaque, translucent) twins sharing person and garment.
    bool twins = false;
    std::string split = "train";
};

// Reproducible for a fixed seed; record i depends only on (seed, i).
std::vector<DatasetRecord> build_dataset(int n, const BuildOptions& opts, uint64_t seed);

// Layout: root/{split}/{idx}_{role}.png with roles
// {person, agnostic, mask, pose, cloth, ref, target}; manifest.txt holds one
// line per record with category and all person/garment parameters.
void save_dataset(const std::vector<DatasetRecord>& records, const std::filesystem::path& root,
                  const std::string& split);

std::vector<DatasetRecord> load_dataset(const std::filesystem::path& root, const std::string& split);

// Re-renders every image of a record from its parameters (used by tests and
// by manifest-only loads).
void render_record_images(DatasetRecord& rec);

std::string serialize_record_params(const DatasetRecord& rec);
DatasetRecord parse_record_params(const std::string& line);

std::string serialize_garment_params(const GarmentParams& g);
GarmentParams parse_garment_params(const std::string& s);

}  // namespace tryflow
