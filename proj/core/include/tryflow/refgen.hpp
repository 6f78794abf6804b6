#pragma once

#include <Eigen/Core>
#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "tryflow/image.hpp"
#include "tryflow/rng.hpp"
#include "tryflow/synthworld.hpp"

namespace tryflow {

struct PromptPair {
    std::string positive;  // opposite appearance + action + outfit + keep-clause
    std::string negative;  // original appearance description
};

// The describer's two labeled sections. `positive` holds the original
// appearance, `negative` its opposite; assemble_prompts swaps them into the
// edit prompts.
struct AppearanceSections {
    std::string positive;
    std::string negative;
};

class DescriberInterface {
public:
    virtual ~DescriberInterface() = default;
    virtual std::string describe(const Image& image, const std::string& instruction) = 0;
};

class EditorInterface {
public:
    virtual ~EditorInterface() = default;
    // Must be deterministic for a fixed seed.
    virtual Image edit(int item_id, const Image& image, const PromptPair& prompts,
                       uint64_t seed) = 0;
};

// Reads hair/skin pixels from the synthetic person render and emits the
// two-section appearance text a vision-language model would produce.
class TemplateDescriber : public DescriberInterface {
public:
    std::string describe(const Image& image, const std::string& instruction) override;
};

// In-process editor backed by the synthetic world: re-renders the record's
// garment on a freshly sampled person, ignoring the text prompts.
class SynthEditor : public EditorInterface {
public:
    explicit SynthEditor(const std::vector<DatasetRecord>& records) : records_(&records) {}
    Image edit(int item_id, const Image& image, const PromptPair& prompts, uint64_t seed) override;

private:
    const std::vector<DatasetRecord>* records_;
};

// ---------------------------------------------------------------------------
// Line-delimited JSON protocol on a local TCP socket, one request per line:
//   {"op":"edit","image_path":p,"positive":s,"negative":s,"seed":n} -> {"image_path":p}
//   {"op":"describe","image_path":p,"instruction":s}                -> {"text":s}
// Errors come back as {"error": "..."}.

class ProtocolClient {
public:
    ProtocolClient(std::string host, int port) : host_(std::move(host)), port_(port) {}
    std::string request_line(const std::string& line) const;

private:
    std::string host_;
    int port_;
};

class ExternalEditor : public EditorInterface {
public:
    ExternalEditor(std::string host, int port, std::filesystem::path scratch_dir);
    Image edit(int item_id, const Image& image, const PromptPair& prompts, uint64_t seed) override;

private:
    ProtocolClient client_;
    std::filesystem::path scratch_;
};

class ExternalDescriber : public DescriberInterface {
public:
    ExternalDescriber(std::string host, int port, std::filesystem::path scratch_dir);
    std::string describe(const Image& image, const std::string& instruction) override;

private:
    ProtocolClient client_;
    std::filesystem::path scratch_;
};

// Minimal single-connection line server for plugging a model service (and for
// exercising the protocol in tests). The handler maps a request line to a
// response line.
class ProtocolServer {
public:
    using Handler = std::function<std::string(const std::string&)>;
    ProtocolServer() = default;
    ~ProtocolServer();
    int start(Handler handler);  // binds 127.0.0.1 on an ephemeral port, returns it
    void stop();

private:
    std::thread worker_;
    std::atomic<bool> stopping_{false};
    int listen_fd_ = -1;
    int port_ = 0;
};

// ---------------------------------------------------------------------------

struct DescriptionBank {
    // Outfit lines describe NON-target garments for each target category.
    std::map<GarmentCategory, std::vector<std::string>> outfits;
    std::map<GarmentCategory, std::vector<std::string>> actions;
    std::vector<std::string> accessories;

    static DescriptionBank builtin();
    // Plain-text file with [upper.outfits] / [upper.actions] / ... /
    // [accessories] section headers, one entry per line.
    static DescriptionBank load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    // Throws when an outfit entry describes the target category's own garment.
    void validate() const;
};

// Parses the describer output into its Positive/Negative sections; throws
// DescribeParseError (raw text preserved) when a marker is missing.
struct DescribeParseError : std::runtime_error {
    explicit DescribeParseError(const std::string& msg, std::string raw_text);
    std::string raw;
};

AppearanceSections describe_appearance(const Image& image, DescriberInterface& describer);

std::string garment_display_name(const GarmentParams& garment);

// positive = opposite appearance + action + outfit + "keep the {name} cloth
// unchanged"; negative = original appearance. The outfit must come from the
// bank section of `category`.
PromptPair assemble_prompts(const AppearanceSections& appearance, const std::string& action,
                            const std::string& outfit, const std::string& garment_name,
                            GarmentCategory category, const DescriptionBank& bank);

// Greedy first-wins dedup: item i is dropped iff its cosine similarity to any
// previously kept item is >= threshold. Returns kept row indices.
std::vector<int> dedup_by_features(const Eigen::MatrixXd& features, double threshold);

struct RefItem {
    int id = 0;
    Image image;
    std::map<std::string, std::string> tags;
};

using QualityPredicate = std::pair<std::string, std::function<bool(const RefItem&)>>;

struct FilterResult {
    std::vector<int> kept;
    std::vector<std::pair<int, std::string>> rejections;  // (id, failed predicate)
};

FilterResult quality_filter(const std::vector<RefItem>& items,
                            const std::vector<QualityPredicate>& predicates);

std::vector<QualityPredicate> default_quality_predicates();

// Fixed random-projection patch-histogram features (the default dedup
// extractor): 4x4 cell color means + hue histogram, projected to 32 dims.
Eigen::MatrixXd patch_histogram_features(const std::vector<Image>& images,
                                         uint64_t seed = 0xfea7);

struct ReferenceSetResult {
    // One line per input garment: "garment_id, reference_path, kept|dropped, reason".
    std::vector<std::string> manifest;
    std::vector<int> kept_ids;
};

ReferenceSetResult generate_reference_set(const std::vector<DatasetRecord>& records,
                                          EditorInterface& editor, DescriberInterface& describer,
                                          const DescriptionBank& bank, Rng& rng,
                                          const std::filesystem::path& out_dir,
                                          double dedup_threshold = 0.95);

}  // namespace tryflow
