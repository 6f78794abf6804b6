#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "tryflow/png_io.hpp"
#include "tryflow/refgen.hpp"
#include "tryflow/rng.hpp"
#include "tryflow/synthworld.hpp"

using namespace tryflow;
namespace fs = std::filesystem;

namespace {

class FixedDescriber : public DescriberInterface {
public:
    explicit FixedDescriber(std::string text) : text_(std::move(text)) {}
    std::string describe(const Image&, const std::string&) override { return text_; }

private:
    std::string text_;
};

std::vector<DatasetRecord> small_dataset(int n, uint64_t seed) {
    BuildOptions opts;
    opts.category_mix = {1.0, 0.0, 0.0};
    return build_dataset(n, opts, seed);
}

}  // namespace

TEST_CASE("template describer emits both sections and inverts the hair term") {
    PersonParams person;
    person.skin_tone = {0.98f, 0.86f, 0.76f};  // "porcelain"
    person.hair_style = 0;
    person.hair_color = {0.08f, 0.07f, 0.07f};  // "black"
    person.pose = {0.4, 0.4, 0.0, 0.0};
    GarmentParams garment;
    garment.category = GarmentCategory::upper;
    garment.base_color = {0.85f, 0.11f, 0.11f};
    const Image img = render_person(person, garment);

    TemplateDescriber describer;
    const AppearanceSections sections = describe_appearance(img, describer);
    CHECK(!sections.positive.empty());
    CHECK(!sections.negative.empty());
    CHECK(sections.positive.find("black hair") != std::string::npos);
    CHECK(sections.negative.find("blonde hair") != std::string::npos);
    CHECK(sections.positive.find("porcelain skin") != std::string::npos);
    CHECK(sections.negative.find("deep skin") != std::string::npos);
}

TEST_CASE("describe_appearance fails closed on missing markers") {
    FixedDescriber no_neg("Positive: something nice.");
    Image img(32, 32, 3, 0.5f);
    CHECK_THROWS_AS(describe_appearance(img, no_neg), DescribeParseError);
    try {
        describe_appearance(img, no_neg);
    } catch (const DescribeParseError& e) {
        CHECK(e.raw == "Positive: something nice.");
        CHECK(std::string(e.what()).find("something nice") != std::string::npos);
    }
    FixedDescriber no_pos("Negative: only this.");
    CHECK_THROWS_AS(describe_appearance(img, no_pos), DescribeParseError);
}

TEST_CASE("assemble_prompts builds the keep-clause and crosses the sections") {
    const DescriptionBank bank = DescriptionBank::builtin();
    AppearanceSections sections;
    sections.positive = "the model has fair skin and black hair";
    sections.negative = "the model has brown skin and blonde hair";

    GarmentParams garment;
    garment.category = GarmentCategory::dress;
    garment.base_color = {0.85f, 0.11f, 0.11f};  // red
    garment.pattern = 0;
    const std::string name = garment_display_name(garment);
    CHECK(name == "red solid dress");

    const std::string action = bank.actions.at(GarmentCategory::dress)[0];
    const std::string outfit = bank.outfits.at(GarmentCategory::dress)[0];
    const PromptPair pair =
        assemble_prompts(sections, action, outfit, name, GarmentCategory::dress, bank);
    CHECK(pair.positive.find("keep the red solid dress cloth unchanged") != std::string::npos);
    CHECK(pair.positive.find(sections.negative) == 0);  // opposite appearance leads
    CHECK(pair.positive.find(action) != std::string::npos);
    CHECK(pair.positive.find(outfit) != std::string::npos);
    CHECK(pair.negative == sections.positive);
}

TEST_CASE("assemble_prompts handles empty actions and rejects cross-category outfits") {
    const DescriptionBank bank = DescriptionBank::builtin();
    AppearanceSections sections{"orig", "opp"};
    const PromptPair pair =
        assemble_prompts(sections, "", "", "blue solid top", GarmentCategory::upper, bank);
    CHECK(pair.positive == "opp, keep the blue solid top cloth unchanged");
    CHECK(pair.positive.find(", ,") == std::string::npos);

    const std::string lower_outfit = bank.outfits.at(GarmentCategory::lower)[0];
    CHECK_THROWS_WITH_AS(assemble_prompts(sections, "", lower_outfit, "x",
                                          GarmentCategory::upper, bank),
                         doctest::Contains("lower"), std::invalid_argument);
    CHECK_THROWS_AS(assemble_prompts(sections, "", "made-up outfit line", "x",
                                     GarmentCategory::upper, bank),
                    std::invalid_argument);
}

TEST_CASE("assemble is deterministic for fixed bank indices") {
    const DescriptionBank bank = DescriptionBank::builtin();
    AppearanceSections sections{"orig", "opp"};
    const std::string action = bank.actions.at(GarmentCategory::upper)[1];
    const std::string outfit = bank.outfits.at(GarmentCategory::upper)[2];
    const PromptPair a =
        assemble_prompts(sections, action, outfit, "lime dotted top", GarmentCategory::upper, bank);
    const PromptPair b =
        assemble_prompts(sections, action, outfit, "lime dotted top", GarmentCategory::upper, bank);
    CHECK(a.positive == b.positive);
    CHECK(a.negative == b.negative);
}

TEST_CASE("description bank file round trip and validation") {
    const DescriptionBank bank = DescriptionBank::builtin();
    const fs::path path = fs::temp_directory_path() / "tryflow_bank_test.txt";
    bank.save(path);
    const DescriptionBank back = DescriptionBank::load(path);
    CHECK(back.outfits.at(GarmentCategory::upper) == bank.outfits.at(GarmentCategory::upper));
    CHECK(back.actions.at(GarmentCategory::dress) == bank.actions.at(GarmentCategory::dress));
    CHECK(back.accessories == bank.accessories);
    fs::remove(path);

    DescriptionBank bad = bank;
    bad.outfits[GarmentCategory::upper].push_back("wearing a red shirt");
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("dedup drops exact duplicates and keeps orthogonal features") {
    Eigen::MatrixXd dup(3, 4);
    dup << 1, 2, 3, 4, 1, 2, 3, 4, 4, 3, 2, 1;
    const auto kept = dedup_by_features(dup, 1.0);
    CHECK(kept == std::vector<int>{0, 2});

    Eigen::MatrixXd ortho = Eigen::MatrixXd::Identity(2, 2);
    CHECK(dedup_by_features(ortho, 0.95) == std::vector<int>{0, 1});

    Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(2, 3);
    zero.row(0) << 1, 0, 0;
    CHECK_THROWS_WITH_AS(dedup_by_features(zero, 0.9), doctest::Contains("1"),
                         std::invalid_argument);
    CHECK_THROWS_AS(dedup_by_features(ortho, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(dedup_by_features(ortho, 1.5), std::invalid_argument);
}

TEST_CASE("dedup matches a brute-force greedy oracle and ignores feature scale") {
    Rng rng(41);
    Eigen::MatrixXd f(50, 8);
    for (int i = 0; i < 50; ++i) {
        // Clustered rows so some similarities exceed the threshold.
        const int cluster = rng.uniform_int(6);
        for (int j = 0; j < 8; ++j) f(i, j) = (j % 6 == cluster ? 2.0 : 0.0) + 0.2 * rng.normal();
    }
    const double threshold = 0.9;
    const auto kept = dedup_by_features(f, threshold);

    // Independent pairwise-cosine greedy scan.
    std::vector<int> oracle;
    for (int i = 0; i < 50; ++i) {
        bool dup = false;
        for (int j : oracle) {
            const double cos = f.row(i).dot(f.row(j)) / (f.row(i).norm() * f.row(j).norm());
            if (cos >= threshold) {
                dup = true;
                break;
            }
        }
        if (!dup) oracle.push_back(i);
    }
    CHECK(kept == oracle);
    CHECK(oracle.size() < 50);  // the clusters actually collide

    CHECK(dedup_by_features(3.0 * f, threshold) == kept);
}

TEST_CASE("quality filter keeps all-pass items and names the failed predicate") {
    std::vector<RefItem> items(3);
    items[0].id = 10;
    items[0].image = Image(8, 8, 3, 0.2f);
    items[0].image.at(0, 0, 0) = 0.9f;
    items[1].id = 11;
    items[1].image = items[0].image;
    items[1].tags["facing"] = "back";
    items[2].id = 12;
    items[2].image = items[0].image;

    const auto preds = default_quality_predicates();
    const FilterResult res = quality_filter(items, preds);
    CHECK(res.kept == std::vector<int>{10, 12});
    REQUIRE(res.rejections.size() == 1);
    CHECK(res.rejections[0].first == 11);
    CHECK(res.rejections[0].second == "front_facing");

    // Conjunction order does not change the kept set.
    auto reversed = preds;
    std::reverse(reversed.begin(), reversed.end());
    CHECK(quality_filter(items, reversed).kept == res.kept);

    std::vector<QualityPredicate> all_pass = {
        {"always", [](const RefItem&) { return true; }}};
    CHECK(quality_filter(items, all_pass).kept == std::vector<int>{10, 11, 12});
}

TEST_CASE("generate_reference_set produces one kept reference per surviving garment") {
    const fs::path out = fs::temp_directory_path() / "tryflow_refset_test";
    fs::remove_all(out);
    const auto data = small_dataset(6, 71);
    SynthEditor editor(data);
    TemplateDescriber describer;
    const DescriptionBank bank = DescriptionBank::builtin();
    Rng rng(5);
    const auto result = generate_reference_set(data, editor, describer, bank, rng, out, 0.95);
    REQUIRE(result.manifest.size() == data.size());
    CHECK(result.kept_ids.size() >= 4);  // distinct garments rarely collide
    for (int id : result.kept_ids) {
        CHECK(fs::exists(out / ("ref_" + std::to_string(id) + ".png")));
        // Requirement 1: the reference keeps the flat cloth's hue.
        const Image ref = read_png(out / ("ref_" + std::to_string(id) + ".png"));
        const auto& rec = data[static_cast<size_t>(id)];
        const auto ref_hue = dominant_hue(ref, garment_rect(rec.garment, 32));
        const auto cloth_hue = dominant_hue(rec.cloth, Rect{0, 0, 32, 32});
        REQUIRE(ref_hue.has_value());
        REQUIRE(cloth_hue.has_value());
        CHECK(hue_distance(*ref_hue, *cloth_hue) <= 0.05f);
    }

    // Rerun with the same seed reproduces the manifest.
    const fs::path out2 = fs::temp_directory_path() / "tryflow_refset_test2";
    fs::remove_all(out2);
    Rng rng2(5);
    const auto result2 = generate_reference_set(data, editor, describer, bank, rng2, out2, 0.95);
    for (size_t i = 0; i < result.manifest.size(); ++i) {
        // Paths differ by directory; compare the id/status columns.
        const auto tail = [](const std::string& s) {
            return s.substr(0, s.find(", ")) + s.substr(s.rfind(", "));
        };
        CHECK(tail(result.manifest[i]) == tail(result2.manifest[i]));
    }
    fs::remove_all(out);
    fs::remove_all(out2);
}

TEST_CASE("editor failures drop the record but the pipeline continues") {
    class FailingEditor : public EditorInterface {
    public:
        explicit FailingEditor(const std::vector<DatasetRecord>& recs) : inner_(recs) {}
        Image edit(int item_id, const Image& img, const PromptPair& p, uint64_t seed) override {
            if (item_id == 1) throw std::runtime_error("synthetic editor outage");
            return inner_.edit(item_id, img, p, seed);
        }

    private:
        SynthEditor inner_;
    };
    const fs::path out = fs::temp_directory_path() / "tryflow_refset_fail";
    fs::remove_all(out);
    const auto data = small_dataset(4, 72);
    FailingEditor editor(data);
    TemplateDescriber describer;
    Rng rng(6);
    const auto result =
        generate_reference_set(data, editor, describer, DescriptionBank::builtin(), rng, out, 0.95);
    REQUIRE(result.manifest.size() == 4);
    CHECK(result.manifest[1].find("dropped, editor_error") != std::string::npos);
    CHECK(result.manifest[1].find("synthetic editor outage") != std::string::npos);
    // Other records still went through.
    int kept = 0;
    for (const auto& line : result.manifest)
        if (line.find(", kept, ok") != std::string::npos) ++kept;
    CHECK(kept >= 2);
    fs::remove_all(out);
}

TEST_CASE("requirement 3: reference fillers never match the target's neutral filler") {
    Rng rng(73);
    const PersonParams person = sample_person(rng, 32);
    const GarmentParams upper = sample_garment(rng, GarmentCategory::upper, 0.0);
    const GarmentParams neutral = neutral_filler(GarmentCategory::upper);
    for (int i = 0; i < 20; ++i) {
        const ReferenceResult ref = make_reference(upper, person, rng);
        CHECK(ref.filler.category == GarmentCategory::lower);
        CHECK(ref.filler.base_color != neutral.base_color);
    }
}

TEST_CASE("line protocol round trips through a local socket") {
    ProtocolServer server;
    const fs::path scratch = fs::temp_directory_path() / "tryflow_proto_test";
    fs::create_directories(scratch);

    const int port = server.start([&](const std::string& line) -> std::string {
        const auto req = nlohmann::json::parse(line);
        if (req.at("op") == "describe")
            return nlohmann::json{{"text", "Positive: a. Negative: b."}}.dump();
        // Edit: write a constant image next to the input and return its path.
        const std::string in = req.at("image_path");
        const Image img = read_png(in);
        Image out(img.height, img.width, 3, 0.25f);
        const std::string out_path = (scratch / "served.png").string();
        write_png(out_path, out);
        if (req.at("positive").get<std::string>().empty())
            return nlohmann::json{{"error", "empty prompt"}}.dump();
        return nlohmann::json{{"image_path", out_path}}.dump();
    });

    ExternalDescriber describer("127.0.0.1", port, scratch);
    const std::string text = describer.describe(Image(8, 8, 3, 0.5f), "whatever");
    CHECK(text == "Positive: a. Negative: b.");

    ExternalEditor editor("127.0.0.1", port, scratch);
    PromptPair prompts{"do it", "not this"};
    const Image edited = editor.edit(3, Image(8, 8, 3, 0.5f), prompts, 42);
    CHECK(edited.height == 8);
    CHECK(edited.at(4, 4, 0) == doctest::Approx(std::lround(0.25 * 255) / 255.0).epsilon(1e-6));

    PromptPair empty{"", "x"};
    CHECK_THROWS_WITH_AS(editor.edit(4, Image(8, 8, 3, 0.5f), empty, 1),
                         doctest::Contains("empty prompt"), std::runtime_error);

    server.stop();
    fs::remove_all(scratch);
}
