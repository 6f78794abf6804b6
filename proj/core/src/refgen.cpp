#include "tryflow/refgen.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "tryflow/png_io.hpp"

namespace tryflow {

namespace {

const char* kSkinWords[6] = {"porcelain", "fair", "tan", "bronze", "brown", "deep"};
const char* kHairWords[6] = {"black", "brown", "blonde", "red", "gray", "blue"};

const std::array<std::array<float, 3>, 6> kSkinSwatches = {{{0.98f, 0.86f, 0.76f},
                                                            {0.93f, 0.78f, 0.66f},
                                                            {0.85f, 0.64f, 0.48f},
                                                            {0.72f, 0.51f, 0.36f},
                                                            {0.55f, 0.37f, 0.26f},
                                                            {0.40f, 0.26f, 0.18f}}};
const std::array<std::array<float, 3>, 6> kHairSwatches = {{{0.08f, 0.07f, 0.07f},
                                                            {0.35f, 0.22f, 0.10f},
                                                            {0.85f, 0.72f, 0.35f},
                                                            {0.62f, 0.25f, 0.12f},
                                                            {0.55f, 0.55f, 0.58f},
                                                            {0.20f, 0.30f, 0.65f}}};

int nearest_swatch(const std::array<std::array<float, 3>, 6>& palette, float r, float g, float b) {
    int best = 0;
    float best_d = 1e9f;
    for (int i = 0; i < 6; ++i) {
        const float d = (palette[i][0] - r) * (palette[i][0] - r) +
                        (palette[i][1] - g) * (palette[i][1] - g) +
                        (palette[i][2] - b) * (palette[i][2] - b);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

// Involutions pairing each palette entry with a visually distant one.
int opposite_skin(int i) { return 5 - i; }
int opposite_hair(int i) {
    static const int opp[6] = {2, 4, 0, 5, 1, 3};
    return opp[i];
}

}  // namespace

std::string TemplateDescriber::describe(const Image& image, const std::string& instruction) {
    (void)instruction;
    if (image.channels != 3 || image.height < 8 || image.width < 16)
        throw std::invalid_argument("TemplateDescriber: unexpected image shape");
    const int s = image.height / 32;
    // Face center and hair band of the standard body layout.
    const int fy = 4 * std::max(1, s), fx = 15 * std::max(1, s);
    const int hy = 1 * std::max(1, s) + (s > 1 ? 1 : 0), hx = 15 * std::max(1, s);
    const int skin = nearest_swatch(kSkinSwatches, image.at(fy, fx, 0), image.at(fy, fx, 1),
                                    image.at(fy, fx, 2));
    const int hair = nearest_swatch(kHairSwatches, image.at(hy, hx, 0), image.at(hy, hx, 1),
                                    image.at(hy, hx, 2));
    std::ostringstream os;
    os << "Positive: the model has " << kSkinWords[skin] << " skin and " << kHairWords[hair]
       << " hair with a neutral expression. ";
    os << "Negative: the model has " << kSkinWords[opposite_skin(skin)] << " skin and "
       << kHairWords[opposite_hair(hair)] << " hair with a cheerful expression.";
    return os.str();
}

Image SynthEditor::edit(int item_id, const Image& image, const PromptPair& prompts,
                        uint64_t seed) {
    (void)image;
    (void)prompts;
    if (item_id < 0 || static_cast<size_t>(item_id) >= records_->size())
        throw std::out_of_range("SynthEditor: unknown item id " + std::to_string(item_id));
    const DatasetRecord& rec = (*records_)[static_cast<size_t>(item_id)];
    Rng rng(seed);
    return make_reference(rec.garment, rec.person, rng).image;
}

// ---------------------------------------------------------------------------
// Socket protocol

namespace {

int connect_to(const std::string& host, int port) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw std::runtime_error("protocol: socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<uint16_t>(port));
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        ::close(fd);
        throw std::runtime_error("protocol: bad host " + host);
    }
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        ::close(fd);
        throw std::runtime_error("protocol: cannot connect to " + host + ":" +
                                 std::to_string(port));
    }
    return fd;
}

void send_all(int fd, const std::string& data) {
    size_t off = 0;
    while (off < data.size()) {
        const ssize_t n = ::send(fd, data.data() + off, data.size() - off, 0);
        if (n <= 0) throw std::runtime_error("protocol: send failed");
        off += static_cast<size_t>(n);
    }
}

std::string recv_line(int fd) {
    std::string line;
    char c;
    while (true) {
        const ssize_t n = ::recv(fd, &c, 1, 0);
        if (n <= 0) throw std::runtime_error("protocol: connection closed before newline");
        if (c == '\n') break;
        line.push_back(c);
        if (line.size() > (1u << 22))
            throw std::runtime_error("protocol: response line too long");
    }
    return line;
}

}  // namespace

std::string ProtocolClient::request_line(const std::string& line) const {
    const int fd = connect_to(host_, port_);
    try {
        send_all(fd, line + "\n");
        std::string resp = recv_line(fd);
        ::close(fd);
        return resp;
    } catch (...) {
        ::close(fd);
        throw;
    }
}

ExternalEditor::ExternalEditor(std::string host, int port, std::filesystem::path scratch_dir)
    : client_(std::move(host), port), scratch_(std::move(scratch_dir)) {
    std::filesystem::create_directories(scratch_);
}

Image ExternalEditor::edit(int item_id, const Image& image, const PromptPair& prompts,
                           uint64_t seed) {
    const std::filesystem::path in_path =
        scratch_ / ("edit_in_" + std::to_string(item_id) + ".png");
    write_png(in_path, image);
    nlohmann::json req = {{"op", "edit"},
                          {"image_path", in_path.string()},
                          {"positive", prompts.positive},
                          {"negative", prompts.negative},
                          {"seed", seed}};
    nlohmann::json resp = nlohmann::json::parse(client_.request_line(req.dump()));
    if (resp.contains("error"))
        throw std::runtime_error("external editor: " + resp["error"].get<std::string>());
    return read_png(resp.at("image_path").get<std::string>());
}

ExternalDescriber::ExternalDescriber(std::string host, int port, std::filesystem::path scratch_dir)
    : client_(std::move(host), port), scratch_(std::move(scratch_dir)) {
    std::filesystem::create_directories(scratch_);
}

std::string ExternalDescriber::describe(const Image& image, const std::string& instruction) {
    const std::filesystem::path in_path = scratch_ / "describe_in.png";
    write_png(in_path, image);
    nlohmann::json req = {
        {"op", "describe"}, {"image_path", in_path.string()}, {"instruction", instruction}};
    nlohmann::json resp = nlohmann::json::parse(client_.request_line(req.dump()));
    if (resp.contains("error"))
        throw std::runtime_error("external describer: " + resp["error"].get<std::string>());
    return resp.at("text").get<std::string>();
}

ProtocolServer::~ProtocolServer() { stop(); }

int ProtocolServer::start(Handler handler) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw std::runtime_error("ProtocolServer: socket() failed");
    int yes = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
        ::listen(listen_fd_, 8) != 0) {
        ::close(listen_fd_);
        throw std::runtime_error("ProtocolServer: bind/listen failed");
    }
    socklen_t len = sizeof(addr);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    worker_ = std::thread([this, handler = std::move(handler)]() {
        while (!stopping_.load()) {
            const int conn = ::accept(listen_fd_, nullptr, nullptr);
            if (conn < 0) break;
            try {
                const std::string line = recv_line(conn);
                send_all(conn, handler(line) + "\n");
            } catch (...) {
                // Drop the connection; clients see a closed socket.
            }
            ::close(conn);
        }
    });
    return port_;
}

void ProtocolServer::stop() {
    if (listen_fd_ < 0) return;
    stopping_.store(true);
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    listen_fd_ = -1;
    if (worker_.joinable()) worker_.join();
}

// ---------------------------------------------------------------------------
// Description bank

DescriptionBank DescriptionBank::builtin() {
    DescriptionBank bank;
    bank.outfits[GarmentCategory::upper] = {
        "wearing plain dark trousers",
        "wearing a pleated navy skirt",
        "wearing loose khaki shorts",
        "wearing slim charcoal pants",
    };
    bank.outfits[GarmentCategory::lower] = {
        "wearing a crisp white blouse",
        "wearing a soft gray hoodie",
        "wearing a fitted black tee",
        "wearing a simple beige sweater",
    };
    bank.outfits[GarmentCategory::dress] = {
        "wearing a cropped denim jacket",
        "carrying a small leather handbag",
        "wearing strappy flat sandals",
        "wearing ankle boots",
    };
    bank.actions[GarmentCategory::upper] = {
        "standing with arms relaxed",
        "posing with one hand on the hip",
        "mid-stride walking pose",
    };
    bank.actions[GarmentCategory::lower] = {
        "standing straight facing the camera",
        "leaning slightly to one side",
        "mid-stride walking pose",
    };
    bank.actions[GarmentCategory::dress] = {
        "standing with arms relaxed",
        "turning slightly with a soft pose",
        "posing with hands clasped",
    };
    bank.accessories = {
        "wearing thin silver bracelets",
        "wearing round glasses",
        "wearing a small wristwatch",
    };
    bank.validate();
    return bank;
}

namespace {

const std::vector<std::string>& category_garment_words(GarmentCategory c) {
    static const std::vector<std::string> upper = {"shirt", "blouse", "tee",    "top",
                                                   "hoodie", "sweater", "t-shirt"};
    static const std::vector<std::string> lower = {"trousers", "skirt", "shorts",
                                                   "pants",    "jeans", "leggings"};
    static const std::vector<std::string> dress = {"dress", "gown"};
    switch (c) {
        case GarmentCategory::upper:
            return upper;
        case GarmentCategory::lower:
            return lower;
        case GarmentCategory::dress:
        default:
            return dress;
    }
}

std::string lower_copy(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

}  // namespace

void DescriptionBank::validate() const {
    for (const auto& [cat, entries] : outfits) {
        for (const auto& entry : entries) {
            const std::string low = lower_copy(entry);
            for (const auto& word : category_garment_words(cat))
                if (low.find(word) != std::string::npos)
                    throw std::invalid_argument("DescriptionBank: outfit entry for category " +
                                                std::string(category_name(cat)) +
                                                " describes that garment itself: " + entry);
        }
    }
}

void DescriptionBank::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("DescriptionBank: cannot write " + path.string());
    for (GarmentCategory c :
         {GarmentCategory::upper, GarmentCategory::lower, GarmentCategory::dress}) {
        out << "[" << category_name(c) << ".outfits]\n";
        if (auto it = outfits.find(c); it != outfits.end())
            for (const auto& e : it->second) out << e << "\n";
        out << "[" << category_name(c) << ".actions]\n";
        if (auto it = actions.find(c); it != actions.end())
            for (const auto& e : it->second) out << e << "\n";
    }
    out << "[accessories]\n";
    for (const auto& e : accessories) out << e << "\n";
}

DescriptionBank DescriptionBank::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("DescriptionBank: cannot read " + path.string());
    DescriptionBank bank;
    std::string line, section;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (line.front() == '[' && line.back() == ']') {
            section = line.substr(1, line.size() - 2);
            continue;
        }
        if (section == "accessories") {
            bank.accessories.push_back(line);
            continue;
        }
        const size_t dot = section.find('.');
        if (dot == std::string::npos)
            throw std::invalid_argument("DescriptionBank: entry before a section header: " + line);
        const GarmentCategory cat = category_from_name(section.substr(0, dot));
        const std::string kind = section.substr(dot + 1);
        if (kind == "outfits")
            bank.outfits[cat].push_back(line);
        else if (kind == "actions")
            bank.actions[cat].push_back(line);
        else
            throw std::invalid_argument("DescriptionBank: unknown section " + section);
    }
    bank.validate();
    return bank;
}

// ---------------------------------------------------------------------------

DescribeParseError::DescribeParseError(const std::string& msg, std::string raw_text)
    : std::runtime_error(msg + "; raw output: " + raw_text), raw(std::move(raw_text)) {}

AppearanceSections describe_appearance(const Image& image, DescriberInterface& describer) {
    const std::string instruction =
        "Start with Positive: describe only the model's skin, hair and expression, then give the "
        "opposite in one sentence with Negative: changing those traits.";
    const std::string raw = describer.describe(image, instruction);
    const size_t pos = raw.find("Positive:");
    const size_t neg = raw.find("Negative:");
    if (pos == std::string::npos)
        throw DescribeParseError("describe_appearance: missing 'Positive:' marker", raw);
    if (neg == std::string::npos || neg < pos)
        throw DescribeParseError("describe_appearance: missing 'Negative:' marker", raw);
    auto trim = [](std::string s) {
        const size_t b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return std::string();
        const size_t e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    };
    AppearanceSections out;
    out.positive = trim(raw.substr(pos + 9, neg - (pos + 9)));
    out.negative = trim(raw.substr(neg + 9));
    if (out.positive.empty() || out.negative.empty())
        throw DescribeParseError("describe_appearance: empty section", raw);
    return out;
}

std::string garment_display_name(const GarmentParams& garment) {
    static const char* hue_names[8] = {"red",  "amber", "lime",   "green",
                                       "teal", "azure", "violet", "magenta"};
    static const char* pattern_names[4] = {"solid", "striped", "dotted", "logo"};
    const Hsv hsv = rgb_to_hsv(garment.base_color[0], garment.base_color[1], garment.base_color[2]);
    int idx = static_cast<int>(std::lround(hsv.h * 8.0)) % 8;
    if (idx < 0) idx += 8;
    const char* noun = garment.category == GarmentCategory::upper   ? "top"
                       : garment.category == GarmentCategory::lower ? "skirt"
                                                                    : "dress";
    std::ostringstream os;
    os << hue_names[idx] << " " << pattern_names[garment.pattern] << " " << noun;
    return os.str();
}

PromptPair assemble_prompts(const AppearanceSections& appearance, const std::string& action,
                            const std::string& outfit, const std::string& garment_name,
                            GarmentCategory category, const DescriptionBank& bank) {
    const auto it = bank.outfits.find(category);
    const bool known = it != bank.outfits.end() &&
                       std::find(it->second.begin(), it->second.end(), outfit) != it->second.end();
    if (!outfit.empty() && !known) {
        // Reject outfits drawn from another category's bank.
        for (const auto& [other, entries] : bank.outfits) {
            if (other == category) continue;
            if (std::find(entries.begin(), entries.end(), outfit) != entries.end())
                throw std::invalid_argument("assemble_prompts: outfit '" + outfit +
                                            "' belongs to the " +
                                            std::string(category_name(other)) + " bank");
        }
        throw std::invalid_argument("assemble_prompts: outfit '" + outfit +
                                    "' is not in the bank for category " + category_name(category));
    }
    PromptPair pair;
    std::vector<std::string> parts;
    if (!appearance.negative.empty()) parts.push_back(appearance.negative);
    if (!action.empty()) parts.push_back(action);
    if (!outfit.empty()) parts.push_back(outfit);
    parts.push_back("keep the " + garment_name + " cloth unchanged");
    std::string pos;
    for (size_t i = 0; i < parts.size(); ++i) {
        if (i) pos += ", ";
        pos += parts[i];
    }
    pair.positive = pos;
    pair.negative = appearance.positive;
    return pair;
}

std::vector<int> dedup_by_features(const Eigen::MatrixXd& features, double threshold) {
    if (!(threshold > 0.0 && threshold <= 1.0))
        throw std::invalid_argument("dedup_by_features: threshold must lie in (0, 1]");
    std::vector<int> kept;
    std::vector<Eigen::VectorXd> units;
    for (long i = 0; i < features.rows(); ++i) {
        Eigen::VectorXd v = features.row(i);
        const double norm = v.norm();
        if (norm < 1e-12)
            throw std::invalid_argument("dedup_by_features: zero-norm feature at item " +
                                        std::to_string(i));
        v /= norm;
        bool duplicate = false;
        // Unit-vector self products round to just under 1, so identical
        // features must still count as duplicates at threshold 1.
        for (const auto& u : units)
            if (u.dot(v) >= threshold - 1e-12) {
                duplicate = true;
                break;
            }
        if (!duplicate) {
            kept.push_back(static_cast<int>(i));
            units.push_back(std::move(v));
        }
    }
    return kept;
}

FilterResult quality_filter(const std::vector<RefItem>& items,
                            const std::vector<QualityPredicate>& predicates) {
    FilterResult out;
    for (const auto& item : items) {
        bool ok = true;
        for (const auto& [name, pred] : predicates) {
            if (!pred(item)) {
                out.rejections.push_back({item.id, name});
                ok = false;
                break;
            }
        }
        if (ok) out.kept.push_back(item.id);
    }
    return out;
}

std::vector<QualityPredicate> default_quality_predicates() {
    return {
        {"finite", [](const RefItem& it) { return !has_non_finite(it.image); }},
        {"nonblank",
         [](const RefItem& it) {
             float lo = 1e9f, hi = -1e9f;
             for (float v : it.image.data) {
                 lo = std::min(lo, v);
                 hi = std::max(hi, v);
             }
             return hi - lo > 0.05f;
         }},
        {"front_facing",
         [](const RefItem& it) {
             const auto f = it.tags.find("facing");
             return f == it.tags.end() || f->second != "back";
         }},
    };
}

Eigen::MatrixXd patch_histogram_features(const std::vector<Image>& images, uint64_t seed) {
    constexpr int kCells = 4;
    constexpr int kHueBins = 8;
    constexpr int kOut = 32;
    const int raw_dim = kCells * kCells * 3 + kHueBins;
    Rng rng(seed);
    Eigen::MatrixXd proj(kOut, raw_dim);
    for (int i = 0; i < kOut; ++i)
        for (int j = 0; j < raw_dim; ++j)
            proj(i, j) = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(raw_dim)));

    Eigen::MatrixXd out(static_cast<long>(images.size()), kOut);
    for (size_t n = 0; n < images.size(); ++n) {
        const Image& img = images[n];
        Eigen::VectorXd raw = Eigen::VectorXd::Zero(raw_dim);
        const auto global = region_mean(img, Rect{0, 0, img.height, img.width});
        for (int cy = 0; cy < kCells; ++cy)
            for (int cx = 0; cx < kCells; ++cx) {
                const Rect cell{cy * img.height / kCells, cx * img.width / kCells,
                                (cy + 1) * img.height / kCells, (cx + 1) * img.width / kCells};
                const auto mean = region_mean(img, cell);
                // Deviations from the global mean so the shared background
                // does not dominate the cosine similarity.
                for (int c = 0; c < 3; ++c)
                    raw((cy * kCells + cx) * 3 + c) = mean[c] - global[c];
            }
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                const Hsv hsv = rgb_to_hsv(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
                if (hsv.s < 0.2f) continue;
                int bin = static_cast<int>(hsv.h * kHueBins);
                if (bin >= kHueBins) bin = kHueBins - 1;
                raw(kCells * kCells * 3 + bin) += 1.0 / (img.height * img.width);
            }
        out.row(static_cast<long>(n)) = (proj * raw).transpose();
    }
    return out;
}

ReferenceSetResult generate_reference_set(const std::vector<DatasetRecord>& records,
                                          EditorInterface& editor, DescriberInterface& describer,
                                          const DescriptionBank& bank, Rng& rng,
                                          const std::filesystem::path& out_dir,
                                          double dedup_threshold) {
    std::filesystem::create_directories(out_dir);
    ReferenceSetResult result;
    std::vector<RefItem> items;
    std::vector<std::string> failures(records.size());

    for (size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        Rng item_rng = rng.fork(static_cast<uint64_t>(rec.idx));
        try {
            const AppearanceSections sections = describe_appearance(rec.target, describer);
            const auto& actions = bank.actions.at(rec.category);
            const auto& outfits = bank.outfits.at(rec.category);
            const std::string action =
                actions[static_cast<size_t>(item_rng.uniform_int(static_cast<int>(actions.size())))];
            const std::string outfit =
                outfits[static_cast<size_t>(item_rng.uniform_int(static_cast<int>(outfits.size())))];
            const PromptPair prompts = assemble_prompts(
                sections, action, outfit, garment_display_name(rec.garment), rec.category, bank);
            RefItem item;
            item.id = rec.idx;
            item.image = editor.edit(rec.idx, rec.target, prompts, item_rng.next_u64());
            items.push_back(std::move(item));
        } catch (const std::exception& e) {
            failures[i] = e.what();
        }
    }

    std::vector<Image> images;
    for (const auto& it : items) images.push_back(it.image);
    const Eigen::MatrixXd features = patch_histogram_features(images);
    const std::vector<int> kept_rows = dedup_by_features(features, dedup_threshold);
    std::vector<bool> row_kept(items.size(), false);
    for (int r : kept_rows) row_kept[static_cast<size_t>(r)] = true;

    std::map<int, std::string> status;  // record idx -> reason ("" = kept so far)
    std::vector<RefItem> survivors;
    for (size_t r = 0; r < items.size(); ++r) {
        if (row_kept[r])
            survivors.push_back(items[r]);
        else
            status[items[r].id] = "duplicate";
    }
    const FilterResult filtered = quality_filter(survivors, default_quality_predicates());
    for (const auto& [id, pred] : filtered.rejections) status[id] = "failed:" + pred;

    std::map<int, const RefItem*> by_id;
    for (const auto& it : survivors) by_id[it.id] = &it;

    for (size_t i = 0; i < records.size(); ++i) {
        const int id = records[i].idx;
        std::ostringstream line;
        if (!failures[i].empty()) {
            line << id << ", -, dropped, editor_error:" << failures[i];
        } else if (status.count(id)) {
            line << id << ", -, dropped, " << status[id];
        } else {
            const std::filesystem::path path = out_dir / ("ref_" + std::to_string(id) + ".png");
            write_png(path, by_id.at(id)->image);
            line << id << ", " << path.string() << ", kept, ok";
            result.kept_ids.push_back(id);
        }
        result.manifest.push_back(line.str());
    }

    std::ofstream mf(out_dir / "pairs_manifest.txt");
    if (!mf)
        throw std::runtime_error("generate_reference_set: cannot write manifest under " +
                                 out_dir.string());
    for (const auto& line : result.manifest) mf << line << "\n";
    return result;
}

}  // namespace tryflow
