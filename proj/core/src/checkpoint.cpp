#include "tryflow/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "tryflow/config.hpp"

namespace tryflow {

namespace {

std::string attached_targets(const ModelParams<float>& p) {
    if (p.blocks.empty()) return "none";
    std::string s;
    const auto& b = p.blocks.front();
    if (b.lora_q) s += "q,";
    if (b.lora_k) s += "k,";
    if (b.lora_v) s += "v,";
    if (b.lora_o) s += "out,";
    if (s.empty()) return "none";
    s.pop_back();
    return s;
}

}  // namespace

void checkpoint_save(const ModelParams<float>& params, const std::filesystem::path& stem,
                     long step) {
    struct Entry {
        std::string name;
        Eigen::Index rows, cols;
        uint64_t offset;
        const float* data;
    };
    std::vector<Entry> entries;
    uint64_t offset = 0;
    visit_tensors<float>(const_cast<ModelParams<float>&>(params),
                         [&](const std::string& name, float* data, Eigen::Index r, Eigen::Index c) {
                             entries.push_back({name, r, c, offset, data});
                             offset += static_cast<uint64_t>(r) * c * sizeof(float);
                         });

    std::filesystem::path manifest_path = stem;
    manifest_path += ".manifest";
    std::filesystem::path blob_path = stem;
    blob_path += ".blob";

    std::ofstream manifest(manifest_path);
    if (!manifest) throw std::runtime_error("checkpoint_save: cannot write " + manifest_path.string());
    const auto& cfg = params.config;
    manifest << "tryflow-checkpoint v1\n";
    manifest << "step = " << step << "\n";
    manifest << "patch_size = " << cfg.patch_size << "\n";
    manifest << "width = " << cfg.width << "\n";
    manifest << "depth = " << cfg.depth << "\n";
    manifest << "heads = " << cfg.heads << "\n";
    manifest << "time_embed_dim = " << cfg.time_embed_dim << "\n";
    manifest << "lora_rank = " << cfg.lora_rank << "\n";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", cfg.lora_alpha);
    manifest << "lora_alpha = " << buf << "\n";
    manifest << "image_channels = " << cfg.image_channels << "\n";
    manifest << "slot1_extra_channels = " << cfg.slot1_extra_channels << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", cfg.rope_base);
    manifest << "rope_base = " << buf << "\n";
    manifest << "lora_attached = " << attached_targets(params) << "\n";
    manifest << "tensors = " << entries.size() << "\n";
    manifest << "blob_bytes = " << offset << "\n";
    manifest << "---\n";
    for (const auto& e : entries)
        manifest << e.name << " " << e.rows << " " << e.cols << " " << e.offset << "\n";
    manifest.close();

    std::ofstream blob(blob_path, std::ios::binary);
    if (!blob) throw std::runtime_error("checkpoint_save: cannot write " + blob_path.string());
    for (const auto& e : entries)
        blob.write(reinterpret_cast<const char*>(e.data),
                   static_cast<std::streamsize>(static_cast<uint64_t>(e.rows) * e.cols * sizeof(float)));
}

ModelParams<float> checkpoint_load(const std::filesystem::path& stem, long* step) {
    std::filesystem::path manifest_path = stem;
    manifest_path += ".manifest";
    std::filesystem::path blob_path = stem;
    blob_path += ".blob";

    std::ifstream manifest(manifest_path);
    if (!manifest) throw std::runtime_error("checkpoint_load: cannot read " + manifest_path.string());
    std::string line;
    if (!std::getline(manifest, line) || line != "tryflow-checkpoint v1")
        throw std::runtime_error("checkpoint_load: bad magic in " + manifest_path.string());

    std::string header;
    while (std::getline(manifest, line)) {
        if (line == "---") break;
        header += line + "\n";
    }
    RunConfig hc = RunConfig::parse(header);

    ModelConfig cfg;
    cfg.patch_size = static_cast<int>(hc.get_int("patch_size"));
    cfg.width = static_cast<int>(hc.get_int("width"));
    cfg.depth = static_cast<int>(hc.get_int("depth"));
    cfg.heads = static_cast<int>(hc.get_int("heads"));
    cfg.time_embed_dim = static_cast<int>(hc.get_int("time_embed_dim"));
    cfg.lora_rank = static_cast<int>(hc.get_int("lora_rank"));
    cfg.lora_alpha = hc.get_double("lora_alpha");
    cfg.image_channels = static_cast<int>(hc.get_int("image_channels"));
    cfg.slot1_extra_channels = static_cast<int>(hc.get_int("slot1_extra_channels"));
    cfg.rope_base = hc.get_double("rope_base");
    if (step) *step = hc.get_int("step");

    Rng dummy(0);
    ModelParams<float> params = init_model<float>(cfg, dummy);
    const std::string attached = hc.get("lora_attached");
    if (attached != "none") {
        std::vector<std::string> targets;
        std::stringstream ss(attached);
        std::string tok;
        while (std::getline(ss, tok, ',')) targets.push_back(tok);
        attach_lora(params, targets, dummy);
    }

    struct Want {
        std::string name;
        Eigen::Index rows, cols;
        uint64_t offset;
        float* data;
    };
    std::vector<Want> wants;
    uint64_t expect_offset = 0;
    visit_tensors<float>(params, [&](const std::string& name, float* data, Eigen::Index r,
                                     Eigen::Index c) {
        wants.push_back({name, r, c, expect_offset, data});
        expect_offset += static_cast<uint64_t>(r) * c * sizeof(float);
    });

    const size_t declared = static_cast<size_t>(hc.get_int("tensors"));
    if (declared != wants.size())
        throw std::runtime_error("checkpoint_load: manifest lists " + std::to_string(declared) +
                                 " tensors but the model has " + std::to_string(wants.size()));

    size_t i = 0;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        if (i >= wants.size()) throw std::runtime_error("checkpoint_load: extra tensor line: " + line);
        std::istringstream ls(line);
        std::string name;
        Eigen::Index rows, cols;
        uint64_t off;
        if (!(ls >> name >> rows >> cols >> off))
            throw std::runtime_error("checkpoint_load: malformed tensor line: " + line);
        const auto& w = wants[i];
        if (name != w.name || rows != w.rows || cols != w.cols || off != w.offset)
            throw std::runtime_error("checkpoint_load: tensor '" + name +
                                     "' does not match the expected layout (" + w.name + ")");
        ++i;
    }
    if (i != wants.size())
        throw std::runtime_error("checkpoint_load: manifest ended early at tensor index " +
                                 std::to_string(i));

    std::ifstream blob(blob_path, std::ios::binary);
    if (!blob) throw std::runtime_error("checkpoint_load: cannot read " + blob_path.string());
    blob.seekg(0, std::ios::end);
    const uint64_t blob_size = static_cast<uint64_t>(blob.tellg());
    const uint64_t declared_bytes = static_cast<uint64_t>(hc.get_int("blob_bytes"));
    if (blob_size != declared_bytes || blob_size != expect_offset) {
        // Name the first tensor whose data the truncated blob cannot supply.
        std::string victim = wants.empty() ? "<none>" : wants.back().name;
        for (const auto& w : wants)
            if (w.offset + static_cast<uint64_t>(w.rows) * w.cols * sizeof(float) > blob_size) {
                victim = w.name;
                break;
            }
        throw std::runtime_error("checkpoint_load: blob is " + std::to_string(blob_size) +
                                 " bytes, expected " + std::to_string(expect_offset) +
                                 "; tensor '" + victim + "' is incomplete");
    }
    blob.seekg(0);
    for (const auto& w : wants)
        blob.read(reinterpret_cast<char*>(w.data),
                  static_cast<std::streamsize>(static_cast<uint64_t>(w.rows) * w.cols * sizeof(float)));
    if (!blob) throw std::runtime_error("checkpoint_load: short read from " + blob_path.string());
    return params;
}

}  // namespace tryflow
