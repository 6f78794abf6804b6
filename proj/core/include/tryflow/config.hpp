#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <vector>

namespace tryflow {

// Line-oriented `key = value` configuration with `[section]` headers.
// Keys are stored fully qualified as "section.key" ("" section = bare key).
// Insertion order is preserved so snapshots serialize deterministically.
class RunConfig {
public:
    void set(const std::string& key, const std::string& value);
    void set_int(const std::string& key, long long v);
    void set_double(const std::string& key, double v);

    bool has(const std::string& key) const;
    const std::string& get(const std::string& key) const;  // throws if missing
    std::string get_or(const std::string& key, const std::string& fallback) const;
    long long get_int(const std::string& key) const;
    long long get_int_or(const std::string& key, long long fallback) const;
    double get_double(const std::string& key) const;
    double get_double_or(const std::string& key, double fallback) const;

    // Throws listing every key not present in `allowed`.
    void validate_keys(const std::set<std::string>& allowed) const;

    std::string serialize() const;
    void save(const std::filesystem::path& path) const;

    static RunConfig parse(const std::string& text);
    static RunConfig load(const std::filesystem::path& path);

    const std::vector<std::string>& keys() const { return order_; }

private:
    std::vector<std::string> order_;
    std::vector<std::string> values_;
    long find(const std::string& key) const;
};

}  // namespace tryflow
