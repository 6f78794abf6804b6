#include "tryflow/config.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace tryflow {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

long RunConfig::find(const std::string& key) const {
    for (size_t i = 0; i < order_.size(); ++i)
        if (order_[i] == key) return static_cast<long>(i);
    return -1;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    long i = find(key);
    if (i >= 0) {
        values_[static_cast<size_t>(i)] = value;
    } else {
        order_.push_back(key);
        values_.push_back(value);
    }
}

void RunConfig::set_int(const std::string& key, long long v) {
    set(key, std::to_string(v));
}

void RunConfig::set_double(const std::string& key, double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    set(key, os.str());
}

bool RunConfig::has(const std::string& key) const {
    return find(key) >= 0;
}

const std::string& RunConfig::get(const std::string& key) const {
    long i = find(key);
    if (i < 0) throw std::out_of_range("config: missing key '" + key + "'");
    return values_[static_cast<size_t>(i)];
}

std::string RunConfig::get_or(const std::string& key, const std::string& fallback) const {
    long i = find(key);
    return i < 0 ? fallback : values_[static_cast<size_t>(i)];
}

long long RunConfig::get_int(const std::string& key) const {
    const std::string& v = get(key);
    size_t pos = 0;
    long long r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("config: key '" + key + "' is not an integer: " + v);
    return r;
}

long long RunConfig::get_int_or(const std::string& key, long long fallback) const {
    return has(key) ? get_int(key) : fallback;
}

double RunConfig::get_double(const std::string& key) const {
    const std::string& v = get(key);
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("config: key '" + key + "' is not a number: " + v);
    return r;
}

double RunConfig::get_double_or(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
}

void RunConfig::validate_keys(const std::set<std::string>& allowed) const {
    std::string bad;
    for (const auto& k : order_)
        if (!allowed.count(k)) bad += (bad.empty() ? "" : ", ") + k;
    if (!bad.empty()) throw std::invalid_argument("config: unknown keys: " + bad);
}

std::string RunConfig::serialize() const {
    // Group by section, preserving first-seen section order and in-section order.
    std::vector<std::string> sections;
    std::map<std::string, std::vector<size_t>> by_section;
    for (size_t i = 0; i < order_.size(); ++i) {
        size_t dot = order_[i].find('.');
        std::string sec = dot == std::string::npos ? "" : order_[i].substr(0, dot);
        if (!by_section.count(sec)) sections.push_back(sec);
        by_section[sec].push_back(i);
    }
    std::ostringstream os;
    bool first = true;
    for (const auto& sec : sections) {
        if (!sec.empty()) {
            if (!first) os << "\n";
            os << "[" << sec << "]\n";
        }
        first = false;
        for (size_t i : by_section[sec]) {
            size_t dot = order_[i].find('.');
            std::string bare = dot == std::string::npos ? order_[i] : order_[i].substr(dot + 1);
            os << bare << " = " << values_[i] << "\n";
        }
    }
    return os.str();
}

void RunConfig::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("config: cannot write " + path.string());
    out << serialize();
}

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw std::invalid_argument("config: malformed section at line " + std::to_string(lineno));
            section = trim(t.substr(1, t.size() - 2));
            continue;
        }
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: expected 'key = value' at line " + std::to_string(lineno));
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty())
            throw std::invalid_argument("config: empty key at line " + std::to_string(lineno));
        cfg.set(section.empty() ? key : section + "." + key, value);
    }
    return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

}  // namespace tryflow
