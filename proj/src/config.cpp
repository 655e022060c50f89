#include "npstream/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "npstream/error.hpp"

namespace npstream {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

ConfigMap parse_config_text(const std::string& text) {
    ConfigMap cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ValueError("config: line " + std::to_string(lineno) + " is not key=value: '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ValueError("config: empty key on line " + std::to_string(lineno));
        if (!cfg.emplace(key, value).second)
            throw ValueError("config: duplicate key '" + key + "' on line " + std::to_string(lineno));
    }
    return cfg;
}

ConfigMap load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ValueError("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

void check_config_keys(const ConfigMap& cfg, const std::set<std::string>& allowed) {
    for (const auto& [key, value] : cfg) {
        (void)value;
        if (!allowed.count(key)) throw ValueError("config: unknown key '" + key + "'");
    }
}

std::string config_str(const ConfigMap& cfg, const std::string& key, const std::string& fallback) {
    const auto it = cfg.find(key);
    return it == cfg.end() ? fallback : it->second;
}

i64 config_i64(const ConfigMap& cfg, const std::string& key, i64 fallback) {
    const auto it = cfg.find(key);
    if (it == cfg.end()) return fallback;
    const std::string& s = it->second;
    i64 v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw ValueError("config: key '" + key + "' wants an integer, got '" + s + "'");
    return v;
}

double config_f64(const ConfigMap& cfg, const std::string& key, double fallback) {
    const auto it = cfg.find(key);
    if (it == cfg.end()) return fallback;
    const std::string& s = it->second;
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw ValueError("config: key '" + key + "' wants a number, got '" + s + "'");
    return v;
}

bool config_bool(const ConfigMap& cfg, const std::string& key, bool fallback) {
    const auto it = cfg.find(key);
    if (it == cfg.end()) return fallback;
    const std::string& s = it->second;
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ValueError("config: key '" + key + "' wants a boolean, got '" + s + "'");
}

}  // namespace npstream
