#pragma once

#include <map>
#include <set>
#include <string>

#include "npstream/tensor.hpp"

namespace npstream {

// Flat key=value config text: one pair per line, '#' starts a comment,
// blank lines ignored, keys and values trimmed. Duplicate keys are an error.
using ConfigMap = std::map<std::string, std::string>;

ConfigMap parse_config_text(const std::string& text);
ConfigMap load_config(const std::string& path);

// Throws on keys outside the allowed set (typo protection).
void check_config_keys(const ConfigMap& cfg, const std::set<std::string>& allowed);

std::string config_str(const ConfigMap& cfg, const std::string& key, const std::string& fallback);
i64 config_i64(const ConfigMap& cfg, const std::string& key, i64 fallback);
double config_f64(const ConfigMap& cfg, const std::string& key, double fallback);
bool config_bool(const ConfigMap& cfg, const std::string& key, bool fallback);

}  // namespace npstream
