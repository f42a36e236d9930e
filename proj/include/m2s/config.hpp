#pragma once

// Flat `key = value` configuration text with `#` comments, command-line
// `key=value` overrides and `M2S_<KEY>` environment overrides.

#include <cstdint>
#include <filesystem>
#include <istream>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace m2s {

inline constexpr const char* kEnvPrefix = "M2S_";

using Settings = std::vector<std::pair<std::string, std::string>>;

// Throws ParseError (with the line number) on lines without '=' or with an empty key.
Settings parse_settings(std::istream& in);
Settings load_settings(const std::filesystem::path& path);

// "key=value" -> {key, value}; throws ValidationError without '='.
std::pair<std::string, std::string> split_override(const std::string& text);

// Values of M2S_<KEY> (upper-cased key) for every key that is set.
Settings env_settings(std::span<const std::string> keys);

// Throws ValidationError naming the key and every valid key.
[[noreturn]] void reject_key(const std::string& key, std::span<const std::string> valid);

double parse_double_setting(const std::string& key, const std::string& value);
std::int64_t parse_int_setting(const std::string& key, const std::string& value);
std::uint64_t parse_seed_setting(const std::string& key, const std::string& value);
bool parse_bool_setting(const std::string& key, const std::string& value);

// Applies settings in order through `cfg.set(key, value)`.
template <class Config>
void apply_settings(Config& cfg, const Settings& settings) {
  for (const auto& [k, v] : settings) cfg.set(k, v);
}

// File (optional), then environment, then explicit overrides.
template <class Config>
Config resolve_config(const std::filesystem::path& file, std::span<const std::string> overrides) {
  Config cfg;
  if (!file.empty()) apply_settings(cfg, load_settings(file));
  apply_settings(cfg, env_settings(Config::keys()));
  for (const auto& o : overrides) {
    const auto [k, v] = split_override(o);
    cfg.set(k, v);
  }
  cfg.validate();
  return cfg;
}

}  // namespace m2s
