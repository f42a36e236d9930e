#include "m2s/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>

#include "m2s/errors.hpp"

namespace m2s {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Settings parse_settings(std::istream& in) {
  Settings out;
  std::string line;
  long n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value, got '" + line + "'", n);
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError("empty key", n);
    out.emplace_back(std::move(key), trim(line.substr(eq + 1)));
  }
  return out;
}

Settings load_settings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  try {
    return parse_settings(in);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.line());
  }
}

std::pair<std::string, std::string> split_override(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("override '" + text + "' is not key=value");
  return {trim(text.substr(0, eq)), trim(text.substr(eq + 1))};
}

Settings env_settings(std::span<const std::string> keys) {
  Settings out;
  for (const auto& k : keys) {
    std::string name = kEnvPrefix;
    for (char c : k) name += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    if (const char* v = std::getenv(name.c_str())) out.emplace_back(k, v);
  }
  return out;
}

void reject_key(const std::string& key, std::span<const std::string> valid) {
  std::string msg = "unknown config key '" + key + "'; valid keys:";
  for (const auto& v : valid) msg += " " + v;
  throw ValidationError(msg);
}

double parse_double_setting(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double d = std::stod(value, &used);
    if (used == value.size()) return d;
  } catch (const std::exception&) {
  }
  throw ValidationError(key + ": '" + value + "' is not a number");
}

std::int64_t parse_int_setting(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used == value.size()) return v;
  } catch (const std::exception&) {
  }
  throw ValidationError(key + ": '" + value + "' is not an integer");
}

std::uint64_t parse_seed_setting(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    if (!value.empty() && value[0] != '-') {
      const unsigned long long v = std::stoull(value, &used);
      if (used == value.size()) return v;
    }
  } catch (const std::exception&) {
  }
  throw ValidationError(key + ": '" + value + "' is not a non-negative integer");
}

bool parse_bool_setting(const std::string& key, const std::string& value) {
  std::string v = value;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ValidationError(key + ": '" + value + "' is not a boolean");
}

}  // namespace m2s
