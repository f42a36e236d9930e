#pragma once

// The m2s-add command suite: fixtures, pretrain-m2s, convert, train, eval,
// visualize. Every command takes --config, --set key=value, --seed and --out;
// settings resolve as config file, then M2S_<KEY> environment variables, then
// --set, then --seed.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace m2s::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kFailed = 1;  // file- or row-level errors, or an aborted run
inline constexpr int kUsage = 2;

// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

struct FixtureSettings {
  std::uint64_t seed = 1234;
  std::int64_t train_utterances = 16;
  std::int64_t dev_utterances = 8;
  std::int64_t eval_utterances = 8;
  double class_ratio = 0.5;
  std::int64_t speakers = 3;
  double seconds = 1.0;  // per paired binaural recording
  double sample_rate = 16000.0;

  static std::span<const std::string> keys();
  void set(const std::string& key, const std::string& value);
  void validate() const;
};

struct ConvertSettings {
  std::uint64_t seed = 1234;

  static std::span<const std::string> keys();
  void set(const std::string& key, const std::string& value);
  void validate() const;
};

struct EvalSettings {
  std::uint64_t seed = 1234;
  bool ablation = false;

  static std::span<const std::string> keys();
  void set(const std::string& key, const std::string& value);
  void validate() const;
};

struct VisualizeSettings {
  std::uint64_t seed = 1234;
  double window_ms = 25.0;
  double hop_ms = 10.0;

  static std::span<const std::string> keys();
  void set(const std::string& key, const std::string& value);
  void validate() const;
};

}  // namespace m2s::cli
