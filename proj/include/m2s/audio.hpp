#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace m2s {

// One- or two-channel signal, channel-major storage.
struct Waveform {
  int channels = 1;
  double sample_rate = 16000.0;
  std::vector<double> samples;  // [channels x length]
  bool resampled = false;       // set when the loader converted the rate

  static Waveform mono(std::vector<double> x, double sample_rate);
  static Waveform stereo(std::span<const double> left, std::span<const double> right, double sample_rate);

  std::int64_t length() const {
    return channels > 0 ? static_cast<std::int64_t>(samples.size()) / channels : 0;
  }
  std::span<const double> channel(int c) const;
  std::span<double> channel(int c);

  // Throws ValidationError unless length >= 1, channels in {1, 2} and all samples finite.
  void validate() const;
};

// Band-limited (windowed-sinc) sample-rate conversion.
std::vector<double> resample(std::span<const double> x, double from_rate, double to_rate);

// Linear PCM RIFF/WAVE (8/16/24/32-bit integer). Samples are scaled to [-1, 1].
Waveform read_wav(const std::filesystem::path& path);
// Writes 16-bit PCM; samples are clipped to [-1, 1].
void write_wav(const std::filesystem::path& path, const Waveform& w);

}  // namespace m2s
