#include "m2s/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "m2s/errors.hpp"

namespace m2s {

Waveform Waveform::mono(std::vector<double> x, double sample_rate) {
  Waveform w;
  w.channels = 1;
  w.sample_rate = sample_rate;
  w.samples = std::move(x);
  return w;
}

Waveform Waveform::stereo(std::span<const double> left, std::span<const double> right, double sample_rate) {
  if (left.size() != right.size()) throw ValidationError("stereo channels differ in length");
  Waveform w;
  w.channels = 2;
  w.sample_rate = sample_rate;
  w.samples.reserve(left.size() * 2);
  w.samples.insert(w.samples.end(), left.begin(), left.end());
  w.samples.insert(w.samples.end(), right.begin(), right.end());
  return w;
}

std::span<const double> Waveform::channel(int c) const {
  if (c < 0 || c >= channels) throw ValidationError("channel index out of range");
  return std::span<const double>(samples).subspan(static_cast<std::size_t>(c * length()),
                                                   static_cast<std::size_t>(length()));
}

std::span<double> Waveform::channel(int c) {
  if (c < 0 || c >= channels) throw ValidationError("channel index out of range");
  return std::span<double>(samples).subspan(static_cast<std::size_t>(c * length()),
                                             static_cast<std::size_t>(length()));
}

void Waveform::validate() const {
  if (channels != 1 && channels != 2) throw ValidationError("waveform must have 1 or 2 channels");
  if (samples.size() % static_cast<std::size_t>(channels) != 0) throw ValidationError("ragged channel data");
  if (length() < 1) throw ValidationError("zero-length audio");
  if (!(sample_rate > 0.0)) throw ValidationError("sample rate must be positive");
  for (double v : samples) {
    if (!std::isfinite(v)) throw ValidationError("non-finite audio sample");
  }
}

std::vector<double> resample(std::span<const double> x, double from_rate, double to_rate) {
  if (!(from_rate > 0.0) || !(to_rate > 0.0)) throw ValidationError("resample: rates must be positive");
  if (x.empty()) return {};
  if (from_rate == to_rate) return {x.begin(), x.end()};
  const double ratio = to_rate / from_rate;
  const auto out_len = std::max<std::int64_t>(1, std::llround(static_cast<double>(x.size()) * ratio));
  const double cutoff = std::min(1.0, ratio);  // fraction of the input Nyquist band
  constexpr double kZeroCrossings = 16.0;
  const double half_width = kZeroCrossings / cutoff;
  const auto n = static_cast<std::int64_t>(x.size());
  std::vector<double> y(static_cast<std::size_t>(out_len));
  for (std::int64_t j = 0; j < out_len; ++j) {
    const double t = static_cast<double>(j) / ratio;
    const auto lo = static_cast<std::int64_t>(std::ceil(t - half_width));
    const auto hi = static_cast<std::int64_t>(std::floor(t + half_width));
    double acc = 0.0;
    for (std::int64_t i = std::max<std::int64_t>(lo, 0); i <= std::min(hi, n - 1); ++i) {
      const double d = static_cast<double>(i) - t;
      const double arg = std::numbers::pi * cutoff * d;
      const double sinc = std::fabs(arg) < 1e-12 ? 1.0 : std::sin(arg) / arg;
      // Blackman window over [-half_width, half_width]
      const double u = (d / half_width + 1.0) * 0.5;
      const double win = 0.42 - 0.5 * std::cos(2 * std::numbers::pi * u) + 0.08 * std::cos(4 * std::numbers::pi * u);
      acc += x[static_cast<std::size_t>(i)] * cutoff * sinc * win;
    }
    y[static_cast<std::size_t>(j)] = acc;
  }
  return y;
}

namespace {

std::uint32_t le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t le16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
void put16(std::ostream& os, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}

}  // namespace

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open audio file " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0) {
    throw IoError(path.string() + ": not a RIFF/WAVE file");
  }
  int channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::uint16_t format = 0;
  const unsigned char* data = nullptr;
  std::size_t data_bytes = 0;
  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const unsigned char* chunk = buf.data() + pos;
    const std::uint32_t size = le32(chunk + 4);
    const std::size_t body = pos + 8;
    if (body + size > buf.size() && std::memcmp(chunk, "data", 4) != 0) {
      throw IoError(path.string() + ": truncated chunk");
    }
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (size < 16) throw IoError(path.string() + ": short fmt chunk");
      format = le16(chunk + 8);
      channels = le16(chunk + 10);
      rate = le32(chunk + 12);
      bits = le16(chunk + 22);
      if (format == 0xFFFE && size >= 40) format = le16(chunk + 8 + 24);  // extensible subformat
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_bytes = std::min<std::size_t>(size, buf.size() - body);
    }
    pos = body + size + (size & 1u);
  }
  if (!data || channels == 0) throw IoError(path.string() + ": missing fmt or data chunk");
  if (format != 1) throw IoError(path.string() + ": only linear PCM is supported");
  if (bits != 8 && bits != 16 && bits != 24 && bits != 32) {
    throw IoError(path.string() + ": unsupported bit depth " + std::to_string(bits));
  }
  if (channels > 2) throw IoError(path.string() + ": more than two channels");
  const std::size_t bytes_per = static_cast<std::size_t>(bits / 8);
  const std::size_t frames = data_bytes / (bytes_per * static_cast<std::size_t>(channels));

  Waveform w;
  w.channels = channels;
  w.sample_rate = rate;
  w.samples.assign(frames * static_cast<std::size_t>(channels), 0.0);
  const double scale = 1.0 / std::ldexp(1.0, bits - 1);
  for (std::size_t f = 0; f < frames; ++f) {
    for (int c = 0; c < channels; ++c) {
      const unsigned char* p = data + (f * static_cast<std::size_t>(channels) + static_cast<std::size_t>(c)) * bytes_per;
      std::int32_t v = 0;
      switch (bits) {
        case 8: v = static_cast<std::int32_t>(p[0]) - 128; break;
        case 16: v = static_cast<std::int16_t>(le16(p)); break;
        case 24: v = static_cast<std::int32_t>((p[0] << 8) | (p[1] << 16) | (p[2] << 24)) >> 8; break;
        default: v = static_cast<std::int32_t>(le32(p)); break;
      }
      w.samples[static_cast<std::size_t>(c) * frames + f] = static_cast<double>(v) * scale;
    }
  }
  return w;
}

void write_wav(const std::filesystem::path& path, const Waveform& w) {
  if (w.channels != 1 && w.channels != 2) throw ValidationError("write_wav: 1 or 2 channels required");
  const auto frames = static_cast<std::uint32_t>(w.length());
  const std::uint32_t data_bytes = frames * static_cast<std::uint32_t>(w.channels) * 2u;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write("RIFF", 4);
  put32(os, 36 + data_bytes);
  os.write("WAVE", 4);
  os.write("fmt ", 4);
  put32(os, 16);
  put16(os, 1);
  put16(os, static_cast<std::uint16_t>(w.channels));
  const auto rate = static_cast<std::uint32_t>(std::lround(w.sample_rate));
  put32(os, rate);
  put32(os, rate * static_cast<std::uint32_t>(w.channels) * 2u);
  put16(os, static_cast<std::uint16_t>(w.channels * 2));
  put16(os, 16);
  os.write("data", 4);
  put32(os, data_bytes);
  std::vector<unsigned char> pcm(data_bytes);
  for (std::uint32_t f = 0; f < frames; ++f) {
    for (int c = 0; c < w.channels; ++c) {
      const double v = std::clamp(w.samples[static_cast<std::size_t>(c) * frames + f], -1.0, 1.0);
      const auto q = static_cast<std::int16_t>(std::lround(std::clamp(v * 32768.0, -32768.0, 32767.0)));
      const std::size_t o = (static_cast<std::size_t>(f) * static_cast<std::size_t>(w.channels) + static_cast<std::size_t>(c)) * 2;
      pcm[o] = static_cast<unsigned char>(q & 0xff);
      pcm[o + 1] = static_cast<unsigned char>((q >> 8) & 0xff);
    }
  }
  os.write(reinterpret_cast<const char*>(pcm.data()), static_cast<std::streamsize>(pcm.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace m2s
