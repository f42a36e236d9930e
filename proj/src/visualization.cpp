#include "m2s/visualization.hpp"

#include <fftw3.h>
#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numbers>

#include "m2s/errors.hpp"

namespace m2s {

int Spectrogram::peak_bin() const {
  int best = 0;
  double best_e = -1.0;
  for (int k = 0; k < n_bins; ++k) {
    double e = 0.0;
    for (int f = 0; f < n_frames; ++f) e += std::pow(10.0, at(f, k) / 10.0);
    if (e > best_e) {
      best_e = e;
      best = k;
    }
  }
  return best;
}

Spectrogram log_spectrogram(std::span<const double> x, double sample_rate, double window_s, double hop_s) {
  const int win = static_cast<int>(std::lround(window_s * sample_rate));
  const int hop = static_cast<int>(std::lround(hop_s * sample_rate));
  if (win < 2 || hop < 1) throw ValidationError("spectrogram window and hop must cover at least one sample");
  if (static_cast<std::int64_t>(x.size()) < win) {
    throw ValidationError("signal of " + std::to_string(x.size()) + " samples is shorter than one " +
                          std::to_string(win) + "-sample window");
  }
  Spectrogram s;
  s.n_fft = win;
  s.hop = hop;
  s.sample_rate = sample_rate;
  s.n_bins = win / 2 + 1;
  s.n_frames = 1 + static_cast<int>((static_cast<std::int64_t>(x.size()) - win) / hop);
  s.db.resize(static_cast<std::size_t>(s.n_frames) * s.n_bins);

  std::vector<double> w(static_cast<std::size_t>(win));
  for (int i = 0; i < win; ++i) w[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / win);

  double* in = fftw_alloc_real(static_cast<std::size_t>(win));
  fftw_complex* out = fftw_alloc_complex(static_cast<std::size_t>(s.n_bins));
  fftw_plan plan = fftw_plan_dft_r2c_1d(win, in, out, FFTW_ESTIMATE);
  for (int f = 0; f < s.n_frames; ++f) {
    const std::size_t off = static_cast<std::size_t>(f) * static_cast<std::size_t>(hop);
    for (int i = 0; i < win; ++i) in[i] = x[off + static_cast<std::size_t>(i)] * w[static_cast<std::size_t>(i)];
    fftw_execute(plan);
    for (int k = 0; k < s.n_bins; ++k) {
      const double mag = std::hypot(out[k][0], out[k][1]);
      s.db[static_cast<std::size_t>(f) * s.n_bins + k] = 20.0 * std::log10(mag + 1e-10);
    }
  }
  fftw_destroy_plan(plan);
  fftw_free(out);
  fftw_free(in);
  return s;
}

Image::Image(int w, int h, std::uint8_t fill) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, fill) {}

void Image::set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  if (x < 0 || y < 0 || x >= width || y >= height) return;
  auto* p = &rgb[(static_cast<std::size_t>(y) * width + x) * 3];
  p[0] = r;
  p[1] = g;
  p[2] = b;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  auto tmp = path;
  tmp += ".tmp";
  FILE* fp = std::fopen(tmp.c_str(), "wb");
  if (!fp) throw IoError("cannot write " + tmp.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    std::filesystem::remove(tmp);
    throw IoError("failed encoding " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(&img.rgb[static_cast<std::size_t>(y) * img.width * 3]));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
  std::filesystem::rename(tmp, path);
}

Image read_png(const std::filesystem::path& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("cannot read " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  Image img;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    throw IoError("corrupt png " + path.string());
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_palette_to_rgb(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  img = Image(static_cast<int>(png_get_image_width(png, info)), static_cast<int>(png_get_image_height(png, info)));
  for (int y = 0; y < img.height; ++y) png_read_row(png, &img.rgb[static_cast<std::size_t>(y) * img.width * 3], nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

namespace {

struct Glyph {
  char c;
  std::array<std::uint8_t, 7> rows;
};

constexpr Glyph kFont[] = {
    {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
    {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E}},
    {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
    {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
    {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
    {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
    {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
    {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
    {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
    {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
    {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
    {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
    {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
    {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
    {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}}, {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
    {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}}, {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
    {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}}, {'/', {0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00}},
};

const Glyph* find_glyph(char c) {
  if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
  for (const auto& g : kFont) {
    if (g.c == c) return &g;
  }
  return nullptr;
}

// Dark blue -> purple -> orange -> pale yellow.
std::array<std::uint8_t, 3> colormap(double t) {
  static constexpr std::array<std::array<double, 3>, 5> stops{{{0, 0, 4}, {60, 15, 110}, {180, 55, 120}, {250, 140, 40}, {252, 250, 190}}};
  t = std::clamp(t, 0.0, 1.0) * (stops.size() - 1);
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(t), stops.size() - 2);
  const double f = t - static_cast<double>(i);
  std::array<std::uint8_t, 3> c{};
  for (int k = 0; k < 3; ++k) {
    c[static_cast<std::size_t>(k)] =
        static_cast<std::uint8_t>(std::lround(stops[i][static_cast<std::size_t>(k)] * (1 - f) + stops[i + 1][static_cast<std::size_t>(k)] * f));
  }
  return c;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, v == std::floor(v) ? "%.0f" : "%.1f", v);
  return buf;
}

constexpr int kLeft = 44, kTop = 16, kBottom = 30, kGap = 12;

}  // namespace

void draw_text(Image& img, int x, int y, const std::string& text, int scale) {
  int cx = x;
  for (char c : text) {
    if (const Glyph* g = find_glyph(c)) {
      for (int r = 0; r < 7; ++r) {
        for (int col = 0; col < 5; ++col) {
          if (!(g->rows[static_cast<std::size_t>(r)] & (0x10 >> col))) continue;
          for (int dy = 0; dy < scale; ++dy) {
            for (int dx = 0; dx < scale; ++dx) img.set(cx + col * scale + dx, y + r * scale + dy, 0, 0, 0);
          }
        }
      }
    }
    cx += 6 * scale;
  }
}

GridLayout render_grid(const std::vector<std::vector<Panel>>& rows, int panel_width, int panel_height) {
  if (rows.empty() || rows[0].empty()) throw ValidationError("empty panel grid");
  std::size_t cols = 0;
  double top = -1e300;
  for (const auto& r : rows) {
    cols = std::max(cols, r.size());
    for (const auto& p : r) {
      if (p.spec.n_frames < 1) throw ValidationError("panel '" + p.title + "' has no frames");
      for (double v : p.spec.db) top = std::max(top, v);
    }
  }
  const double floor_db = top - 80.0;
  const int cell_w = kLeft + panel_width + kGap, cell_h = kTop + panel_height + kBottom;
  GridLayout out;
  out.image = Image(static_cast<int>(cols) * cell_w + kGap, static_cast<int>(rows.size()) * cell_h + kGap);
  Image& img = out.image;

  for (std::size_t ri = 0; ri < rows.size(); ++ri) {
    out.panels.emplace_back();
    for (std::size_t ci = 0; ci < rows[ri].size(); ++ci) {
      const Panel& p = rows[ri][ci];
      const Spectrogram& s = p.spec;
      const PanelRect rect{static_cast<int>(ci) * cell_w + kLeft, static_cast<int>(ri) * cell_h + kTop + kGap / 2,
                           panel_width, panel_height};
      out.panels.back().push_back(rect);
      for (int px = 0; px < rect.width; ++px) {
        const int f = std::min(s.n_frames - 1, px * s.n_frames / rect.width);
        for (int py = 0; py < rect.height; ++py) {
          // Low frequencies at the bottom.
          const int k = std::min(s.n_bins - 1, (rect.height - 1 - py) * s.n_bins / rect.height);
          const auto c = colormap((s.at(f, k) - floor_db) / 80.0);
          img.set(rect.x + px, rect.y + py, c[0], c[1], c[2]);
        }
      }
      draw_text(img, rect.x, rect.y - 10, p.title);

      // Frequency axis: ticks every 2 kHz.
      const double nyq_khz = s.sample_rate / 2000.0;
      for (double khz = 0.0; khz <= nyq_khz + 1e-9; khz += 2.0) {
        const int y = rect.y + rect.height - 1 - static_cast<int>(std::lround(khz / nyq_khz * (rect.height - 1)));
        for (int d = 1; d <= 3; ++d) img.set(rect.x - d, y, 0, 0, 0);
        const std::string lab = tick_label(khz);
        draw_text(img, rect.x - 6 - 6 * static_cast<int>(lab.size()), y - 3, lab);
      }
      draw_text(img, rect.x - kLeft + 2, rect.y + rect.height / 2 - 20, "KHZ");

      // Time axis: about five ticks.
      const double dur = (static_cast<double>(s.n_frames - 1) * s.hop + s.n_fft) / s.sample_rate;
      const double step = dur > 5.0 ? 1.0 : (dur > 1.0 ? 0.5 : 0.1);
      for (double t = 0.0; t <= dur + 1e-9; t += step) {
        const int x = rect.x + static_cast<int>(std::lround(t / dur * (rect.width - 1)));
        for (int d = 0; d < 3; ++d) img.set(x, rect.y + rect.height + d, 0, 0, 0);
        draw_text(img, x - 6, rect.y + rect.height + 5, tick_label(t));
      }
      draw_text(img, rect.x + rect.width / 2 - 24, rect.y + rect.height + 16, "TIME (S)");
    }
  }
  return out;
}

GridLayout render_comparison(const Waveform& bona_mono, const Waveform& bona_stereo, const Waveform& fake_mono,
                             const Waveform& fake_stereo, double window_s, double hop_s) {
  auto row = [&](const std::string& tag, const Waveform& mono, const Waveform& stereo) {
    if (mono.channels != 1 || stereo.channels != 2) throw ValidationError(tag + ": expected mono and stereo inputs");
    return std::vector<Panel>{{tag + " mono", log_spectrogram(mono.channel(0), mono.sample_rate, window_s, hop_s)},
                              {tag + " left", log_spectrogram(stereo.channel(0), stereo.sample_rate, window_s, hop_s)},
                              {tag + " right", log_spectrogram(stereo.channel(1), stereo.sample_rate, window_s, hop_s)}};
  };
  return render_grid({row("bonafide", bona_mono, bona_stereo), row("fake", fake_mono, fake_stereo)});
}

}  // namespace m2s
