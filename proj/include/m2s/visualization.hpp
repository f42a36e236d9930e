#pragma once

// Log-magnitude spectrograms and labelled comparison grids written as PNG.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "m2s/audio.hpp"

namespace m2s {

struct Spectrogram {
  int n_frames = 0;
  int n_bins = 0;
  int n_fft = 0;
  int hop = 0;
  double sample_rate = 0.0;
  std::vector<double> db;  // [n_frames x n_bins], 20 log10 |X|

  double at(int frame, int bin) const { return db[static_cast<std::size_t>(frame) * n_bins + bin]; }
  double bin_hz(int bin) const { return bin * sample_rate / n_fft; }
  // Bin with the largest energy summed over frames.
  int peak_bin() const;
};

// Hann-windowed STFT with a window of `window_s` seconds (also the FFT size)
// and a hop of `hop_s` seconds. Throws ValidationError if x is shorter than one window.
Spectrogram log_spectrogram(std::span<const double> x, double sample_rate, double window_s = 0.025,
                            double hop_s = 0.010);

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 255);
  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b);
  const std::uint8_t* pixel(int x, int y) const { return &rgb[(static_cast<std::size_t>(y) * width + x) * 3]; }
};

void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

// Upper-case 5x7 bitmap text; lower case is folded, unknown glyphs render blank.
void draw_text(Image& img, int x, int y, const std::string& text, int scale = 1);

struct Panel {
  std::string title;
  Spectrogram spec;
};

struct PanelRect {
  int x = 0, y = 0, width = 0, height = 0;
};

struct GridLayout {
  Image image;
  std::vector<std::vector<PanelRect>> panels;  // plot area of each panel
};

// Rows of panels sharing one colour scale (top 80 dB below the global
// maximum). Each panel carries its title, a time axis in seconds and a
// frequency axis in kHz.
GridLayout render_grid(const std::vector<std::vector<Panel>>& rows, int panel_width = 320, int panel_height = 160);

// Bonafide row and fake row, each as mono | left | right.
GridLayout render_comparison(const Waveform& bona_mono, const Waveform& bona_stereo, const Waveform& fake_mono,
                             const Waveform& fake_stereo, double window_s = 0.025, double hop_s = 0.010);

}  // namespace m2s
