#include "m2s/frontend.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "m2s/errors.hpp"

namespace m2s {

void ShapeTrace::record(const std::string& name, const Tensor& t) {
  Shape s(t.shape().begin() + 1, t.shape().end());
  entries.emplace_back(name, std::move(s));
}

const Shape& ShapeTrace::at(const std::string& name) const {
  for (const auto& [n, s] : entries) {
    if (n == name) return s;
  }
  throw std::out_of_range("no shape recorded for " + name);
}

namespace {

double to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

SincFilterbank::SincFilterbank(const SincConfig& cfg) : cfg_(cfg) {
  if (cfg.n_filters < 1 || cfg.kernel_size < 1 || cfg.kernel_size % 2 == 0) {
    throw ValidationError("sinc filterbank needs n_filters >= 1 and an odd kernel size");
  }
  const double nyq = cfg.sample_rate / 2.0;
  if (nyq <= 2.0 * cfg.min_band_hz + cfg.min_low_hz) throw ValidationError("sample rate too low for sinc cutoffs");
  const int n = cfg.n_filters;
  std::vector<double> edges(static_cast<std::size_t>(n + 1));
  const double top = to_mel(nyq);
  for (int i = 0; i <= n; ++i) edges[static_cast<std::size_t>(i)] = to_hz(top * i / n);
  // Edges are squeezed into the unclamped range so that every filter starts
  // distinct and off the cutoff limits: f_low = min_low + s e_i and
  // f_high = f_low + min_band + s (e_{i+1} - e_i), topping out 1 Hz under the cap.
  const double s = (nyq - cfg.min_low_hz - 1.5 * cfg.min_band_hz - 1.0) / nyq;
  std::vector<double> a(static_cast<std::size_t>(n)), b(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto u = static_cast<std::size_t>(i);
    a[u] = std::max(s * edges[u], 1.0);
    b[u] = s * (edges[u + 1] - edges[u]);
  }
  low_ = Tensor::parameter({n}, std::move(a));
  band_ = Tensor::parameter({n}, std::move(b));
}

std::vector<double> SincFilterbank::low_hz() const {
  const double nyq = cfg_.sample_rate / 2.0;
  std::vector<double> f;
  for (double a : low_.values()) f.push_back(std::min(cfg_.min_low_hz + std::fabs(a), nyq - 2.0 * cfg_.min_band_hz));
  return f;
}

std::vector<double> SincFilterbank::high_hz() const {
  const double nyq = cfg_.sample_rate / 2.0;
  const auto lo = low_hz();
  std::vector<double> f;
  for (std::size_t i = 0; i < lo.size(); ++i) {
    f.push_back(std::min(lo[i] + cfg_.min_band_hz + std::fabs(band_.values()[i]), nyq - cfg_.min_band_hz / 2.0));
  }
  return f;
}

Tensor SincFilterbank::kernels() const {
  const int F = cfg_.n_filters, K = cfg_.kernel_size, half = K / 2;
  const double nyq = cfg_.sample_rate / 2.0;
  const auto f1 = low_hz(), f2 = high_hz();
  std::vector<double> tau(static_cast<std::size_t>(K)), win(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    tau[static_cast<std::size_t>(k)] = static_cast<double>(k - half) / cfg_.sample_rate;
    win[static_cast<std::size_t>(k)] = K == 1 ? 1.0 : 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * k / (K - 1));
  }
  // g(f, tau) = sin(2 pi f tau) / (pi tau), equal to 2f at tau = 0.
  auto g = [](double f, double t) { return t == 0.0 ? 2.0 * f : std::sin(2.0 * std::numbers::pi * f * t) / (std::numbers::pi * t); };
  std::vector<double> h(static_cast<std::size_t>(F * K));
  for (int i = 0; i < F; ++i) {
    const double d = 2.0 * (f2[static_cast<std::size_t>(i)] - f1[static_cast<std::size_t>(i)]);
    for (int k = 0; k < K; ++k) {
      const double t = tau[static_cast<std::size_t>(k)];
      h[static_cast<std::size_t>(i * K + k)] =
          win[static_cast<std::size_t>(k)] * (g(f2[static_cast<std::size_t>(i)], t) - g(f1[static_cast<std::size_t>(i)], t)) / d;
    }
  }
  Tensor low = low_, band = band_;
  const SincConfig cfg = cfg_;
  std::vector<double> hv = h;
  return Tensor::make_result(
      Shape{F, 1, K}, std::move(h), {&low_, &band_},
      [low, band, cfg, f1, f2, tau, win, hv, F, K, nyq](const std::vector<double>& gr) {
        std::vector<double> g_f1(static_cast<std::size_t>(F), 0.0), g_f2(static_cast<std::size_t>(F), 0.0);
        for (int i = 0; i < F; ++i) {
          const double d = 2.0 * (f2[static_cast<std::size_t>(i)] - f1[static_cast<std::size_t>(i)]);
          for (int k = 0; k < K; ++k) {
            const std::size_t idx = static_cast<std::size_t>(i * K + k);
            const double t = tau[static_cast<std::size_t>(k)], w = win[static_cast<std::size_t>(k)];
            const double c1 = std::cos(2.0 * std::numbers::pi * f1[static_cast<std::size_t>(i)] * t);
            const double c2 = std::cos(2.0 * std::numbers::pi * f2[static_cast<std::size_t>(i)] * t);
            g_f2[static_cast<std::size_t>(i)] += gr[idx] * (w * 2.0 * c2 / d - 2.0 * hv[idx] / d);
            g_f1[static_cast<std::size_t>(i)] += gr[idx] * (-w * 2.0 * c1 / d + 2.0 * hv[idx] / d);
          }
        }
        const auto a = low.values(), b = band.values();
        for (int i = 0; i < F; ++i) {
          const std::size_t u = static_cast<std::size_t>(i);
          const bool low_free = cfg.min_low_hz + std::fabs(a[u]) < nyq - 2.0 * cfg.min_band_hz;
          const bool high_free = f1[u] + cfg.min_band_hz + std::fabs(b[u]) < nyq - cfg.min_band_hz / 2.0;
          // f_high depends on f_low while unclamped.
          const double df1 = g_f1[u] + (high_free ? g_f2[u] : 0.0);
          if (low.requires_grad() && low_free) low.mutable_grad()[u] += df1 * sign(a[u]);
          if (band.requires_grad() && high_free) band.mutable_grad()[u] += g_f2[u] * sign(b[u]);
        }
      });
}

void SincFilterbank::register_state(nn::StateDict& sd, const std::string& prefix) {
  sd.add_parameter(prefix + ".low_hz", &low_);
  sd.add_parameter(prefix + ".band_hz", &band_);
}

SincNetLayer::SincNetLayer(const SincConfig& cfg) : fb_(cfg), bn_(1) {}

Tensor SincNetLayer::forward(const Tensor& x, bool training, ShapeTrace* trace) {
  if (x.ndim() != 3 || x.size(1) != 1) throw ShapeError("sincnet expects [B, 1, T], got " + shape_str(x.shape()));
  const int K = fb_.config().kernel_size;
  if (x.size(2) < K) {
    throw ShapeError("sincnet input of " + std::to_string(x.size(2)) + " samples is shorter than the " +
                     std::to_string(K) + "-tap kernel");
  }
  Tensor h = ops::conv1d(x, fb_.kernels(), Tensor());
  if (trace) trace->record("sinc_conv", h);
  h = ops::reshape(h, {h.size(0), 1, h.size(1), h.size(2)});
  h = ops::max_pool2d(h, 3, 3);
  h = ops::selu(bn_.forward(h, 1, training));
  if (trace) trace->record("sinc_out", h);
  return h;
}

void SincNetLayer::register_state(nn::StateDict& sd, const std::string& prefix) {
  fb_.register_state(sd, prefix + ".filterbank");
  bn_.register_state(sd, prefix + ".bn");
}

ResidualBlock::ResidualBlock(std::int64_t in_ch, std::int64_t out_ch, Rng& rng)
    : conv1_(in_ch, out_ch, 2, 3, rng, {1, 1, 1, 1}),
      bn_(out_ch),
      conv2_(out_ch, out_ch, 2, 3, rng, {0, 0, 1, 1}),
      has_projection_(in_ch != out_ch) {
  if (has_projection_) skip_ = nn::Conv2d(in_ch, out_ch, 1, 1, rng);
}

Tensor ResidualBlock::forward(const Tensor& x, bool training) {
  Tensor h = conv1_.forward(x);
  h = ops::selu(bn_.forward(h, 1, training));
  h = conv2_.forward(h);
  const Tensor skip = has_projection_ ? skip_.forward(x) : x;
  return ops::max_pool2d(ops::add(h, skip), 1, 3);
}

void ResidualBlock::register_state(nn::StateDict& sd, const std::string& prefix) {
  conv1_.register_state(sd, prefix + ".conv1");
  bn_.register_state(sd, prefix + ".bn");
  conv2_.register_state(sd, prefix + ".conv2");
  if (has_projection_) skip_.register_state(sd, prefix + ".skip");
}

Frontend::Frontend(const FrontendConfig& cfg, Rng& rng) : sinc_(cfg.sinc) {
  std::int64_t in = 1;
  for (auto c : cfg.block_channels) {
    blocks_.emplace_back(in, c, rng);
    in = c;
  }
}

Tensor Frontend::forward(const Tensor& segments, bool training, ShapeTrace* trace, const std::string& prefix) {
  if (segments.ndim() != 2) throw ShapeError("frontend expects [B, T], got " + shape_str(segments.shape()));
  ShapeTrace local;
  ShapeTrace* t = trace ? &local : nullptr;
  Tensor h = sinc_.forward(ops::reshape(segments, {segments.size(0), 1, segments.size(1)}), training, t);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    h = blocks_[i].forward(h, training);
    if (t) t->record("block" + std::to_string(i + 1), h);
  }
  if (trace) {
    for (auto& [name, s] : local.entries) trace->entries.emplace_back(prefix + name, s);
  }
  return h;
}

void Frontend::register_state(nn::StateDict& sd, const std::string& prefix) {
  sinc_.register_state(sd, prefix + ".sinc");
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].register_state(sd, prefix + ".block" + std::to_string(i + 1));
}

Tensor to_graph_spectral(const Tensor& fm) { return ops::graph_from_feature_map(fm, ops::GraphAxis::Spectral); }
Tensor to_graph_temporal(const Tensor& fm) { return ops::graph_from_feature_map(fm, ops::GraphAxis::Temporal); }

}  // namespace m2s
