#include "m2s/binauralizer.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>

#include "m2s/errors.hpp"

namespace m2s {

Tensor geometric_warpfield(const Tensor& conditioning, double sample_rate, double ear_offset_m,
                           double speed_of_sound) {
  if (conditioning.ndim() != 3 || conditioning.size(1) < 3) {
    throw ShapeError("geometric_warpfield: conditioning must be [B, F>=3, T], got " + shape_str(conditioning.shape()));
  }
  if (!(speed_of_sound > 0.0) || !(sample_rate > 0.0)) throw ValidationError("geometric_warpfield: invalid rates");
  const std::int64_t B = conditioning.size(0), F = conditioning.size(1), T = conditioning.size(2);
  const auto c = conditioning.values();
  std::vector<double> rho(static_cast<std::size_t>(B * 2 * T));
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t t = 0; t < T; ++t) {
      const double x = c[static_cast<std::size_t>((b * F + 0) * T + t)];
      const double y = c[static_cast<std::size_t>((b * F + 1) * T + t)];
      const double z = c[static_cast<std::size_t>((b * F + 2) * T + t)];
      if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z)) {
        throw ValidationError("geometric_warpfield: non-finite position at frame " + std::to_string(t));
      }
      for (int e = 0; e < 2; ++e) {
        const double ey = e == 0 ? ear_offset_m : -ear_offset_m;
        const double d = std::sqrt(x * x + (y - ey) * (y - ey) + z * z);
        const double r = static_cast<double>(t) - sample_rate * d / speed_of_sound;
        rho[static_cast<std::size_t>((b * 2 + e) * T + t)] = std::clamp(r, 0.0, static_cast<double>(t));
      }
    }
  }
  return Tensor({B, 2, T}, std::move(rho));
}

std::vector<double> enforce_warp(std::span<const double> raw) {
  std::vector<double> p(raw.size());
  double prev = 0.0;
  for (std::size_t t = 0; t < raw.size(); ++t) {
    prev = std::min(static_cast<double>(t), std::max(prev, raw[t]));
    p[t] = prev;
  }
  return p;
}

Tensor apply_warp(const Tensor& x, const Tensor& warp) {
  if (x.ndim() != 2) throw ShapeError("apply_warp: x must be [B, T], got " + shape_str(x.shape()));
  const std::int64_t B = x.size(0), T = x.size(1);
  if (warp.shape() != Shape{B, 2, T}) {
    throw ShapeError("apply_warp: warp " + shape_str(warp.shape()) + " does not match x " + shape_str(x.shape()));
  }
  const auto xv = x.values(), wv = warp.values();
  std::vector<double> out(static_cast<std::size_t>(B * 2 * T));
  std::vector<double> pos(out.size());
  // Index of the raw warp sample that determines each enforced position, or -1 when clamped to t.
  std::vector<std::int64_t> src(out.size());
  for (std::int64_t b = 0; b < B; ++b) {
    for (int e = 0; e < 2; ++e) {
      const std::size_t row = static_cast<std::size_t>((b * 2 + e) * T);
      double prev = 0.0;
      std::int64_t prev_src = -1;
      for (std::int64_t t = 0; t < T; ++t) {
        const double r = wv[row + static_cast<std::size_t>(t)];
        double p = prev;
        std::int64_t s = prev_src;
        if (r > prev) p = r, s = t;
        if (p > static_cast<double>(t)) p = static_cast<double>(t), s = -1;
        prev = p;
        prev_src = s;
        pos[row + static_cast<std::size_t>(t)] = p;
        src[row + static_cast<std::size_t>(t)] = s;
        const auto i = static_cast<std::int64_t>(p);
        const double a = p - static_cast<double>(i);
        const std::int64_t j = std::min(i + 1, T - 1);
        const std::size_t xr = static_cast<std::size_t>(b * T);
        out[row + static_cast<std::size_t>(t)] = (1.0 - a) * xv[xr + static_cast<std::size_t>(i)] + a * xv[xr + static_cast<std::size_t>(j)];
      }
    }
  }
  return Tensor::make_result(
      Shape{B, 2, T}, std::move(out), {&x, &warp}, [x, warp, pos, src, B, T](const std::vector<double>& g) {
        const auto xv = x.values();
        std::span<double> gx, gw;
        if (x.requires_grad()) gx = x.mutable_grad();
        if (warp.requires_grad()) gw = warp.mutable_grad();
        for (std::int64_t b = 0; b < B; ++b) {
          const std::size_t xr = static_cast<std::size_t>(b * T);
          for (int e = 0; e < 2; ++e) {
            const std::size_t row = static_cast<std::size_t>((b * 2 + e) * T);
            for (std::int64_t t = 0; t < T; ++t) {
              const std::size_t k = row + static_cast<std::size_t>(t);
              const double p = pos[k];
              const auto i = static_cast<std::int64_t>(p);
              const double a = p - static_cast<double>(i);
              const std::int64_t j = std::min(i + 1, T - 1);
              if (!gx.empty()) {
                gx[xr + static_cast<std::size_t>(i)] += (1.0 - a) * g[k];
                gx[xr + static_cast<std::size_t>(j)] += a * g[k];
              }
              if (!gw.empty() && src[k] >= 0) {
                gw[row + static_cast<std::size_t>(src[k])] +=
                    g[k] * (xv[xr + static_cast<std::size_t>(j)] - xv[xr + static_cast<std::size_t>(i)]);
              }
            }
          }
        }
      });
}

WarpNet::WarpNet(const BinauralizerConfig& cfg, Rng& rng) {
  if (cfg.warp_layers < 1 || cfg.warp_kernel < 1 || cfg.warp_kernel % 2 == 0) {
    throw ValidationError("warpnet needs >= 1 layer and an odd kernel");
  }
  const int pad = cfg.warp_kernel / 2;
  std::int64_t in = cfg.conditioning_features;
  for (int l = 0; l < cfg.warp_layers; ++l) {
    const bool last = l + 1 == cfg.warp_layers;
    const std::int64_t out = last ? 2 : cfg.warp_channels;
    layers_.emplace_back(in, out, cfg.warp_kernel, rng, ops::Conv1dOptions{1, pad, pad});
    in = out;
  }
  for (double& v : layers_.back().weight().mutable_values()) v = 0.0;
  for (double& v : layers_.back().bias().mutable_values()) v = 0.0;
}

Tensor WarpNet::forward(const Tensor& conditioning) const {
  Tensor h = conditioning;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    h = layers_[l].forward(h);
    if (l + 1 < layers_.size()) h = ops::tanh(h);
  }
  return h;
}

int WarpNet::receptive_radius() const {
  int r = 0;
  for (const auto& l : layers_) r += l.options().pad_left;
  return r;
}

void WarpNet::register_state(nn::StateDict& sd, const std::string& prefix) {
  for (std::size_t l = 0; l < layers_.size(); ++l) layers_[l].register_state(sd, prefix + ".conv" + std::to_string(l + 1));
}

TemporalConvNet::TemporalConvNet(const BinauralizerConfig& cfg, Rng& rng)
    : in_(2, cfg.tcn_channels, 1, rng) {
  if (cfg.tcn_blocks < 1 || cfg.dilations.empty()) throw ValidationError("temporal convnet needs blocks and dilations");
  const std::int64_t C = cfg.tcn_channels, F = cfg.conditioning_features;
  for (int blk = 0; blk < cfg.tcn_blocks; ++blk) {
    for (int d : cfg.dilations) {
      if (d < 1) throw ValidationError("dilations must be positive");
      Layer l{nn::Conv1d(C, C, 2, rng, ops::Conv1dOptions{d, d, 0}), nn::Conv1d(F, C, 1, rng), nn::Conv1d(F, C, 1, rng),
              nn::Conv1d(C, C, 1, rng)};
      // Modulation starts as the identity.
      for (nn::Conv1d* m : {&l.gamma, &l.beta}) {
        for (double& v : m->weight().mutable_values()) v *= 0.1;
        for (double& v : m->bias().mutable_values()) v = 0.0;
      }
      layers_.push_back(std::move(l));
    }
  }
  out_ = nn::Conv1d(C, 2, 1, rng);
  for (double& v : out_.weight().mutable_values()) v = 0.0;
  for (double& v : out_.bias().mutable_values()) v = 0.0;
}

Tensor TemporalConvNet::forward(const Tensor& x_lr, const Tensor& conditioning) const {
  if (x_lr.ndim() != 3 || x_lr.size(1) != 2) throw ShapeError("convnet input must be [B, 2, T], got " + shape_str(x_lr.shape()));
  if (conditioning.ndim() != 3 || conditioning.size(0) != x_lr.size(0) || conditioning.size(2) != x_lr.size(2)) {
    throw ValidationError("convnet: conditioning " + shape_str(conditioning.shape()) + " does not match signal " +
                          shape_str(x_lr.shape()));
  }
  Tensor h = in_.forward(x_lr);
  for (const auto& l : layers_) {
    const Tensor z = l.conv.forward(h);
    const Tensor mod = ops::add(ops::mul(z, ops::add_scalar(l.gamma.forward(conditioning), 1.0)), l.beta.forward(conditioning));
    h = ops::add(h, l.mix.forward(ops::tanh(mod)));
  }
  return ops::add(x_lr, out_.forward(h));
}

std::int64_t TemporalConvNet::receptive_field() const {
  std::int64_t r = 1;
  for (const auto& l : layers_) r += l.conv.options().dilation;  // (kernel - 1) * dilation with kernel 2
  return r;
}

void TemporalConvNet::register_state(nn::StateDict& sd, const std::string& prefix) {
  in_.register_state(sd, prefix + ".in");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = prefix + ".layer" + std::to_string(i + 1);
    layers_[i].conv.register_state(sd, p + ".conv");
    layers_[i].gamma.register_state(sd, p + ".gamma");
    layers_[i].beta.register_state(sd, p + ".beta");
    layers_[i].mix.register_state(sd, p + ".mix");
  }
  out_.register_state(sd, prefix + ".out");
}

Binauralizer::Binauralizer(const BinauralizerConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.segment_length < 1) throw ValidationError("segment length must be positive");
  Rng rng(derive_seed(seed, 0xB1A));
  warp_ = WarpNet(cfg, rng);
  tcn_ = TemporalConvNet(cfg, rng);
}

Tensor Binauralizer::forward(const Tensor& mono, const Tensor& conditioning) const {
  if (mono.ndim() != 2) throw ShapeError("binauralizer expects mono [B, T], got " + shape_str(mono.shape()));
  if (conditioning.ndim() != 3 || conditioning.size(0) != mono.size(0) || conditioning.size(2) != mono.size(1) ||
      conditioning.size(1) != cfg_.conditioning_features) {
    throw ValidationError("binauralizer: conditioning " + shape_str(conditioning.shape()) + " does not match audio " +
                          shape_str(mono.shape()));
  }
  std::optional<NoGradGuard> guard;
  if (frozen_) guard.emplace();
  const Tensor rho = geometric_warpfield(conditioning, cfg_.sample_rate, cfg_.ear_offset_m, cfg_.speed_of_sound);
  const Tensor warp = ops::add(rho, warp_.forward(conditioning));
  return tcn_.forward(apply_warp(mono, warp), conditioning);
}

nn::StateDict Binauralizer::state_dict() {
  nn::StateDict sd;
  warp_.register_state(sd, "warpnet");
  tcn_.register_state(sd, "convnet");
  return sd;
}

std::uint64_t Binauralizer::hash() { return state_dict().hash(); }

Tensor conditioning_tensor(const ConditioningTrack& c) {
  return Tensor({1, c.n_features, c.length()}, c.frames);
}

Waveform binauralize_utterance(const Waveform& mono, std::span<const ConditioningTrack> pool,
                               const Binauralizer& model, std::uint64_t seed) {
  if (mono.channels != 1) throw ValidationError("binauralize_utterance expects mono audio");
  const auto& cfg = model.config();
  if (mono.sample_rate != cfg.sample_rate) {
    throw ValidationError("audio at " + std::to_string(mono.sample_rate) + " Hz but converter runs at " +
                          std::to_string(cfg.sample_rate) + " Hz");
  }
  for (const auto& t : pool) {
    if (t.sample_rate != cfg.sample_rate) throw ValidationError("conditioning pool is not at the converter sample rate");
  }
  const SegmentBatch batch = segment_utterance(mono, cfg.segment_length);
  NoGradGuard guard;
  std::vector<Waveform> converted;
  converted.reserve(batch.segments.size());
  for (std::size_t s = 0; s < batch.segments.size(); ++s) {
    const ConditioningTrack c = sample_conditioning(pool, cfg.segment_length, derive_seed(seed, 0xC0D, s));
    const Tensor y = model.forward(Tensor({1, cfg.segment_length}, batch.segments[s]), conditioning_tensor(c));
    const auto v = y.values();
    converted.push_back(Waveform::stereo(v.first(static_cast<std::size_t>(cfg.segment_length)),
                                         v.subspan(static_cast<std::size_t>(cfg.segment_length)), cfg.sample_rate));
  }
  return merge_segments(converted, batch.original_length);
}

Tensor pretrain_loss(const Binauralizer& model, const PretrainBatch& batch, const PretrainOptions& opt) {
  const Tensor y = model.forward(batch.mono, batch.conditioning);
  Tensor loss = ops::mse(y, batch.target);
  if (opt.phase_loss) {
    loss = ops::add(loss, ops::scale(ops::stft_phase_loss(y, batch.target, opt.phase_fft, opt.phase_hop), opt.phase_weight));
  }
  return loss;
}

double pretrain_step(Binauralizer& model, const PretrainBatch& batch, Adam& optimizer, const PretrainOptions& opt) {
  if (model.frozen()) throw ValidationError("cannot pretrain a frozen binauralizer");
  const nn::StateDict sd = model.state_dict();
  sd.zero_grad();
  Tensor loss = pretrain_loss(model, batch, opt);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    std::ostringstream msg;
    msg << "non-finite pretraining loss " << value << " after " << optimizer.steps() << " steps (batch "
        << shape_str(batch.mono.shape()) << ")";
    throw TrainingAborted(msg.str());
  }
  loss.backward();
  optimizer.step(sd);
  return value;
}

std::vector<PretrainBatch> make_pretrain_chunks(std::span<const BinauralPair> corpus, std::int64_t chunk) {
  if (chunk < 1) throw ValidationError("chunk length must be positive");
  std::vector<PretrainBatch> out;
  for (const auto& p : corpus) {
    const std::int64_t n = std::min(p.mono.length(), p.binaural.length());
    if (p.conditioning.length() < n) throw ValidationError(p.name + ": conditioning shorter than audio");
    for (std::int64_t off = 0; off + chunk <= n; off += chunk) {
      PretrainBatch b;
      const auto m = p.mono.channel(0).subspan(static_cast<std::size_t>(off), static_cast<std::size_t>(chunk));
      b.mono = Tensor({1, chunk}, std::vector<double>(m.begin(), m.end()));
      std::vector<double> tgt;
      for (int c = 0; c < 2; ++c) {
        const auto s = p.binaural.channel(c).subspan(static_cast<std::size_t>(off), static_cast<std::size_t>(chunk));
        tgt.insert(tgt.end(), s.begin(), s.end());
      }
      b.target = Tensor({1, 2, chunk}, std::move(tgt));
      b.conditioning = conditioning_tensor(p.conditioning.slice(off, chunk));
      out.push_back(std::move(b));
    }
  }
  if (out.empty()) throw ValidationError("corpus has no pair longer than the chunk length");
  return out;
}

PretrainBatch stack_batch(std::span<const PretrainBatch> items, std::span<const std::size_t> which) {
  if (which.empty()) throw ValidationError("empty batch");
  const auto& first = items[which[0]];
  const std::int64_t T = first.mono.size(1), F = first.conditioning.size(1);
  const auto B = static_cast<std::int64_t>(which.size());
  std::vector<double> m, c, t;
  for (auto i : which) {
    const auto& it = items[i];
    m.insert(m.end(), it.mono.values().begin(), it.mono.values().end());
    c.insert(c.end(), it.conditioning.values().begin(), it.conditioning.values().end());
    t.insert(t.end(), it.target.values().begin(), it.target.values().end());
  }
  return {Tensor({B, T}, std::move(m)), Tensor({B, F, T}, std::move(c)), Tensor({B, 2, T}, std::move(t))};
}

}  // namespace m2s
