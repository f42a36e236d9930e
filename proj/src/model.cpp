#include "m2s/model.hpp"

#include <cmath>
#include <sstream>

#include "m2s/errors.hpp"

namespace m2s {

namespace {

// Graphs are stored [B, N, d]; the trace lists them as (d, N).
void record_graph(ShapeTrace* trace, const std::string& name, const Tensor& g) {
  if (trace) trace->entries.emplace_back(name, Shape{g.size(2), g.size(1)});
}

// x[S, C] -> [1, C], mean over rows.
Tensor mean_rows(const Tensor& x) {
  const std::int64_t S = x.size(0), C = x.size(1);
  std::vector<double> out(static_cast<std::size_t>(C), 0.0);
  const auto v = x.values();
  for (std::int64_t s = 0; s < S; ++s) {
    for (std::int64_t c = 0; c < C; ++c) out[static_cast<std::size_t>(c)] += v[static_cast<std::size_t>(s * C + c)];
  }
  for (auto& o : out) o /= static_cast<double>(S);
  Tensor xin = x;
  return Tensor::make_result(Shape{1, C}, std::move(out), {&x}, [xin, S, C](const std::vector<double>& g) {
    auto gx = xin.mutable_grad();
    for (std::int64_t s = 0; s < S; ++s) {
      for (std::int64_t c = 0; c < C; ++c) gx[static_cast<std::size_t>(s * C + c)] += g[static_cast<std::size_t>(c)] / S;
    }
  });
}

std::int64_t frontend_time(const DetectorConfig& cfg) {
  std::int64_t t = (cfg.segment_length - cfg.frontend.sinc.kernel_size + 1) / 3;
  for (std::size_t i = 0; i < cfg.frontend.block_channels.size(); ++i) t /= 3;
  return t;
}

}  // namespace

DetectorConfig DetectorConfig::full() { return DetectorConfig{}; }

DetectorConfig DetectorConfig::fixture() {
  DetectorConfig cfg;
  cfg.segment_length = 4000;
  cfg.frontend.block_channels = {8, 8, 16, 16};
  return cfg;
}

std::int64_t DetectorConfig::spectral_nodes() const { return frontend.sinc.n_filters / 3; }

std::int64_t DetectorConfig::temporal_nodes() const { return frontend_time(*this); }

nlohmann::json to_json(const DetectorConfig& cfg) {
  const auto& s = cfg.frontend.sinc;
  return {{"n_filters", s.n_filters},
          {"kernel_size", s.kernel_size},
          {"sample_rate", s.sample_rate},
          {"min_low_hz", s.min_low_hz},
          {"min_band_hz", s.min_band_hz},
          {"block_channels", cfg.frontend.block_channels},
          {"segment_length", cfg.segment_length},
          {"branch_dim", cfg.branch_dim},
          {"fusion_dim", cfg.fusion_dim},
          {"spectral_pool", cfg.spectral_pool},
          {"temporal_pool", cfg.temporal_pool},
          {"fusion_pool", cfg.fusion_pool},
          {"projected_nodes", cfg.projected_nodes}};
}

DetectorConfig detector_config_from_json(const nlohmann::json& j) {
  try {
    DetectorConfig cfg;
    auto& s = cfg.frontend.sinc;
    s.n_filters = j.at("n_filters").get<int>();
    s.kernel_size = j.at("kernel_size").get<int>();
    s.sample_rate = j.at("sample_rate").get<double>();
    s.min_low_hz = j.at("min_low_hz").get<double>();
    s.min_band_hz = j.at("min_band_hz").get<double>();
    cfg.frontend.block_channels = j.at("block_channels").get<std::vector<std::int64_t>>();
    cfg.segment_length = j.at("segment_length").get<std::int64_t>();
    cfg.branch_dim = j.at("branch_dim").get<std::int64_t>();
    cfg.fusion_dim = j.at("fusion_dim").get<std::int64_t>();
    cfg.spectral_pool = j.at("spectral_pool").get<double>();
    cfg.temporal_pool = j.at("temporal_pool").get<double>();
    cfg.fusion_pool = j.at("fusion_pool").get<double>();
    cfg.projected_nodes = j.at("projected_nodes").get<std::int64_t>();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad detector config: ") + e.what());
  }
}

BranchEncoder::BranchEncoder(const DetectorConfig& cfg, ops::GraphAxis axis, Rng& rng)
    : axis_(axis), frontend_(cfg.frontend, rng) {
  if (cfg.frontend.block_channels.empty()) throw ValidationError("frontend needs at least one residual block");
  const std::int64_t channels = cfg.frontend.block_channels.back();
  const bool spectral = axis == ops::GraphAxis::Spectral;
  const std::int64_t nodes = spectral ? cfg.spectral_nodes() : cfg.temporal_nodes();
  if (nodes < 1) throw ValidationError("segment length leaves no graph nodes");
  const double ratio = spectral ? cfg.spectral_pool : cfg.temporal_pool;
  gat_ = GatLayer(channels, cfg.branch_dim, rng);
  pool_ = GraphPool(cfg.branch_dim, ratio, rng);
  proj_ = GraphProjection(ProjectionAxis::Nodes, pooled_count(nodes, ratio), cfg.projected_nodes, rng);
}

Tensor BranchEncoder::forward(const Tensor& channel, bool training, ShapeTrace* trace, const std::string& tag) {
  const Tensor fm = frontend_.forward(channel, training, trace, tag + ".");
  const Tensor g = ops::graph_from_feature_map(fm, axis_);
  record_graph(trace, tag + ".graph", g);
  Tensor h = gat_.forward(g, training);
  record_graph(trace, tag + ".gat", h);
  h = pool_.forward(h);
  record_graph(trace, tag + ".pool", h);
  h = proj_.forward(h);
  record_graph(trace, tag + ".proj", h);
  return h;
}

void BranchEncoder::register_state(nn::StateDict& sd, const std::string& prefix) {
  frontend_.register_state(sd, prefix + ".frontend");
  gat_.register_state(sd, prefix + ".gat");
  pool_.register_state(sd, prefix + ".pool");
  proj_.register_state(sd, prefix + ".proj");
}

Tensor fuse(const Tensor& left, const Tensor& right) {
  if (left.shape() != right.shape()) {
    throw ShapeError("fuse: " + shape_str(left.shape()) + " vs " + shape_str(right.shape()));
  }
  return ops::mul(left, right);
}

std::vector<double> logit_scores(const Tensor& logits) {
  if (logits.ndim() != 2 || logits.size(1) != 2) throw ShapeError("logits must be [B, 2], got " + shape_str(logits.shape()));
  std::vector<double> s;
  const auto v = logits.values();
  for (std::int64_t b = 0; b < logits.size(0); ++b) {
    s.push_back(v[static_cast<std::size_t>(2 * b)] - v[static_cast<std::size_t>(2 * b + 1)]);
  }
  return s;
}

M2SAdd::M2SAdd(const DetectorConfig& cfg, std::shared_ptr<Binauralizer> converter, std::uint64_t seed)
    : cfg_(cfg), converter_(std::move(converter)) {
  if (!converter_) throw ValidationError("detector needs a converter");
  if (converter_->config().sample_rate != cfg.frontend.sinc.sample_rate) {
    throw ValidationError("converter and frontend sample rates differ");
  }
  converter_->set_frozen(true);
  Rng rng(derive_seed(seed, 0xDE7));
  left_ = BranchEncoder(cfg, ops::GraphAxis::Spectral, rng);
  right_ = BranchEncoder(cfg, ops::GraphAxis::Temporal, rng);
  fusion_gat_ = GatLayer(cfg.branch_dim, cfg.fusion_dim, rng);
  fusion_pool_ = GraphPool(cfg.fusion_dim, cfg.fusion_pool, rng);
  fusion_proj_ = GraphProjection(ProjectionAxis::Features, cfg.fusion_dim, 1, rng);
  classifier_ = nn::Linear(cfg.embedding_nodes(), 2, rng);
}

std::pair<Tensor, Tensor> M2SAdd::dual_branch(const Tensor& stereo, bool training, ShapeTrace* trace) {
  if (stereo.ndim() != 3 || stereo.size(1) != 2 || stereo.size(2) != cfg_.segment_length) {
    throw ShapeError("dual branch expects [B, 2, " + std::to_string(cfg_.segment_length) + "], got " +
                     shape_str(stereo.shape()));
  }
  const std::int64_t B = stereo.size(0), T = stereo.size(2);
  const Tensor l = ops::reshape(ops::select_channel(stereo, 0), {B, T});
  const Tensor r = ops::reshape(ops::select_channel(stereo, 1), {B, T});
  Tensor gl = left_.forward(l, training, trace, "left");
  Tensor gr = right_.forward(r, training, trace, "right");
  return {gl, gr};
}

Tensor M2SAdd::fusion_encoder(const Tensor& fused, bool training, ShapeTrace* trace) {
  if (fused.ndim() != 3 || fused.size(1) != cfg_.projected_nodes || fused.size(2) != cfg_.branch_dim) {
    throw ShapeError("fusion encoder expects [B, " + std::to_string(cfg_.projected_nodes) + ", " +
                     std::to_string(cfg_.branch_dim) + "], got " + shape_str(fused.shape()));
  }
  record_graph(trace, "fusion.input", fused);
  Tensor h = fusion_gat_.forward(fused, training);
  record_graph(trace, "fusion.gat", h);
  h = fusion_pool_.forward(h);
  record_graph(trace, "fusion.pool", h);
  h = fusion_proj_.forward(h);
  record_graph(trace, "fusion.proj", h);
  return ops::reshape(h, {h.size(0), h.size(1)});
}

Tensor M2SAdd::classify(const Tensor& embedding) {
  if (embedding.ndim() != 2 || embedding.size(1) != classifier_.in_features()) {
    throw ShapeError("classifier expects [B, " + std::to_string(classifier_.in_features()) + "], got " +
                     shape_str(embedding.shape()));
  }
  return classifier_.forward(embedding);
}

Tensor M2SAdd::forward_stereo(const Tensor& stereo, bool training, ShapeTrace* trace) {
  auto [gl, gr] = dual_branch(stereo, training, trace);
  const Tensor logits = classify(fusion_encoder(fuse(gl, gr), training, trace));
  if (trace) trace->record("classifier", logits);
  return logits;
}

Tensor M2SAdd::forward_stereo_ablation(const Tensor& stereo, bool training, ShapeTrace* trace) {
  if (stereo.ndim() != 3 || stereo.size(1) != 2 || stereo.size(2) != cfg_.segment_length) {
    throw ShapeError("ablation expects [B, 2, " + std::to_string(cfg_.segment_length) + "], got " +
                     shape_str(stereo.shape()));
  }
  const std::int64_t B = stereo.size(0), T = stereo.size(2);
  const Tensor mid = ops::scale(ops::add(ops::select_channel(stereo, 0), ops::select_channel(stereo, 1)), 0.5);
  const Tensor g = left_.forward(ops::reshape(mid, {B, T}), training, trace, "left");
  const Tensor logits = classify(fusion_encoder(fuse(g, g), training, trace));
  if (trace) trace->record("classifier", logits);
  return logits;
}

Tensor M2SAdd::convert_segments(const Waveform& mono, std::span<const ConditioningTrack> pool,
                                std::uint64_t seed) const {
  if (mono.channels != 1) throw ValidationError("detector input must be mono");
  if (pool.empty()) throw ValidationError("empty conditioning pool");
  const double sr = converter_->config().sample_rate;
  if (mono.sample_rate != sr) {
    throw ValidationError("audio at " + std::to_string(mono.sample_rate) + " Hz but the detector runs at " +
                          std::to_string(sr) + " Hz");
  }
  for (const auto& t : pool) {
    if (t.sample_rate != sr) throw ValidationError("conditioning pool is not at the detector sample rate");
  }
  const std::int64_t T = cfg_.segment_length;
  const SegmentBatch batch = segment_utterance(mono, T);
  NoGradGuard guard;
  std::vector<double> out;
  out.reserve(batch.segments.size() * static_cast<std::size_t>(2 * T));
  for (std::size_t s = 0; s < batch.segments.size(); ++s) {
    const ConditioningTrack c = sample_conditioning(pool, T, derive_seed(seed, 0xC0D, s));
    const Tensor y = converter_->forward(Tensor({1, T}, batch.segments[s]), conditioning_tensor(c));
    const auto v = y.values();
    out.insert(out.end(), v.begin(), v.end());
  }
  return Tensor({static_cast<std::int64_t>(batch.segments.size()), 2, T}, std::move(out));
}

Tensor M2SAdd::forward(const Waveform& mono, std::span<const ConditioningTrack> pool, std::uint64_t seed,
                       bool ablation) {
  if (!converter_->frozen()) throw ValidationError("the converter must be frozen during detection");
  const Tensor stereo = convert_segments(mono, pool, seed);
  const Tensor logits = ablation ? forward_stereo_ablation(stereo, false) : forward_stereo(stereo, false);
  return mean_rows(logits);
}

nn::StateDict M2SAdd::state_dict() {
  nn::StateDict sd;
  left_.register_state(sd, "left");
  right_.register_state(sd, "right");
  fusion_gat_.register_state(sd, "fusion.gat");
  fusion_pool_.register_state(sd, "fusion.pool");
  fusion_proj_.register_state(sd, "fusion.proj");
  classifier_.register_state(sd, "classifier");
  return sd;
}

Checkpoint detector_checkpoint(M2SAdd& model, const nlohmann::json& extra_meta) {
  Checkpoint ck;
  ck.kind = "detector";
  ck.meta = extra_meta.is_object() ? extra_meta : nlohmann::json::object();
  ck.meta["config"] = to_json(model.config());
  const Checkpoint conv = binauralizer_checkpoint(model.converter());
  ck.meta["converter"] = conv.meta;
  ck.collect(model.state_dict());
  for (const auto& e : conv.entries) {
    auto copy = e;
    copy.name = "converter." + e.name;
    ck.entries.push_back(std::move(copy));
  }
  return ck;
}

M2SAdd detector_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "detector") throw ValidationError("checkpoint holds a " + ckpt.kind + ", not a detector");
  if (!ckpt.meta.contains("config")) throw ValidationError("detector checkpoint has no config");
  auto converter = std::make_shared<Binauralizer>(binauralizer_from_checkpoint(ckpt, "converter."));
  M2SAdd model(detector_config_from_json(ckpt.meta.at("config")), converter, 0);
  ckpt.restore(model.state_dict());
  return model;
}

void save_detector(const std::filesystem::path& path, M2SAdd& model, const nlohmann::json& extra_meta) {
  const Checkpoint ck = detector_checkpoint(model, extra_meta);
  save_checkpoint(path, ck);
  std::ostringstream card;
  card << "M2S-ADD detector\n"
       << "detector parameters: " << model.parameter_count() << "\n"
       << "converter hash: " << model.converter().hash() << " (frozen)\n"
       << "config: " << ck.meta.at("config").dump() << "\n";
  for (const auto& [k, v] : ck.meta.items()) {
    if (k != "config" && k != "converter") card << k << ": " << v.dump() << "\n";
  }
  write_model_card(path, card.str());
}

M2SAdd load_detector(const std::filesystem::path& path) { return detector_from_checkpoint(load_checkpoint(path)); }

}  // namespace m2s
