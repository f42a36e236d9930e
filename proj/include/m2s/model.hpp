#pragma once

// The detector: frozen converter -> left/right branch encoders -> product
// fusion -> fusion encoder -> two-way classifier.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "m2s/binauralizer.hpp"
#include "m2s/checkpoint.hpp"
#include "m2s/dataio.hpp"
#include "m2s/frontend.hpp"
#include "m2s/graph_attention.hpp"

namespace m2s {

struct DetectorConfig {
  FrontendConfig frontend;
  std::int64_t segment_length = kSegmentLength;
  std::int64_t branch_dim = 32;
  std::int64_t fusion_dim = 16;
  double spectral_pool = 0.6;
  double temporal_pool = 0.8;
  double fusion_pool = 0.58;
  std::int64_t projected_nodes = 12;

  // Full-size layout for 64600-sample segments.
  static DetectorConfig full();
  // Desk-scale variant used by the synthetic fixture corpus: 4000-sample
  // segments and four narrower residual blocks.
  static DetectorConfig fixture();

  // Node counts implied by the segment length and frontend.
  std::int64_t spectral_nodes() const;
  std::int64_t temporal_nodes() const;
  std::int64_t embedding_nodes() const { return pooled_count(projected_nodes, fusion_pool); }
};

nlohmann::json to_json(const DetectorConfig& cfg);
DetectorConfig detector_config_from_json(const nlohmann::json& j);

// One branch encoder: frontend, graph formation on its axis, GAT, pool and
// projection to `projected_nodes` nodes.
class BranchEncoder {
 public:
  BranchEncoder() = default;
  BranchEncoder(const DetectorConfig& cfg, ops::GraphAxis axis, Rng& rng);

  // channel[B, T] -> [B, projected_nodes, branch_dim]
  Tensor forward(const Tensor& channel, bool training, ShapeTrace* trace, const std::string& tag);
  Frontend& frontend() { return frontend_; }
  GatLayer& gat() { return gat_; }
  GraphPool& pool() { return pool_; }
  void register_state(nn::StateDict& sd, const std::string& prefix);

 private:
  ops::GraphAxis axis_ = ops::GraphAxis::Spectral;
  Frontend frontend_;
  GatLayer gat_;
  GraphPool pool_;
  GraphProjection proj_;
};

// Element-wise product of two equally shaped graphs.
Tensor fuse(const Tensor& left, const Tensor& right);

// bonafide logit minus spoof logit, per row of logits[B, 2].
std::vector<double> logit_scores(const Tensor& logits);

class M2SAdd {
 public:
  M2SAdd() = default;
  // Builds detector parameters from `seed`; the converter is frozen.
  M2SAdd(const DetectorConfig& cfg, std::shared_ptr<Binauralizer> converter, std::uint64_t seed);

  const DetectorConfig& config() const { return cfg_; }
  Binauralizer& converter() { return *converter_; }
  std::shared_ptr<Binauralizer> converter_ptr() const { return converter_; }

  // stereo[B, 2, T] -> (left, right) graphs [B, 12, 32]
  std::pair<Tensor, Tensor> dual_branch(const Tensor& stereo, bool training, ShapeTrace* trace = nullptr);
  // [B, 12, 32] -> embedding [B, 7]
  Tensor fusion_encoder(const Tensor& fused, bool training, ShapeTrace* trace = nullptr);
  // [B, 7] -> logits [B, 2]
  Tensor classify(const Tensor& embedding);

  // Full detector on converted segments: stereo[B, 2, T] -> logits[B, 2].
  Tensor forward_stereo(const Tensor& stereo, bool training, ShapeTrace* trace = nullptr);
  // Ablation without the dual branch: the channel mean goes through the left
  // branch and its output is fused with itself.
  Tensor forward_stereo_ablation(const Tensor& stereo, bool training, ShapeTrace* trace = nullptr);

  // Utterance-level logits [1, 2]: segment, convert each segment with a
  // conditioning window drawn from `pool`, classify, average over segments.
  Tensor forward(const Waveform& mono, std::span<const ConditioningTrack> pool, std::uint64_t seed,
                 bool ablation = false);

  // Converted stereo segments [S, 2, T] of an utterance (no gradient).
  Tensor convert_segments(const Waveform& mono, std::span<const ConditioningTrack> pool, std::uint64_t seed) const;

  BranchEncoder& left() { return left_; }
  BranchEncoder& right() { return right_; }
  GatLayer& fusion_gat() { return fusion_gat_; }
  nn::Linear& classifier() { return classifier_; }

  // Detector parameters only; the converter is excluded.
  nn::StateDict state_dict();
  std::int64_t parameter_count() { return state_dict().parameter_count(); }

 private:
  DetectorConfig cfg_;
  std::shared_ptr<Binauralizer> converter_;
  BranchEncoder left_;
  BranchEncoder right_;
  GatLayer fusion_gat_;
  GraphPool fusion_pool_;
  GraphProjection fusion_proj_;
  nn::Linear classifier_;
};

// Detector checkpoint: detector tensors plus the embedded converter under
// "converter.", configuration and caller metadata.
Checkpoint detector_checkpoint(M2SAdd& model, const nlohmann::json& extra_meta = nlohmann::json::object());
M2SAdd detector_from_checkpoint(const Checkpoint& ckpt);
void save_detector(const std::filesystem::path& path, M2SAdd& model,
                   const nlohmann::json& extra_meta = nlohmann::json::object());
M2SAdd load_detector(const std::filesystem::path& path);

}  // namespace m2s
