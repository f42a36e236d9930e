#pragma once

// Seeded detector training with weighted cross-entropy, best-dev checkpoint
// selection and resumable runs; converter pretraining on paired corpora.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "m2s/adam.hpp"
#include "m2s/evaluation.hpp"
#include "m2s/model.hpp"

namespace m2s {

struct TrainConfig {
  std::int64_t epochs = 400;
  std::int64_t batch_size = 24;
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1234;
  // (bonafide, spoof); unset = inverse class frequency of the training protocol.
  std::optional<std::array<double, 2>> class_weights;
  std::string optimizer = "adam";
  std::filesystem::path checkpoint_dir = "checkpoints";
  std::string detector = "full";  // full | fixture

  static std::span<const std::string> keys();
  void set(const std::string& key, const std::string& value);
  void validate() const;
  DetectorConfig detector_config() const;
};

nlohmann::json to_json(const TrainConfig& cfg);

// Weights proportional to 1 / class count, scaled to sum to 2.
std::array<double, 2> inverse_frequency_weights(std::int64_t n_bonafide, std::int64_t n_spoof);

// Mean over the batch of -w[y] log softmax(logits)[y]; label 0 = bonafide.
Tensor weighted_ce_loss(const Tensor& logits, std::span<const int> labels, std::array<double, 2> weights);

// Utterances converted once with the frozen converter, kept as stereo segments.
struct ConvertedSet {
  std::vector<std::string> utterance_ids;
  std::vector<std::string> attack_ids;
  std::vector<int> labels;               // 0 bonafide, 1 spoof
  std::vector<Tensor> segments;          // [S, 2, T] per utterance
};

// Utterance i is converted with conditioning seed derive_seed(seed, 0xC0E, i).
ConvertedSet convert_set(const M2SAdd& model, const TrialProtocol& protocol, std::span<const Waveform> audio,
                         std::span<const ConditioningTrack> pool, std::uint64_t seed);

// Eval-mode utterance scores (mean segment logits, bonafide minus spoof).
ScoreFile score_converted(M2SAdd& model, const ConvertedSet& set);

struct EpochMetrics {
  std::int64_t epoch = 0;
  double train_loss = 0.0;
  double dev_eer = 0.0;  // NaN without a dev set
  double wallclock = 0.0;
};

struct TrainOptions {
  bool resume = false;
  // Stop after this many epochs in this call (simulates an interrupted run); 0 = no limit.
  std::int64_t stop_after = 0;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::int64_t best_epoch = 0;
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::filesystem::path metrics_log;
  std::array<double, 2> class_weights{1.0, 1.0};
};

// Trains the detector in place. Epoch e draws its shuffle and segment choice
// from derive_seed(seed, 0x7A1, e), so resumed runs replay the same stream.
// Files in checkpoint_dir: last.ckpt, best.ckpt, metrics.log.
// Throws TrainingAborted on a non-finite loss or if the converter changes.
TrainResult train(const TrainConfig& cfg, M2SAdd& model, const ConvertedSet& train_set, const ConvertedSet* dev_set,
                  const TrainOptions& opt = {});

struct PretrainConfig {
  std::int64_t epochs = 100;
  std::int64_t batch_size = 8;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1234;
  std::int64_t chunk_length = 4000;
  bool phase_loss = false;
  double phase_weight = 0.1;
  std::int64_t warp_channels = 64;
  std::int64_t tcn_channels = 64;
  std::int64_t tcn_blocks = 3;
  double ear_offset_m = 0.0875;
  std::int64_t segment_length = kSegmentLength;
  double sample_rate = 16000.0;

  static std::span<const std::string> keys();
  void set(const std::string& key, const std::string& value);
  void validate() const;
  BinauralizerConfig converter_config() const;
};

struct PretrainResult {
  Binauralizer model;
  std::vector<double> epoch_loss;
};

// Adam over chunked pairs; appends `epoch loss wallclock` rows to `loss_log`
// when given. The returned converter is marked pretrained and frozen.
PretrainResult pretrain_converter(const PretrainConfig& cfg, std::span<const BinauralPair> corpus,
                                  const std::filesystem::path& loss_log = {});

}  // namespace m2s
