#pragma once

#include <memory>
#include <vector>

#include "m2s/model.hpp"

namespace m2s::testing {

inline BinauralizerConfig small_converter_config(std::int64_t segment_length) {
  BinauralizerConfig cfg;
  cfg.warp_channels = 8;
  cfg.tcn_channels = 8;
  cfg.tcn_blocks = 1;
  cfg.segment_length = segment_length;
  return cfg;
}

inline std::shared_ptr<Binauralizer> small_converter(std::int64_t segment_length, std::uint64_t seed = 5) {
  return std::make_shared<Binauralizer>(small_converter_config(segment_length), seed);
}

// Few blocks and short segments; keeps 23 spectral nodes.
inline DetectorConfig tiny_detector_config() {
  DetectorConfig cfg;
  cfg.segment_length = 1200;
  cfg.frontend.block_channels = {4, 8};
  return cfg;
}

inline std::vector<ConditioningTrack> small_pool(std::int64_t length) {
  std::vector<ConditioningTrack> pool;
  for (int i = 0; i < 3; ++i) pool.push_back(circular_walk(length, 16000.0, 1.5, 0.5 + 0.25 * i, 0.7 * i));
  return pool;
}

}  // namespace m2s::testing
