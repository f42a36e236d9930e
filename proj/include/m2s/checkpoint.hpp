#pragma once

// Versioned checkpoint container: magic, format version, a JSON header
// (kind, metadata, tensor table) and the raw float64 payload. Writes go to a
// temporary file that is renamed into place.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "m2s/binauralizer.hpp"
#include "m2s/nn.hpp"

namespace m2s {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  struct Entry {
    std::string name;
    bool buffer = false;
    Shape shape;
    std::vector<double> values;
  };

  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<Entry> entries;

  const Entry* find(const std::string& name) const;
  // Appends every parameter and buffer of `sd` under `prefix`.
  void collect(const nn::StateDict& sd, const std::string& prefix = "");
  // Copies stored values into `sd`; every entry of `sd` must be present with
  // a matching shape (ValidationError otherwise).
  void restore(const nn::StateDict& sd, const std::string& prefix = "") const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws IoError for unreadable or corrupt files.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Writes `text` atomically next to the checkpoint as `<path>.card.txt`.
std::filesystem::path write_model_card(const std::filesystem::path& checkpoint_path, const std::string& text);

// Writes `text` to `path` via a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

nlohmann::json to_json(const BinauralizerConfig& cfg);
BinauralizerConfig binauralizer_config_from_json(const nlohmann::json& j);

Checkpoint binauralizer_checkpoint(Binauralizer& model, const nlohmann::json& extra_meta = nlohmann::json::object());
Binauralizer binauralizer_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix = "");

void save_binauralizer(const std::filesystem::path& path, Binauralizer& model,
                       const nlohmann::json& extra_meta = nlohmann::json::object());
Binauralizer load_binauralizer(const std::filesystem::path& path);

}  // namespace m2s
