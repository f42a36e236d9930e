#include "m2s/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "m2s/errors.hpp"

namespace m2s {

namespace {

constexpr char kMagic[8] = {'M', '2', 'S', 'C', 'K', 'P', 'T', '\0'};

std::filesystem::path temp_sibling(const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp";
  return tmp;
}

}  // namespace

const Checkpoint::Entry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

void Checkpoint::collect(const nn::StateDict& sd, const std::string& prefix) {
  for (const auto& [name, t] : sd.parameters()) {
    entries.push_back({prefix + name, false, t->shape(), t->vec()});
  }
  for (const auto& [name, b] : sd.buffers()) {
    entries.push_back({prefix + name, true, Shape{static_cast<std::int64_t>(b->size())}, *b});
  }
}

void Checkpoint::restore(const nn::StateDict& sd, const std::string& prefix) const {
  for (const auto& [name, t] : sd.parameters()) {
    const Entry* e = find(prefix + name);
    if (!e) throw ValidationError("checkpoint is missing parameter " + prefix + name);
    if (e->shape != t->shape()) {
      throw ValidationError("checkpoint parameter " + prefix + name + " has shape " + shape_str(e->shape) +
                            ", model expects " + shape_str(t->shape()));
    }
    std::copy(e->values.begin(), e->values.end(), t->mutable_values().begin());
  }
  for (const auto& [name, b] : sd.buffers()) {
    const Entry* e = find(prefix + name);
    if (!e) throw ValidationError("checkpoint is missing buffer " + prefix + name);
    if (e->values.size() != b->size()) throw ValidationError("checkpoint buffer " + prefix + name + " has the wrong size");
    *b = e->values;
  }
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  const auto tmp = temp_sibling(path);
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["kind"] = ckpt.kind;
  header["meta"] = ckpt.meta;
  auto& table = header["tensors"] = nlohmann::json::array();
  for (const auto& e : ckpt.entries) {
    if (static_cast<std::int64_t>(e.values.size()) != shape_numel(e.shape)) {
      throw ValidationError("checkpoint entry " + e.name + " disagrees with its shape");
    }
    table.push_back({{"name", e.name}, {"buffer", e.buffer}, {"shape", e.shape}});
  }
  const std::string h = header.dump();
  std::string out(kMagic, sizeof kMagic);
  auto put = [&out](const void* p, std::size_t n) { out.append(static_cast<const char*>(p), n); };
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t hlen = h.size();
  put(&version, sizeof version);
  put(&hlen, sizeof hlen);
  out += h;
  for (const auto& e : ckpt.entries) put(e.values.data(), e.values.size() * sizeof(double));
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t hlen = 0;
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw IoError(path.string() + ": not a checkpoint file");
  if (!in.read(reinterpret_cast<char*>(&version), sizeof version) || version != kCheckpointVersion) {
    throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  if (!in.read(reinterpret_cast<char*>(&hlen), sizeof hlen) || hlen > (1ull << 30)) {
    throw IoError(path.string() + ": corrupt header length");
  }
  std::string h(hlen, '\0');
  if (!in.read(h.data(), static_cast<std::streamsize>(hlen))) throw IoError(path.string() + ": truncated header");
  Checkpoint ckpt;
  try {
    const auto header = nlohmann::json::parse(h);
    ckpt.kind = header.at("kind").get<std::string>();
    ckpt.meta = header.at("meta");
    for (const auto& t : header.at("tensors")) {
      Checkpoint::Entry e;
      e.name = t.at("name").get<std::string>();
      e.buffer = t.at("buffer").get<bool>();
      e.shape = t.at("shape").get<Shape>();
      ckpt.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& err) {
    throw IoError(path.string() + ": corrupt header (" + err.what() + ")");
  }
  for (auto& e : ckpt.entries) {
    e.values.resize(static_cast<std::size_t>(shape_numel(e.shape)));
    if (!in.read(reinterpret_cast<char*>(e.values.data()), static_cast<std::streamsize>(e.values.size() * sizeof(double)))) {
      throw IoError(path.string() + ": truncated payload at " + e.name);
    }
  }
  return ckpt;
}

std::filesystem::path write_model_card(const std::filesystem::path& checkpoint_path, const std::string& text) {
  auto card = checkpoint_path;
  card += ".card.txt";
  write_file_atomic(card, text);
  return card;
}

nlohmann::json to_json(const BinauralizerConfig& cfg) {
  return {{"sample_rate", cfg.sample_rate},         {"speed_of_sound", cfg.speed_of_sound},
          {"ear_offset_m", cfg.ear_offset_m},       {"conditioning_features", cfg.conditioning_features},
          {"warp_channels", cfg.warp_channels},     {"warp_layers", cfg.warp_layers},
          {"warp_kernel", cfg.warp_kernel},         {"tcn_channels", cfg.tcn_channels},
          {"tcn_blocks", cfg.tcn_blocks},           {"dilations", cfg.dilations},
          {"segment_length", cfg.segment_length}};
}

BinauralizerConfig binauralizer_config_from_json(const nlohmann::json& j) {
  BinauralizerConfig c;
  c.sample_rate = j.at("sample_rate").get<double>();
  c.speed_of_sound = j.at("speed_of_sound").get<double>();
  c.ear_offset_m = j.at("ear_offset_m").get<double>();
  c.conditioning_features = j.at("conditioning_features").get<int>();
  c.warp_channels = j.at("warp_channels").get<int>();
  c.warp_layers = j.at("warp_layers").get<int>();
  c.warp_kernel = j.at("warp_kernel").get<int>();
  c.tcn_channels = j.at("tcn_channels").get<int>();
  c.tcn_blocks = j.at("tcn_blocks").get<int>();
  c.dilations = j.at("dilations").get<std::vector<int>>();
  c.segment_length = j.at("segment_length").get<std::int64_t>();
  return c;
}

Checkpoint binauralizer_checkpoint(Binauralizer& model, const nlohmann::json& extra_meta) {
  Checkpoint ckpt;
  ckpt.kind = "binauralizer";
  ckpt.meta = extra_meta;
  ckpt.meta["config"] = to_json(model.config());
  ckpt.meta["frozen"] = model.frozen();
  ckpt.meta["pretrained"] = model.pretrained();
  ckpt.collect(model.state_dict());
  return ckpt;
}

Binauralizer binauralizer_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix) {
  const auto& meta = prefix.empty() ? ckpt.meta : ckpt.meta.at("converter");
  Binauralizer model;
  try {
    model = Binauralizer(binauralizer_config_from_json(meta.at("config")), 0);
    model.set_frozen(meta.at("frozen").get<bool>());
    model.set_pretrained(meta.at("pretrained").get<bool>());
  } catch (const nlohmann::json::exception& err) {
    throw ValidationError(std::string("checkpoint lacks converter metadata: ") + err.what());
  }
  ckpt.restore(model.state_dict(), prefix);
  return model;
}

void save_binauralizer(const std::filesystem::path& path, Binauralizer& model, const nlohmann::json& extra_meta) {
  save_checkpoint(path, binauralizer_checkpoint(model, extra_meta));
}

Binauralizer load_binauralizer(const std::filesystem::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.kind != "binauralizer") throw ValidationError(path.string() + " holds a " + ckpt.kind + " checkpoint, not a binauralizer");
  return binauralizer_from_checkpoint(ckpt);
}

}  // namespace m2s
