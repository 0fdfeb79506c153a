#pragma once

// Single-file checkpoints: magic, format version, a JSON header (phase,
// lineage, epoch, config snapshot, taxonomy, rng states, tensor table) and
// the raw little-endian float32 tensor blobs.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "gfss/config.hpp"
#include "gfss/losses.hpp"
#include "gfss/model.hpp"

namespace gfss {

inline constexpr char kCheckpointMagic[8] = {'G', 'F', 'S', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Phase phase = Phase::pretrain;
  std::string lineage_id;
  std::string parent_lineage;  // phase-1 lineage for phase-2 checkpoints
  std::size_t epoch = 0;
  std::map<std::string, std::string> config;
  ClassTaxonomy taxonomy;
  std::map<std::string, std::string> rng_states;
  TensorMap tensors;
};

// Content hash over phase, parent and tensor bytes.
inline std::string compute_lineage_id(const Checkpoint& c) {
  std::uint64_t h = fnv1a64(phase_name(c.phase));
  h = fnv1a64(c.parent_lineage, h);
  h = fnv1a64(std::to_string(c.epoch), h);
  for (const auto& [name, t] : c.tensors) {
    h = fnv1a64(name, h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float)), h);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  using nlohmann::json;
  json header;
  header["version"] = kCheckpointVersion;
  header["phase"] = phase_name(c.phase);
  header["lineage_id"] = c.lineage_id;
  header["parent_lineage"] = c.parent_lineage;
  header["epoch"] = c.epoch;
  header["config"] = c.config;
  header["taxonomy"] = {{"base", c.taxonomy.base_ids},
                        {"novel", c.taxonomy.novel_ids},
                        {"background", c.taxonomy.background_id}};
  header["rng"] = c.rng_states;
  header["dtype"] = "f32";
  json table = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    table.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * sizeof(float);
  }
  header["tensors"] = table;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : c.tensors)
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  using nlohmann::json;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw LoadError(path.string() + " is not a checkpoint");
  if (version != kCheckpointVersion)
    throw LoadError("checkpoint " + path.string() + " has format version " + std::to_string(version) +
                    ", this build reads version " + std::to_string(kCheckpointVersion));
  if (len > (1u << 30)) throw LoadError("checkpoint header is implausibly large");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw LoadError("checkpoint header truncated");

  Checkpoint c;
  try {
    const json h = json::parse(text);
    const std::string phase = h.at("phase");
    if (phase != "pretrain" && phase != "finetune") throw LoadError("unknown phase " + phase);
    c.phase = phase == "pretrain" ? Phase::pretrain : Phase::finetune;
    c.lineage_id = h.at("lineage_id");
    c.parent_lineage = h.at("parent_lineage");
    c.epoch = h.at("epoch");
    c.config = h.at("config").get<std::map<std::string, std::string>>();
    c.taxonomy.base_ids = h.at("taxonomy").at("base").get<std::vector<int>>();
    c.taxonomy.novel_ids = h.at("taxonomy").at("novel").get<std::vector<int>>();
    c.taxonomy.background_id = h.at("taxonomy").at("background");
    c.rng_states = h.at("rng").get<std::map<std::string, std::string>>();
    if (h.at("dtype") != "f32") throw LoadError("unsupported dtype");
    std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    for (const auto& e : h.at("tensors")) {
      const Shape shape = e.at("shape").get<Shape>();
      const std::uint64_t off = e.at("offset");
      const std::size_t n = shape_numel(shape);
      if (off + n * sizeof(float) > blob.size())
        throw LoadError("tensor " + e.at("name").get<std::string>() + " runs past end of file");
      Tensor<float> t(shape);
      std::memcpy(t.data(), blob.data() + off, n * sizeof(float));
      c.tensors[e.at("name").get<std::string>()] = std::move(t);
    }
  } catch (const json::exception& e) {
    throw LoadError(std::string("malformed checkpoint header: ") + e.what());
  }
  return c;
}

// Phase-2 entry check: the checkpoint must be a phase-1 artifact trained on
// the same class split.
inline void require_pretrain_checkpoint(const Checkpoint& c, const ClassTaxonomy& tax) {
  if (c.phase != Phase::pretrain)
    throw LineageError("fine-tuning needs a pre-training checkpoint, got a " +
                       std::string(phase_name(c.phase)) + " checkpoint (lineage " + c.lineage_id + ")");
  if (!(c.taxonomy == tax))
    throw LineageError("checkpoint " + c.lineage_id + " was trained on a different class split");
}

// Pre-training resumes only from pre-training state.
inline void require_resumable_pretrain(const Checkpoint& c) {
  if (c.phase != Phase::pretrain)
    throw LineageError("a fine-tuned checkpoint (lineage " + c.lineage_id +
                       ") cannot be loaded for pre-training");
}

template <typename T>
GfssModel<T> model_from_checkpoint(const Checkpoint& c, const TrainConfig& cfg) {
  GfssModel<T> m(cfg, c.taxonomy);
  m.load_state(c.tensors);
  m.set_phase(c.phase);
  return m;
}

}  // namespace gfss
