#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "traice3d/tensor.hpp"

namespace traice3d {

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;  // false for buffers (running stats, frozen features)
};
using NamedTensors = std::vector<NamedTensor>;

/// TR3D container: "TR3D", u32 version, u64 metadata length, UTF-8 JSON
/// metadata, u32 tensor count, index entries (u32 name length, name,
/// u32 rank, u64 extents, u64 payload offset), then the f32 payloads.
/// All integers and floats little-endian.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Snapshot of the given tensors (deep copies) into a checkpoint.
Checkpoint make_checkpoint(const NamedTensors& named, nlohmann::json metadata);

/// Copies checkpoint values into `named`; throws on missing names or shape
/// mismatch, naming the offending tensor.
void load_into(const Checkpoint& ckpt, NamedTensors& named);

}  // namespace traice3d
