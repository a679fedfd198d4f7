#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rlkv/model.hpp"
#include "rlkv/tensor.hpp"

namespace rlkv {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'R', 'L', 'K', 'V'};

// Name the adapter tensor gets inside the manifest when present.
inline constexpr const char* kAdapterTensorName = "adapters.alpha";

struct CheckpointProvenance {
  std::string stage;
  std::int64_t step_count = 0;
  std::uint64_t config_hash = 0;

  bool operator==(const CheckpointProvenance&) const = default;
};

// On disk: 4 magic bytes, little-endian u32 version, little-endian u64 header
// length, a JSON header (config snapshot, tensor manifest, provenance), then
// raw little-endian f32 payloads in manifest order.
struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> tensors;
  CheckpointProvenance provenance;
};

// FNV-1a over the canonical serialized form of the config; stable across runs
// so provenance can tie artifacts to the configuration that made them.
std::uint64_t config_hash(const ModelConfig& config);

Checkpoint make_checkpoint(const Weights& weights, const GatingAdapters* adapters,
                           CheckpointProvenance provenance);

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);  // throws std::runtime_error

// Rebuilds model weights from a loaded checkpoint; every model tensor must be
// present with its exact shape. Extra non-model tensors (the adapters) are
// ignored here.
Weights weights_from_checkpoint(const Checkpoint& checkpoint);

// Extracts the adapter matrix if the checkpoint carries one. The returned
// adapters track gradients so training can resume from them.
std::optional<GatingAdapters> adapters_from_checkpoint(const Checkpoint& checkpoint);

}  // namespace rlkv
