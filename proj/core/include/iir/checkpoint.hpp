#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "iir/model.hpp"

namespace iir {

// Container layout: "IIRC", u32 version, u64 header length, UTF-8 JSON header
// {"model": ModelConfig, "step": n, "train_config": {...}}, u32 tensor count,
// then per tensor: u32 name length, name bytes, one IIRT tensor record.
inline constexpr char kCheckpointMagic[4] = {'I', 'I', 'R', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

struct LoadedCheckpoint {
  std::unique_ptr<ModelState> state;
  // Non-parameter tensors stored alongside the weights (optimizer moments).
  std::vector<NamedTensor> extra;
};

// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const ModelState& state,
                     const std::vector<NamedTensor>& extra = {});
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace iir
