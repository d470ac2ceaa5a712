#pragma once

#include <filesystem>

#include "iir/train.hpp"

namespace iir::testing {

// CPU-scale stand-in for the 64x64 / 20k-step protocol: 32x32 images, a
// width-32 U-Net and fewer steps. Both ablation models share everything but
// the removal switch.
struct DeskSetup {
  int image_size = 32;
  int train_count = 2000;
  int test_count = 150;
  std::uint64_t train_seed = 7;
  std::uint64_t test_seed = 8;
  std::int64_t steps = 10000;
  double learning_rate = 3e-4;
  int eval_cfg_steps = 20;
  double cfg_scale = 9.0;
};

TrainConfig desk_train_config(const DeskSetup& desk, bool removal_enabled, const std::filesystem::path& dataset);

}  // namespace iir::testing
