#pragma once

#include <cstdint>

#include "iir/image.hpp"
#include "iir/schedule.hpp"

namespace iir {

// R(x0): channels 0..2 hold the color-removed, noised image x_k'; channel 3
// holds the binary Canny map of the original image.
class ConditionTensor {
 public:
  static constexpr int kChannels = 4;
  static constexpr int kEdgeChannel = 3;

  ConditionTensor() = default;
  explicit ConditionTensor(Image channels);

  int height() const { return data_.height(); }
  int width() const { return data_.width(); }
  const Image& image() const { return data_; }
  float at(int y, int x, int c) const { return data_.at(y, x, c); }

  bool operator==(const ConditionTensor& o) const = default;

 private:
  Image data_;
};

struct CannyParams {
  // Hysteresis thresholds on the 0..255 luma scale.
  double low = 100.0;
  double high = 200.0;
  double sigma = 1.4;
};

struct IirmOptions {
  CannyParams canny;
  // Drop color removal and noising; the condition becomes [x0, C(x0)].
  bool removal_enabled = true;
  // Restrict the condition noise to the RoI instead of the whole image.
  bool noise_roi_only = false;
};

// BT.601 luma replicated to all channels.
Image rgb_to_gray(const Image& img);

// rgb2gray inside the RoI, input copied verbatim outside.
Image remove_color(const Image& img, const RoIMask& roi);

// x_k' = q_sample(img, k) with noise drawn from `seed`. k == 0 returns img.
Image noise_condition(const Image& img, int k, const BetaSchedule& sched, std::uint64_t seed);
// Same, but pixels with region == 0 keep their input values.
Image noise_condition(const Image& img, int k, const BetaSchedule& sched, std::uint64_t seed,
                      const RoIMask& region);

EdgeMap canny_edges(const Image& img, const CannyParams& params = {});

ConditionTensor pack_condition(const Image& rgb, const EdgeMap& edges);

ConditionTensor assemble_condition(const Image& x0, const RoIMask& roi, int k, const BetaSchedule& sched,
                                   std::uint64_t seed, const IirmOptions& options = {});

}  // namespace iir
