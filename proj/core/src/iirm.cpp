#include "iir/iirm.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "iir/rng.hpp"

namespace iir {

namespace {

constexpr float kLumaR = 0.299f;
constexpr float kLumaG = 0.587f;
constexpr float kLumaB = 0.114f;

float luma(float r, float g, float b) {
  if (r == g && g == b) return r;
  return std::clamp(kLumaR * r + kLumaG * g + kLumaB * b, 0.0f, 1.0f);
}

void require_rgb(const Image& img, const char* op) {
  require(img.channels() == 3, std::string(op) + ": expected a 3-channel image");
}

// Plane of doubles with replicate-border reads.
struct Plane {
  int h = 0;
  int w = 0;
  std::vector<double> v;

  Plane(int height, int width) : h(height), w(width), v(static_cast<std::size_t>(height) * width, 0.0) {}
  double& operator()(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
  double operator()(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }
  double clamped(int y, int x) const { return (*this)(std::clamp(y, 0, h - 1), std::clamp(x, 0, w - 1)); }
};

std::array<double, 5> gaussian_kernel5(double sigma) {
  std::array<double, 5> k{};
  double sum = 0.0;
  for (int i = -2; i <= 2; ++i) {
    k[i + 2] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    sum += k[i + 2];
  }
  for (auto& v : k) v /= sum;
  return k;
}

Plane blur5(const Plane& src, double sigma) {
  const auto k = gaussian_kernel5(sigma);
  Plane tmp(src.h, src.w);
  Plane out(src.h, src.w);
  for (int y = 0; y < src.h; ++y) {
    for (int x = 0; x < src.w; ++x) {
      double acc = 0.0;
      for (int i = -2; i <= 2; ++i) acc += k[i + 2] * src.clamped(y, x + i);
      tmp(y, x) = acc;
    }
  }
  for (int y = 0; y < src.h; ++y) {
    for (int x = 0; x < src.w; ++x) {
      double acc = 0.0;
      for (int i = -2; i <= 2; ++i) acc += k[i + 2] * tmp.clamped(y + i, x);
      out(y, x) = acc;
    }
  }
  return out;
}

}  // namespace

ConditionTensor::ConditionTensor(Image channels) : data_(std::move(channels)) {
  require(data_.channels() == kChannels, "condition tensor must have exactly 4 channels");
}

Image rgb_to_gray(const Image& img) {
  require_rgb(img, "rgb_to_gray");
  Image out(img.height(), img.width(), 3);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const float g = luma(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = g;
    }
  }
  return out;
}

Image remove_color(const Image& img, const RoIMask& roi) {
  require_rgb(img, "remove_color");
  require(roi.matches(img), "remove_color: mask size does not match image");
  Image out = img;
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      if (!roi.at(y, x)) continue;
      const float g = luma(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = g;
    }
  }
  return out;
}

Image noise_condition(const Image& img, int k, const BetaSchedule& sched, std::uint64_t seed) {
  require(k >= 0 && k <= sched.steps(), "condition noise level " + std::to_string(k) + " outside [0, " +
                                            std::to_string(sched.steps()) + "]");
  if (k == 0) return img;
  Image eps(img.height(), img.width(), img.channels());
  Rng rng(seed);
  fill_normal(rng, eps.span());
  return q_sample(img, k, eps, sched);
}

Image noise_condition(const Image& img, int k, const BetaSchedule& sched, std::uint64_t seed,
                      const RoIMask& region) {
  require(region.matches(img), "noise_condition: region size does not match image");
  Image noised = noise_condition(img, k, sched, seed);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      if (region.at(y, x)) continue;
      for (int c = 0; c < img.channels(); ++c) noised.at(y, x, c) = img.at(y, x, c);
    }
  }
  return noised;
}

EdgeMap canny_edges(const Image& img, const CannyParams& params) {
  require_rgb(img, "canny_edges");
  require(params.low >= 0.0 && params.low < params.high, "canny thresholds must satisfy 0 <= low < high");
  require(params.sigma > 0.0, "canny sigma must be positive");
  const int h = img.height();
  const int w = img.width();

  Plane gray(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      gray(y, x) = 255.0 * static_cast<double>(luma(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2)));
    }
  }
  const Plane smooth = blur5(gray, params.sigma);

  Plane mag(h, w);
  std::vector<std::uint8_t> dir(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = (smooth.clamped(y - 1, x + 1) + 2.0 * smooth.clamped(y, x + 1) + smooth.clamped(y + 1, x + 1)) -
                        (smooth.clamped(y - 1, x - 1) + 2.0 * smooth.clamped(y, x - 1) + smooth.clamped(y + 1, x - 1));
      const double gy = (smooth.clamped(y + 1, x - 1) + 2.0 * smooth.clamped(y + 1, x) + smooth.clamped(y + 1, x + 1)) -
                        (smooth.clamped(y - 1, x - 1) + 2.0 * smooth.clamped(y - 1, x) + smooth.clamped(y - 1, x + 1));
      mag(y, x) = std::abs(gx) + std::abs(gy);
      // Quantise the gradient direction: 0 horizontal, 1 45deg, 2 vertical, 3 135deg.
      const double ax = std::abs(gx);
      const double ay = std::abs(gy);
      constexpr double kTan22 = 0.41421356237309503;
      std::uint8_t d;
      if (ay <= kTan22 * ax) {
        d = 0;
      } else if (ax <= kTan22 * ay) {
        d = 2;
      } else {
        d = (gx * gy > 0) ? 1 : 3;
      }
      dir[static_cast<std::size_t>(y) * w + x] = d;
    }
  }

  // Non-maximum suppression. Ties keep the lower-index neighbour so a
  // symmetric edge yields a single line.
  auto mag_at = [&](int y, int x) { return (y < 0 || y >= h || x < 0 || x >= w) ? 0.0 : mag(y, x); };
  std::vector<std::uint8_t> state(static_cast<std::size_t>(h) * w, 0);  // 0 none, 1 weak, 2 strong
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double m = mag(y, x);
      if (m <= params.low) continue;
      double before, after;
      switch (dir[static_cast<std::size_t>(y) * w + x]) {
        case 0: before = mag_at(y, x - 1); after = mag_at(y, x + 1); break;
        case 2: before = mag_at(y - 1, x); after = mag_at(y + 1, x); break;
        case 1: before = mag_at(y - 1, x - 1); after = mag_at(y + 1, x + 1); break;
        default: before = mag_at(y - 1, x + 1); after = mag_at(y + 1, x - 1); break;
      }
      if (!(m > before && m >= after)) continue;
      state[static_cast<std::size_t>(y) * w + x] = m > params.high ? 2 : 1;
    }
  }

  // Hysteresis: grow strong pixels through 8-connected weak ones.
  EdgeMap edges(h, w);
  std::vector<int> stack;
  for (int i = 0; i < h * w; ++i) {
    if (state[i] == 2) stack.push_back(i);
  }
  while (!stack.empty()) {
    const int i = stack.back();
    stack.pop_back();
    const int y = i / w;
    const int x = i % w;
    if (edges.at(y, x)) continue;
    edges.set(y, x, true);
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int ny = y + dy;
        const int nx = x + dx;
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        const int j = ny * w + nx;
        if (state[j] && !edges.at(ny, nx)) stack.push_back(j);
      }
    }
  }
  return edges;
}

ConditionTensor pack_condition(const Image& rgb, const EdgeMap& edges) {
  require_rgb(rgb, "pack_condition");
  require(edges.matches(rgb), "pack_condition: edge map size does not match image");
  Image out(rgb.height(), rgb.width(), ConditionTensor::kChannels);
  for (int y = 0; y < rgb.height(); ++y) {
    for (int x = 0; x < rgb.width(); ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = rgb.at(y, x, c);
      out.at(y, x, ConditionTensor::kEdgeChannel) = edges.at(y, x) ? 1.0f : 0.0f;
    }
  }
  return ConditionTensor(std::move(out));
}

ConditionTensor assemble_condition(const Image& x0, const RoIMask& roi, int k, const BetaSchedule& sched,
                                   std::uint64_t seed, const IirmOptions& options) {
  require_rgb(x0, "assemble_condition");
  require(roi.matches(x0), "assemble_condition: mask size does not match image");
  const EdgeMap edges = canny_edges(x0, options.canny);
  if (!options.removal_enabled) return pack_condition(x0, edges);
  const Image gray = remove_color(x0, roi);
  const Image noised = options.noise_roi_only ? noise_condition(gray, k, sched, seed, roi)
                                              : noise_condition(gray, k, sched, seed);
  return pack_condition(noised, edges);
}

}  // namespace iir
