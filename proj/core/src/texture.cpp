#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>

#include "iir/error.hpp"
#include "iir/eval.hpp"

namespace iir {

namespace {

// Planner calls are not thread-safe in FFTW; execution is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwFree {
  void operator()(void* p) const { fftwf_free(p); }
};

// Non-DC spectral power of a zero-mean field, excluding the ring below 2
// cycles per image so slow shading does not count as texture.
double band_power(const std::vector<float>& field, int h, int w) {
  const int wc = w / 2 + 1;
  std::unique_ptr<float, FftwFree> in(static_cast<float*>(fftwf_malloc(sizeof(float) * h * w)));
  std::unique_ptr<fftwf_complex, FftwFree> out(
      static_cast<fftwf_complex*>(fftwf_malloc(sizeof(fftwf_complex) * h * wc)));
  if (!in || !out) throw std::bad_alloc();
  fftwf_plan plan;
  {
    std::lock_guard lock(planner_mutex());
    plan = fftwf_plan_dft_r2c_2d(h, w, in.get(), out.get(), FFTW_ESTIMATE);
  }
  if (!plan) throw NumericalError("FFTW could not create a plan");
  std::copy(field.begin(), field.end(), in.get());
  fftwf_execute(plan);
  double power = 0.0;
  for (int ky = 0; ky < h; ++ky) {
    const int fy = ky <= h / 2 ? ky : ky - h;
    for (int kx = 0; kx < wc; ++kx) {
      if (fy * fy + kx * kx < 4) continue;
      const fftwf_complex& c = out.get()[ky * wc + kx];
      const double p = static_cast<double>(c[0]) * c[0] + static_cast<double>(c[1]) * c[1];
      // Columns strictly inside (0, w/2) stand for their conjugate twins too.
      const bool mirrored = kx > 0 && !(w % 2 == 0 && kx == w / 2);
      power += mirrored ? 2.0 * p : p;
    }
  }
  {
    std::lock_guard lock(planner_mutex());
    fftwf_destroy_plan(plan);
  }
  return power / (static_cast<double>(h) * w);
}

constexpr double kEnergyScale = 0.003;
constexpr double kDominanceSplit = 0.8;
constexpr double kDominanceWidth = 0.05;
constexpr int kBins = 8;

}  // namespace

Texture classify_texture(const Image& img, const RoIMask& region, TextureFeatures* features) {
  require(region.matches(img), "texture region does not match the image size");
  const std::size_t n_in = region.count();
  require(n_in > 0, "texture region is empty (mask covers the whole image)");
  const int h = img.height(), w = img.width(), nc = img.channels();
  const double pi = 3.14159265358979323846;

  double energy = 0.0;
  std::array<double, kBins> hist{};
  std::vector<float> field(static_cast<std::size_t>(h) * w);
  for (int c = 0; c < nc; ++c) {
    double mean = 0.0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (region.at(y, x)) mean += img.at(y, x, c);
      }
    }
    mean /= static_cast<double>(n_in);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        field[y * w + x] = region.at(y, x) ? static_cast<float>(img.at(y, x, c) - mean) : 0.0f;
      }
    }
    energy += band_power(field, h, w) / static_cast<double>(n_in);

    for (int y = 1; y + 1 < h; ++y) {
      for (int x = 1; x + 1 < w; ++x) {
        if (!region.at(y, x) || !region.at(y, x - 1) || !region.at(y, x + 1) || !region.at(y - 1, x) ||
            !region.at(y + 1, x)) {
          continue;
        }
        const double gx = 0.5 * (img.at(y, x + 1, c) - img.at(y, x - 1, c));
        const double gy = 0.5 * (img.at(y + 1, x, c) - img.at(y - 1, x, c));
        const double m2 = gx * gx + gy * gy;
        if (m2 <= 0.0) continue;
        double theta = std::atan2(gy, gx);
        if (theta < 0) theta += pi;
        const int bin = static_cast<int>(std::floor((theta + pi / (2 * kBins)) / (pi / kBins))) % kBins;
        hist[bin] += m2;
      }
    }
  }

  double total = 0.0;
  for (double v : hist) total += v;
  double dominance = 0.0;
  if (total > 0.0) {
    for (int i = 0; i < kBins; ++i) {
      const double mass = hist[(i + kBins - 1) % kBins] + hist[i] + hist[(i + 1) % kBins];
      dominance = std::max(dominance, mass / total);
    }
  }

  const double textured = energy / (energy + kEnergyScale);
  const double striped = 1.0 / (1.0 + std::exp(-(dominance - kDominanceSplit) / kDominanceWidth));
  const std::array<double, 3> scores{1.0 - textured, textured * striped, textured * (1.0 - striped)};
  if (features) *features = {energy, dominance, scores};
  const auto best = std::max_element(scores.begin(), scores.end()) - scores.begin();
  return static_cast<Texture>(best);
}

EditScore edit_success_texture(const Image& img, const RoIMask& region, Texture target) {
  TextureFeatures f;
  const Texture got = classify_texture(img, region, &f);
  return {got == target, f.class_scores[static_cast<int>(target)]};
}

}  // namespace iir
