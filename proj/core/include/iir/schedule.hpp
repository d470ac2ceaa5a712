#pragma once

#include <span>
#include <vector>

#include "iir/image.hpp"

namespace iir {

enum class ScheduleKind { kLinear };

// Forward-process schedule shared by the image diffusion (x_t) and the
// condition noising (x_k'). Steps are 1-based; step 0 means "no noise".
class BetaSchedule {
 public:
  static BetaSchedule make(int steps, double beta_start, double beta_end,
                           ScheduleKind kind = ScheduleKind::kLinear);
  static BetaSchedule standard() { return make(1000, 1e-4, 0.02); }

  int steps() const { return static_cast<int>(betas_.size()); }
  double beta_start() const { return betas_.front(); }
  double beta_end() const { return betas_.back(); }

  // k in [1, T].
  double beta(int k) const;
  double alpha(int k) const;
  // k in [0, T]; alpha_bar(0) == 1.
  double alpha_bar(int k) const;

  std::span<const double> betas() const { return betas_; }
  std::span<const double> alphas() const { return alphas_; }
  std::span<const double> alpha_bars() const { return alpha_bars_; }

 private:
  BetaSchedule() = default;
  void check_step(int k, int lo) const;

  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
};

// sqrt(alpha_bar_k) * x0 + sqrt(1 - alpha_bar_k) * eps, elementwise into out.
// k == 0 copies x0.
// Instantiated for float and double.
template <typename T>
void q_sample(std::span<const T> x0, int k, std::span<const T> eps, const BetaSchedule& sched, std::span<T> out);
Image q_sample(const Image& x0, int k, const Image& eps, const BetaSchedule& sched);

}  // namespace iir
