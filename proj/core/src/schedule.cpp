#include "iir/schedule.hpp"

#include <cmath>
#include <string>

namespace iir {

BetaSchedule BetaSchedule::make(int steps, double beta_start, double beta_end, ScheduleKind kind) {
  require(steps >= 1, "schedule needs at least one step, got " + std::to_string(steps));
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
          "betas must satisfy 0 < beta_start <= beta_end < 1");
  require(kind == ScheduleKind::kLinear, "unsupported schedule kind");

  BetaSchedule s;
  s.betas_.resize(steps);
  for (int i = 0; i < steps; ++i) {
    s.betas_[i] = steps == 1 ? beta_start
                             : beta_start + (beta_end - beta_start) * static_cast<double>(i) / (steps - 1);
  }
  s.betas_.back() = steps == 1 ? beta_start : beta_end;

  s.alphas_.resize(steps);
  s.alpha_bars_.resize(steps);
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    s.alphas_[i] = 1.0 - s.betas_[i];
    prod *= s.alphas_[i];
    s.alpha_bars_[i] = prod;
  }
  return s;
}

void BetaSchedule::check_step(int k, int lo) const {
  if (k < lo || k > steps()) {
    throw ValidationError("step " + std::to_string(k) + " outside [" + std::to_string(lo) + ", " +
                          std::to_string(steps()) + "]");
  }
}

double BetaSchedule::beta(int k) const {
  check_step(k, 1);
  return betas_[k - 1];
}

double BetaSchedule::alpha(int k) const {
  check_step(k, 1);
  return alphas_[k - 1];
}

double BetaSchedule::alpha_bar(int k) const {
  check_step(k, 0);
  return k == 0 ? 1.0 : alpha_bars_[k - 1];
}

template <typename T>
void q_sample(std::span<const T> x0, int k, std::span<const T> eps, const BetaSchedule& sched, std::span<T> out) {
  require(x0.size() == eps.size(), "q_sample: noise shape does not match image");
  require(out.size() == x0.size(), "q_sample: output shape does not match image");
  const double ab = sched.alpha_bar(k);
  if (k == 0) {
    std::copy(x0.begin(), x0.end(), out.begin());
    return;
  }
  const T signal = static_cast<T>(std::sqrt(ab));
  const T noise = static_cast<T>(std::sqrt(1.0 - ab));
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = signal * x0[i] + noise * eps[i];
}

template void q_sample<float>(std::span<const float>, int, std::span<const float>, const BetaSchedule&,
                              std::span<float>);
template void q_sample<double>(std::span<const double>, int, std::span<const double>, const BetaSchedule&,
                               std::span<double>);

Image q_sample(const Image& x0, int k, const Image& eps, const BetaSchedule& sched) {
  require(x0.same_shape(eps), "q_sample: noise shape does not match image");
  Image out = x0;
  q_sample<float>(x0.span(), k, eps.span(), sched, out.span());
  return out;
}

}  // namespace iir
