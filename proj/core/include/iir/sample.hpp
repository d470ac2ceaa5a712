#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "iir/model.hpp"

namespace iir {

struct EditRequest {
  Image image;
  RoIMask roi;
  Prompt prompt;  // target text
  int k = 0;
  double cfg_scale = 9.0;
  int ddim_steps = 20;
  std::uint64_t seed = 0;

  void validate(const ModelConfig& config) const;
};

// Descending timesteps, uniform over [1, T], first = T, last = 1.
std::vector<int> ddim_timesteps(int T, int steps);

// Deterministic (eta = 0) update t -> t_prev; t_prev = 0 yields the x0 estimate.
// Instantiated for float and double.
template <typename T>
void ddim_step(std::span<const T> x_t, std::span<const T> eps_hat, int t, int t_prev, const BetaSchedule& sched,
               std::span<T> out);
Image ddim_step(const Image& x_t, const Image& eps_hat, int t, int t_prev, const BetaSchedule& sched);

// Seeds derived from req.seed for the two random draws of an edit.
std::uint64_t edit_noise_seed(std::uint64_t seed);
std::uint64_t edit_condition_seed(std::uint64_t seed);

ConditionTensor edit_condition(const EditRequest& req, const ModelState& state);

// Guided DDIM from pure noise under a fixed condition. Output clamped to [0,1].
Image edit_with_condition(const EditRequest& req, const ConditionTensor& cond, const ModelState& state);

Image edit(const EditRequest& req, const ModelState& state);

std::vector<std::pair<int, Image>> ablate_noise_grid(const EditRequest& req, const ModelState& state,
                                                     const std::vector<int>& ks);

// [0, K/4, K/2, K]
std::vector<int> default_noise_grid(int K);

}  // namespace iir
