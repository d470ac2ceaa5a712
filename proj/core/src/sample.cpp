#include "iir/sample.hpp"

#include <cmath>

#include "iir/error.hpp"
#include "iir/rng.hpp"

namespace iir {

void EditRequest::validate(const ModelConfig& config) const {
  require(image.channels() == 3, "edit image must have 3 channels");
  require(image.height() == config.image_size && image.width() == config.image_size,
          "edit image is " + std::to_string(image.width()) + "x" + std::to_string(image.height()) +
              " but the model expects " + std::to_string(config.image_size) + "x" +
              std::to_string(config.image_size));
  require(roi.matches(image), "RoI mask size does not match the image");
  require(k >= 0 && k <= config.cond_noise_max,
          "k must lie in [0, " + std::to_string(config.cond_noise_max) + "], got " + std::to_string(k));
  require(ddim_steps >= 1 && ddim_steps <= config.schedule.steps,
          "ddim_steps must lie in [1, " + std::to_string(config.schedule.steps) + "]");
  require(cfg_scale >= 0.0 && std::isfinite(cfg_scale), "cfg_scale must be non-negative");
}

std::vector<int> ddim_timesteps(int T, int steps) {
  require(T >= 1, "ddim_timesteps: T must be at least 1");
  require(steps >= 1 && steps <= T, "ddim_timesteps: steps must lie in [1, T]");
  std::vector<int> ts(steps);
  if (steps == 1) {
    ts[0] = T;
    return ts;
  }
  for (int i = 0; i < steps; ++i) {
    const double v = T - static_cast<double>(i) * (T - 1) / (steps - 1);
    ts[i] = static_cast<int>(std::lround(v));
  }
  return ts;
}

template <typename T>
void ddim_step(std::span<const T> x_t, std::span<const T> eps_hat, int t, int t_prev, const BetaSchedule& sched,
               std::span<T> out) {
  require(x_t.size() == eps_hat.size() && x_t.size() == out.size(), "ddim_step: size mismatch");
  require(t >= 1 && t <= sched.steps(), "ddim_step: t out of range");
  require(t_prev >= 0 && t_prev < t, "ddim_step: t_prev must satisfy 0 <= t_prev < t");
  const double ab = sched.alpha_bar(t);
  if (!(ab > 0.0)) throw NumericalError("ddim_step: alpha_bar(" + std::to_string(t) + ") is zero");
  const double ab_prev = sched.alpha_bar(t_prev);
  const double sa = std::sqrt(ab), sn = std::sqrt(1.0 - ab);
  const double pa = std::sqrt(ab_prev), pn = std::sqrt(1.0 - ab_prev);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double e = eps_hat[i];
    const double x0 = (x_t[i] - sn * e) / sa;
    out[i] = static_cast<T>(pa * x0 + pn * e);
  }
}

template void ddim_step<float>(std::span<const float>, std::span<const float>, int, int, const BetaSchedule&,
                               std::span<float>);
template void ddim_step<double>(std::span<const double>, std::span<const double>, int, int, const BetaSchedule&,
                                std::span<double>);

Image ddim_step(const Image& x_t, const Image& eps_hat, int t, int t_prev, const BetaSchedule& sched) {
  require(x_t.same_shape(eps_hat), "ddim_step: shape mismatch");
  Image out(x_t.height(), x_t.width(), x_t.channels());
  ddim_step<float>(x_t.span(), eps_hat.span(), t, t_prev, sched, out.span());
  return out;
}

std::uint64_t edit_noise_seed(std::uint64_t seed) { return derive_seed(seed, {1}); }
std::uint64_t edit_condition_seed(std::uint64_t seed) { return derive_seed(seed, {2}); }

ConditionTensor edit_condition(const EditRequest& req, const ModelState& state) {
  const ModelConfig& cfg = state.config();
  return assemble_condition(req.image, req.roi, req.k, cfg.schedule.make(), edit_condition_seed(req.seed), cfg.iirm);
}

Image edit_with_condition(const EditRequest& req, const ConditionTensor& cond, const ModelState& state) {
  req.validate(state.config());
  require(cond.height() == req.image.height() && cond.width() == req.image.width(),
          "condition size does not match the image");
  const Network<float>& net = state.network;
  const BetaSchedule sched = state.config().schedule.make();
  const int h = req.image.height(), w = req.image.width();

  const ConditionFeatures<float> feats = net.encode_condition(conditions_to_batch<float>({&cond}));
  const TextEmbedding<float> text_c = net.encode_text({req.prompt});
  const TextEmbedding<float> text_u = net.encode_text({null_prompt()});

  // {3, 1, H, W} has the same memory order as a CHW plane stack.
  Tensor<float> x({3, 1, h, w});
  Rng rng(edit_noise_seed(req.seed));
  fill_normal(rng, x.span());
  Tensor<float> next(x.shape());
  Tensor<float> eps(x.shape());

  const float s = static_cast<float>(req.cfg_scale);
  const float r = static_cast<float>(1.0 - req.cfg_scale);
  const std::vector<int> ts = ddim_timesteps(sched.steps(), req.ddim_steps);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    const Tensor<float> ec = net.predict_noise(x, {t}, text_c, feats);
    const Tensor<float> eu = net.predict_noise(x, {t}, text_u, feats);
    for (std::size_t j = 0; j < eps.size(); ++j) eps[j] = r * eu[j] + s * ec[j];
    ddim_step<float>(x.span(), eps.span(), t, t_prev, sched, next.span());
    std::swap(x, next);
  }
  return clamp01(batch_to_image(x, 0));
}

Image edit(const EditRequest& req, const ModelState& state) {
  req.validate(state.config());
  return edit_with_condition(req, edit_condition(req, state), state);
}

std::vector<std::pair<int, Image>> ablate_noise_grid(const EditRequest& req, const ModelState& state,
                                                     const std::vector<int>& ks) {
  require(!ks.empty(), "ablate_noise_grid: no noise levels given");
  std::vector<std::pair<int, Image>> out;
  out.reserve(ks.size());
  for (int k : ks) {
    EditRequest r = req;
    r.k = k;
    out.emplace_back(k, edit(r, state));
  }
  return out;
}

std::vector<int> default_noise_grid(int K) { return {0, K / 4, K / 2, K}; }

}  // namespace iir
