#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "iir/checkpoint.hpp"
#include "iir/data.hpp"
#include "iir/model.hpp"

namespace iir {

struct TrainConfig {
  // Architecture plus T, K, image size and IIRM options live in the model
  // config so a checkpoint carries the settings it was trained under.
  ModelConfig model;
  int batch_size = 8;
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global norm; 0 disables
  std::int64_t total_steps = 20000;
  double text_dropout = 0.1;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 1000;
  std::string dataset;
  // RoI used when assembling the training condition: the shape mask, its
  // complement (background edits), or the whole image.
  double roi_background_prob = 0.2;
  double roi_whole_prob = 0.2;

  void validate() const;
};

std::string to_json_string(const TrainConfig& config);
TrainConfig train_config_from_json(const std::string& text);

enum class RoiMode { kShape = 0, kBackground = 1, kWhole = 2 };

RoIMask roi_for_mode(const RoIMask& shape_mask, RoiMode mode);

// One training batch with every random draw resolved.
template <typename T>
struct PreparedBatch {
  Tensor<T> x_t;   // {3, N, H, W}
  Tensor<T> eps;   // {3, N, H, W}
  Tensor<T> cond;  // {4, N, H, W}
  std::vector<int> t;
  std::vector<int> k;
  std::vector<RoiMode> roi_mode;
  std::vector<std::uint8_t> text_dropped;
  std::vector<Prompt> prompts;

  int size() const { return static_cast<int>(t.size()); }
};

// Per example i: t ~ U{1..T}, k ~ U{0..K}, eps ~ N(0, I), text dropout and
// RoI mode, all from derive_seed(seed, {i}).
PreparedBatch<float> prepare_batch(const std::vector<const Example*>& batch, const TrainConfig& config,
                                   const BetaSchedule& sched, std::uint64_t seed);

template <typename T>
PreparedBatch<T> batch_cast(const PreparedBatch<float>& b);

// Mean squared error between pred and target over every element; writes
// d(loss)/d(pred) when grad is non-null.
template <typename T>
double noise_mse(const Tensor<T>& pred, const Tensor<T>& target, Tensor<T>* grad = nullptr);

// Forward + backward through text, condition and denoiser networks.
// Gradients accumulate into the parameters; the caller zeroes them.
// Throws NumericalError when the loss is not finite.
template <typename T>
double loss_and_gradients(Network<T>& net, const PreparedBatch<T>& batch);

// Same as above, without touching gradients.
template <typename T>
double batch_loss(const Network<T>& net, const PreparedBatch<T>& batch);

double training_loss(const std::vector<const Example*>& batch, ModelState& state, const TrainConfig& config,
                     std::uint64_t seed);

class Adam {
 public:
  Adam(const TrainConfig& config, const nn::ParamList<float>& params);

  void step(const nn::ParamList<float>& params, std::int64_t t);

  std::vector<NamedTensor> export_state(const nn::ParamList<float>& params) const;
  void import_state(const nn::ParamList<float>& params, const std::vector<NamedTensor>& tensors);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::vector<Tensor<float>> m_, v_;
};

// Returns the norm before clipping.
double clip_grad_norm(const nn::ParamList<float>& params, double max_norm);

struct TrainOutcome {
  std::unique_ptr<ModelState> state;
  std::filesystem::path checkpoint;
  double last_loss = 0.0;
};

using TrainObserver = std::function<void(std::int64_t step, double loss)>;

// Files in out_dir: checkpoint.iirc (latest, atomic), loss.csv. An existing
// checkpoint in out_dir is resumed; its model config must match.
TrainOutcome train(const TrainConfig& config, const std::vector<Example>& dataset,
                   const std::filesystem::path& out_dir, const TrainObserver& observer = {});

inline constexpr const char* kCheckpointName = "checkpoint.iirc";
inline constexpr const char* kLossLogName = "loss.csv";

}  // namespace iir
