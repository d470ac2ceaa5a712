#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "iir/iirm.hpp"
#include "iir/nn/blocks.hpp"
#include "iir/schedule.hpp"
#include "iir/vocab.hpp"

namespace iir {

struct ScheduleConfig {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  BetaSchedule make() const { return BetaSchedule::make(steps, beta_start, beta_end); }
};

// What the last U-Net layer outputs. predict_noise returns a noise estimate
// either way; kVelocity maps the raw output u to
// sqrt(abar_t) * u + sqrt(1 - abar_t) * x_t, which keeps the estimate (and
// the implied x0) well conditioned at low signal-to-noise ratios.
enum class Prediction { kNoise, kVelocity };

struct ModelConfig {
  int image_size = 64;
  int base_width = 64;
  std::vector<int> channel_mult{1, 2, 4};
  int groups = 8;
  int heads = 4;
  int text_dim = 128;
  int text_layers = 2;
  int text_heads = 4;
  int max_tokens = kDefaultMaxTokens;
  int vocab_size = Vocabulary::standard().size();
  std::uint64_t init_seed = 0;

  // Diffusion and condition settings the weights were trained under.
  ScheduleConfig schedule;
  int cond_noise_max = 250;
  IirmOptions iirm;
  Prediction prediction = Prediction::kVelocity;

  int levels() const { return static_cast<int>(channel_mult.size()); }
  int width(int level) const { return base_width * channel_mult.at(level); }
  int time_dim() const { return 4 * base_width; }
  void validate() const;
};

std::string to_json_string(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

template <typename T>
struct TextEmbedding {
  Tensor<T> tokens;                 // [text_dim, N*max_tokens]
  Tensor<T> pooled;                 // [text_dim, N]
  std::vector<std::uint8_t> mask;   // N*max_tokens, 1 = valid key
  int batch = 0;
};

// Injected (already projected) condition features, one per denoiser level:
// level i is {width(i), N, size/2^i, size/2^i}.
template <typename T>
using ConditionFeatures = std::vector<Tensor<T>>;

template <typename T>
struct DenoiserGrads {
  Tensor<T> text_tokens;
  Tensor<T> text_pooled;
  ConditionFeatures<T> condition;
};

// Text encoder, ControlNet-style condition encoder with zero-initialised
// output projections, and the U-Net noise predictor.
template <typename T>
class Network {
 public:
  struct TextCache;
  struct ConditionCache;
  struct DenoiserCache;

  explicit Network(const ModelConfig& config);
  ~Network();
  Network(Network&&) noexcept;
  Network& operator=(Network&&) noexcept;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  const ModelConfig& config() const { return config_; }

  TextEmbedding<T> encode_text(const std::vector<Prompt>& prompts, TextCache* cache = nullptr) const;
  // cond: {4, N, H, W}
  ConditionFeatures<T> encode_condition(const Tensor<T>& cond, ConditionCache* cache = nullptr) const;
  // x: {3, N, H, W}; t[i] in [1, T]. Throws NumericalError on non-finite output.
  Tensor<T> predict_noise(const Tensor<T>& x, const std::vector<int>& t, const TextEmbedding<T>& text,
                          const ConditionFeatures<T>& cond, DenoiserCache* cache = nullptr) const;

  DenoiserGrads<T> backward_denoiser(const DenoiserCache& cache, const Tensor<T>& grad_eps);
  void backward_text(const TextCache& cache, const Tensor<T>& grad_tokens, const Tensor<T>& grad_pooled);
  void backward_condition(const ConditionCache& cache, const ConditionFeatures<T>& grads);

  // Stable order; names are unique.
  nn::ParamList<T> parameters();
  std::vector<const nn::Param<T>*> parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();

  const nn::Param<T>& null_embedding() const;
  // The zero-initialised injection projections, one conv per level.
  std::vector<const nn::Conv2d<T>*> injection_projections() const;
  std::vector<nn::Conv2d<T>*> injection_projections();

 private:
  struct Layers;
  ModelConfig config_;
  std::vector<double> sqrt_ab_, sqrt_1m_ab_;  // index t in [0, T]
  std::unique_ptr<Layers> layers_;
};

template <typename T>
struct Network<T>::TextCache {
  std::vector<typename nn::TransformerLayer<T>::Cache> layers;
  typename nn::LayerNorm<T>::Cache final_norm;
  std::vector<int> token_ids;          // N*L, kPadToken where unused
  std::vector<std::uint8_t> null_rows; // N
  std::vector<std::uint8_t> mask;
  int batch = 0;
};

template <typename T>
struct Network<T>::ConditionCache {
  std::vector<typename nn::Conv2d<T>::Cache> in_conv, mid_conv, proj;
  std::vector<Tensor<T>> in_pre, mid_pre;
};

template <typename T>
struct Network<T>::DenoiserCache {
  Tensor<T> time_hidden;
  Tensor<T> time_out;
  typename nn::Linear<T>::Cache time1, time2, pooled;
  typename nn::Conv2d<T>::Cache conv_in;
  std::vector<typename nn::ResBlock<T>::Cache> down_res, up_res;
  std::vector<typename nn::CrossAttentionBlock<T>::Cache> down_attn, up_attn;
  std::vector<typename nn::Conv2d<T>::Cache> down_conv, up_conv;
  typename nn::ResBlock<T>::Cache mid_res1, mid_res2;
  typename nn::CrossAttentionBlock<T>::Cache mid_attn;
  typename nn::GroupNorm<T>::Cache out_norm;
  Tensor<T> out_pre;
  typename nn::Conv2d<T>::Cache conv_out;
  std::vector<int> t;
  int text_tokens_cols = 0;
  int batch = 0;
};

// HWC images <-> {C, N, H, W} batches.
template <typename T>
Tensor<T> images_to_batch(const std::vector<const Image*>& images);
template <typename T>
Tensor<T> conditions_to_batch(const std::vector<const ConditionTensor*>& conds);
template <typename T>
Image batch_to_image(const Tensor<T>& batch, int index);

// Weights plus training metadata. Inference treats it as read-only.
struct ModelState {
  explicit ModelState(const ModelConfig& config) : network(config) {}

  const ModelConfig& config() const { return network.config(); }

  Network<float> network;
  std::int64_t step = 0;
  std::string train_config_json = "{}";
};

TextEmbedding<float> encode_text(const Prompt& prompt, const ModelState& state);
ConditionFeatures<float> encode_condition(const ConditionTensor& cond, const ModelState& state);
Image predict_noise(const Image& x_t, int t, const TextEmbedding<float>& text, const ConditionFeatures<float>& cond,
                    const ModelState& state);

// eps_uncond + scale * (eps_cond - eps_uncond), computed as
// (1 - scale) * eps_uncond + scale * eps_cond; the unconditional branch uses
// the NULL prompt and keeps the image condition.
Image predict_noise_cfg(const Image& x_t, int t, const Prompt& prompt, const ConditionTensor& cond,
                        const ModelState& state, double scale);

// Combine two branch predictions the way predict_noise_cfg does.
Image guided_combination(const Image& eps_uncond, const Image& eps_cond, double scale);

}  // namespace iir
