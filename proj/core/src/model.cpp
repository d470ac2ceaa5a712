#include "iir/model.hpp"

#include <json.hpp>

#include <cmath>
#include <string>

namespace iir {

using nlohmann::json;

void ModelConfig::validate() const {
  require(image_size > 0, "image_size must be positive");
  require(base_width > 0 && !channel_mult.empty(), "model width and levels must be positive");
  require(image_size % (1 << (levels() - 1)) == 0, "image_size must be divisible by 2^(levels-1)");
  for (int i = 0; i < levels(); ++i) {
    require(channel_mult[i] > 0, "channel multipliers must be positive");
    require(width(i) % groups == 0, "every level width must be divisible by groups");
    require(width(i) % heads == 0, "every level width must be divisible by heads");
  }
  require(text_dim % text_heads == 0, "text_dim must be divisible by text_heads");
  require(text_layers >= 0, "text_layers must be non-negative");
  require(max_tokens >= 1, "max_tokens must be positive");
  require(vocab_size == Vocabulary::standard().size(), "vocab_size does not match the built-in vocabulary");
  require(cond_noise_max >= 0 && cond_noise_max <= schedule.steps, "cond_noise_max must lie in [0, T]");
}

std::string to_json_string(const ModelConfig& c) {
  json j;
  j["image_size"] = c.image_size;
  j["base_width"] = c.base_width;
  j["channel_mult"] = c.channel_mult;
  j["groups"] = c.groups;
  j["heads"] = c.heads;
  j["text_dim"] = c.text_dim;
  j["text_layers"] = c.text_layers;
  j["text_heads"] = c.text_heads;
  j["max_tokens"] = c.max_tokens;
  j["vocab_size"] = c.vocab_size;
  j["init_seed"] = c.init_seed;
  j["schedule"] = {{"steps", c.schedule.steps}, {"beta_start", c.schedule.beta_start},
                   {"beta_end", c.schedule.beta_end}, {"kind", "linear"}};
  j["cond_noise_max"] = c.cond_noise_max;
  j["iirm"] = {{"canny_low", c.iirm.canny.low},
               {"canny_high", c.iirm.canny.high},
               {"canny_sigma", c.iirm.canny.sigma},
               {"removal_enabled", c.iirm.removal_enabled},
               {"noise_roi_only", c.iirm.noise_roi_only}};
  j["prediction"] = c.prediction == Prediction::kNoise ? "noise" : "velocity";
  return j.dump(2);
}

ModelConfig model_config_from_json(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    c.image_size = j.at("image_size");
    c.base_width = j.at("base_width");
    c.channel_mult = j.at("channel_mult").get<std::vector<int>>();
    c.groups = j.at("groups");
    c.heads = j.at("heads");
    c.text_dim = j.at("text_dim");
    c.text_layers = j.at("text_layers");
    c.text_heads = j.at("text_heads");
    c.max_tokens = j.at("max_tokens");
    c.vocab_size = j.at("vocab_size");
    c.init_seed = j.at("init_seed");
    c.schedule.steps = j.at("schedule").at("steps");
    c.schedule.beta_start = j.at("schedule").at("beta_start");
    c.schedule.beta_end = j.at("schedule").at("beta_end");
    c.cond_noise_max = j.at("cond_noise_max");
    const auto& io = j.at("iirm");
    c.iirm.canny.low = io.at("canny_low");
    c.iirm.canny.high = io.at("canny_high");
    c.iirm.canny.sigma = io.at("canny_sigma");
    c.iirm.removal_enabled = io.at("removal_enabled");
    c.iirm.noise_roi_only = io.at("noise_roi_only");
    const std::string pred = j.value("prediction", std::string("noise"));
    require(pred == "noise" || pred == "velocity", "prediction must be \"noise\" or \"velocity\", got \"" + pred + "\"");
    c.prediction = pred == "noise" ? Prediction::kNoise : Prediction::kVelocity;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid model config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

template <typename T>
void check_finite(const Tensor<T>& t, const char* what) {
  if (!all_finite(t.span())) throw NumericalError(std::string("non-finite values in ") + what);
}

}  // namespace

template <typename T>
struct Network<T>::Layers {
  nn::Param<T> token_emb, pos_emb, null_emb;
  std::vector<nn::TransformerLayer<T>> text_layers;
  nn::LayerNorm<T> text_norm;

  nn::Linear<T> time1, time2, pooled_proj;

  nn::Conv2d<T> conv_in;
  std::vector<nn::ResBlock<T>> down_res, up_res;
  std::vector<nn::CrossAttentionBlock<T>> down_attn, up_attn;
  std::vector<nn::Conv2d<T>> down_conv;  // levels-1 entries
  std::vector<nn::Conv2d<T>> up_conv;    // index 0 unused
  nn::ResBlock<T> mid_res1, mid_res2;
  nn::CrossAttentionBlock<T> mid_attn;
  nn::GroupNorm<T> out_norm;
  nn::Conv2d<T> conv_out;

  std::vector<nn::Conv2d<T>> cond_in, cond_mid, cond_proj;

  void collect(nn::ParamList<T>& out, int levels) {
    out.push_back(&token_emb);
    out.push_back(&pos_emb);
    out.push_back(&null_emb);
    for (auto& l : text_layers) l.collect(out);
    text_norm.collect(out);
    time1.collect(out);
    time2.collect(out);
    pooled_proj.collect(out);
    conv_in.collect(out);
    for (int i = 0; i < levels; ++i) {
      down_res[i].collect(out);
      down_attn[i].collect(out);
      if (i + 1 < levels) down_conv[i].collect(out);
    }
    mid_res1.collect(out);
    mid_attn.collect(out);
    mid_res2.collect(out);
    for (int i = levels - 1; i >= 0; --i) {
      up_res[i].collect(out);
      up_attn[i].collect(out);
      if (i > 0) up_conv[i].collect(out);
    }
    out_norm.collect(out);
    conv_out.collect(out);
    for (int i = 0; i < levels; ++i) {
      cond_in[i].collect(out);
      cond_mid[i].collect(out);
      cond_proj[i].collect(out);
    }
  }
};

template <typename T>
Network<T>::Network(const ModelConfig& config) : config_(config), layers_(std::make_unique<Layers>()) {
  config_.validate();
  const BetaSchedule sched = config_.schedule.make();
  for (int k = 0; k <= sched.steps(); ++k) {
    const double ab = sched.alpha_bar(k);
    sqrt_ab_.push_back(std::sqrt(ab));
    sqrt_1m_ab_.push_back(std::sqrt(1.0 - ab));
  }
  Rng rng(config_.init_seed);
  auto& L = *layers_;
  const int d = config_.text_dim;
  const int levels = config_.levels();
  const int g = config_.groups;
  const int td = config_.time_dim();

  L.token_emb.name = "text.token_embedding";
  L.token_emb.resize({config_.vocab_size, d});
  fill_normal(rng, L.token_emb.value.span());
  for (auto& v : L.token_emb.value.values()) v *= T(0.2);
  L.pos_emb.name = "text.position_embedding";
  L.pos_emb.resize({config_.max_tokens, d});
  fill_normal(rng, L.pos_emb.value.span());
  for (auto& v : L.pos_emb.value.values()) v *= T(0.2);
  L.null_emb.name = "text.null_embedding";
  L.null_emb.resize({d});
  fill_normal(rng, L.null_emb.value.span());
  for (int i = 0; i < config_.text_layers; ++i) {
    L.text_layers.emplace_back("text.layer" + std::to_string(i), d, config_.text_heads, rng);
  }
  L.text_norm = nn::LayerNorm<T>("text.final_norm", d);

  L.time1 = nn::Linear<T>("time.fc1", config_.base_width, td, rng);
  L.time2 = nn::Linear<T>("time.fc2", td, td, rng);
  L.pooled_proj = nn::Linear<T>("time.text_pooled", d, td, rng);

  L.conv_in = nn::Conv2d<T>("unet.conv_in", 3, config_.width(0), 3, 1, 1, rng);
  L.up_conv.resize(levels);
  for (int i = 0; i < levels; ++i) {
    const int in = i == 0 ? config_.width(0) : config_.width(i - 1);
    const std::string p = "unet.down" + std::to_string(i);
    L.down_res.emplace_back(p + ".res", in, config_.width(i), td, g, rng);
    L.down_attn.emplace_back(p + ".attn", config_.width(i), d, config_.heads, g, rng);
    if (i + 1 < levels) {
      L.down_conv.emplace_back(p + ".downsample", config_.width(i), config_.width(i), 3, 2, 1, rng);
    }
  }
  const int top = config_.width(levels - 1);
  L.mid_res1 = nn::ResBlock<T>("unet.mid.res1", top, top, td, g, rng);
  L.mid_attn = nn::CrossAttentionBlock<T>("unet.mid.attn", top, d, config_.heads, g, rng);
  L.mid_res2 = nn::ResBlock<T>("unet.mid.res2", top, top, td, g, rng);
  L.up_res.resize(levels);
  L.up_attn.resize(levels);
  for (int i = levels - 1; i >= 0; --i) {
    const std::string p = "unet.up" + std::to_string(i);
    L.up_res[i] = nn::ResBlock<T>(p + ".res", 2 * config_.width(i), config_.width(i), td, g, rng);
    L.up_attn[i] = nn::CrossAttentionBlock<T>(p + ".attn", config_.width(i), d, config_.heads, g, rng);
    if (i > 0) {
      L.up_conv[i] = nn::Conv2d<T>(p + ".upsample", config_.width(i), config_.width(i - 1), 3, 1, 1, rng);
    }
  }
  L.out_norm = nn::GroupNorm<T>("unet.out_norm", config_.width(0), g);
  L.conv_out = nn::Conv2d<T>("unet.conv_out", config_.width(0), 3, 3, 1, 1, rng);

  for (int i = 0; i < levels; ++i) {
    const std::string p = "control.level" + std::to_string(i);
    if (i == 0) {
      L.cond_in.emplace_back(p + ".conv_in", ConditionTensor::kChannels, config_.width(0), 3, 1, 1, rng);
    } else {
      L.cond_in.emplace_back(p + ".conv_in", config_.width(i - 1), config_.width(i), 3, 2, 1, rng);
    }
    L.cond_mid.emplace_back(p + ".conv_mid", config_.width(i), config_.width(i), 3, 1, 1, rng);
    L.cond_proj.emplace_back(p + ".zero_proj", config_.width(i), config_.width(i), 1, 1, 0, rng, true);
  }
}

template <typename T>
Network<T>::~Network() = default;
template <typename T>
Network<T>::Network(Network&&) noexcept = default;
template <typename T>
Network<T>& Network<T>::operator=(Network&&) noexcept = default;

template <typename T>
nn::ParamList<T> Network<T>::parameters() {
  nn::ParamList<T> out;
  layers_->collect(out, config_.levels());
  return out;
}

template <typename T>
std::vector<const nn::Param<T>*> Network<T>::parameters() const {
  auto list = const_cast<Network*>(this)->parameters();
  return {list.begin(), list.end()};
}

template <typename T>
std::size_t Network<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->value.size();
  return n;
}

template <typename T>
void Network<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
const nn::Param<T>& Network<T>::null_embedding() const {
  return layers_->null_emb;
}

template <typename T>
std::vector<const nn::Conv2d<T>*> Network<T>::injection_projections() const {
  std::vector<const nn::Conv2d<T>*> out;
  for (const auto& c : layers_->cond_proj) out.push_back(&c);
  return out;
}

template <typename T>
std::vector<nn::Conv2d<T>*> Network<T>::injection_projections() {
  std::vector<nn::Conv2d<T>*> out;
  for (auto& c : layers_->cond_proj) out.push_back(&c);
  return out;
}

// ---------------------------------------------------------------- text

template <typename T>
TextEmbedding<T> Network<T>::encode_text(const std::vector<Prompt>& prompts, TextCache* cache) const {
  const auto& L = *layers_;
  const int n = static_cast<int>(prompts.size());
  require(n > 0, "encode_text: empty prompt batch");
  const int len = config_.max_tokens;
  const int d = config_.text_dim;
  const std::size_t cols = static_cast<std::size_t>(n) * len;

  std::vector<int> ids(cols, kPadToken);
  std::vector<std::uint8_t> mask(cols, 0);
  std::vector<std::uint8_t> null_rows(n, 0);
  for (int b = 0; b < n; ++b) {
    const auto& p = prompts[b];
    require(static_cast<int>(p.tokens.size()) <= len, "prompt exceeds max_tokens");
    if (p.is_null()) {
      null_rows[b] = 1;
      ids[static_cast<std::size_t>(b) * len] = kNullToken;
      mask[static_cast<std::size_t>(b) * len] = 1;
      continue;
    }
    for (std::size_t l = 0; l < p.tokens.size(); ++l) {
      const int id = p.tokens[l];
      require(id >= 0 && id < config_.vocab_size, "token id " + std::to_string(id) + " out of vocabulary");
      ids[static_cast<std::size_t>(b) * len + l] = id;
      mask[static_cast<std::size_t>(b) * len + l] = 1;
    }
  }

  Tensor<T> x({d, static_cast<int>(cols)});
  for (std::size_t c = 0; c < cols; ++c) {
    const int l = static_cast<int>(c % len);
    for (int i = 0; i < d; ++i) {
      x[static_cast<std::size_t>(i) * cols + c] =
          L.token_emb.value[static_cast<std::size_t>(ids[c]) * d + i] + L.pos_emb.value[static_cast<std::size_t>(l) * d + i];
    }
  }
  if (cache) cache->layers.resize(L.text_layers.size());
  for (std::size_t i = 0; i < L.text_layers.size(); ++i) {
    x = L.text_layers[i].forward(x, mask, n, cache ? &cache->layers[i] : nullptr);
  }
  x = L.text_norm.forward(x, cache ? &cache->final_norm : nullptr);

  TextEmbedding<T> out;
  out.batch = n;
  out.pooled = Tensor<T>({d, n});
  for (int b = 0; b < n; ++b) {
    if (null_rows[b]) {
      for (int l = 0; l < len; ++l) {
        const std::size_t c = static_cast<std::size_t>(b) * len + l;
        for (int i = 0; i < d; ++i) x[static_cast<std::size_t>(i) * cols + c] = l == 0 ? L.null_emb.value[i] : T(0);
      }
      for (int i = 0; i < d; ++i) out.pooled[static_cast<std::size_t>(i) * n + b] = L.null_emb.value[i];
      continue;
    }
    const int count = static_cast<int>(prompts[b].tokens.size());
    for (int i = 0; i < d; ++i) {
      T s = 0;
      for (int l = 0; l < count; ++l) s += x[static_cast<std::size_t>(i) * cols + static_cast<std::size_t>(b) * len + l];
      out.pooled[static_cast<std::size_t>(i) * n + b] = s / static_cast<T>(count);
    }
  }
  check_finite(x, "text embedding");
  out.tokens = std::move(x);
  out.mask = mask;
  if (cache) {
    cache->token_ids = std::move(ids);
    cache->null_rows = std::move(null_rows);
    cache->mask = std::move(mask);
    cache->batch = n;
  }
  return out;
}

template <typename T>
void Network<T>::backward_text(const TextCache& cache, const Tensor<T>& grad_tokens, const Tensor<T>& grad_pooled) {
  auto& L = *layers_;
  const int n = cache.batch;
  const int len = config_.max_tokens;
  const int d = config_.text_dim;
  const std::size_t cols = static_cast<std::size_t>(n) * len;

  Tensor<T> g = grad_tokens;
  for (int b = 0; b < n; ++b) {
    const std::size_t c0 = static_cast<std::size_t>(b) * len;
    if (cache.null_rows[b]) {
      for (int i = 0; i < d; ++i) {
        L.null_emb.grad[i] += g[static_cast<std::size_t>(i) * cols + c0] + grad_pooled[static_cast<std::size_t>(i) * n + b];
        for (int l = 0; l < len; ++l) g[static_cast<std::size_t>(i) * cols + c0 + l] = T(0);
      }
      continue;
    }
    int count = 0;
    for (int l = 0; l < len; ++l) count += cache.mask[c0 + l];
    for (int i = 0; i < d; ++i) {
      const T share = grad_pooled[static_cast<std::size_t>(i) * n + b] / static_cast<T>(count);
      for (int l = 0; l < count; ++l) g[static_cast<std::size_t>(i) * cols + c0 + l] += share;
    }
  }
  g = L.text_norm.backward(cache.final_norm, g);
  for (std::size_t i = L.text_layers.size(); i-- > 0;) g = L.text_layers[i].backward(cache.layers[i], g);
  for (std::size_t c = 0; c < cols; ++c) {
    if (cache.null_rows[c / len] || !cache.mask[c]) continue;
    const int l = static_cast<int>(c % len);
    const int id = cache.token_ids[c];
    for (int i = 0; i < d; ++i) {
      const T v = g[static_cast<std::size_t>(i) * cols + c];
      L.token_emb.grad[static_cast<std::size_t>(id) * d + i] += v;
      L.pos_emb.grad[static_cast<std::size_t>(l) * d + i] += v;
    }
  }
}

// ---------------------------------------------------------------- condition

template <typename T>
ConditionFeatures<T> Network<T>::encode_condition(const Tensor<T>& cond, ConditionCache* cache) const {
  const auto& L = *layers_;
  require(cond.ndim() == 4 && cond.dim(0) == ConditionTensor::kChannels,
          "encode_condition: expected a 4-channel condition, got " + shape_string(cond.shape()));
  require(cond.dim(2) == config_.image_size && cond.dim(3) == config_.image_size,
          "encode_condition: condition size does not match model image_size");
  const int levels = config_.levels();
  if (cache) {
    cache->in_conv.resize(levels);
    cache->mid_conv.resize(levels);
    cache->proj.resize(levels);
    cache->in_pre.resize(levels);
    cache->mid_pre.resize(levels);
  }
  ConditionFeatures<T> feats;
  Tensor<T> h = cond;
  for (int i = 0; i < levels; ++i) {
    Tensor<T> a = L.cond_in[i].forward(h, cache ? &cache->in_conv[i] : nullptr);
    h = nn::silu(a);
    Tensor<T> b = L.cond_mid[i].forward(h, cache ? &cache->mid_conv[i] : nullptr);
    h = nn::silu(b);
    feats.push_back(L.cond_proj[i].forward(h, cache ? &cache->proj[i] : nullptr));
    if (cache) {
      cache->in_pre[i] = std::move(a);
      cache->mid_pre[i] = std::move(b);
    }
  }
  return feats;
}

template <typename T>
void Network<T>::backward_condition(const ConditionCache& cache, const ConditionFeatures<T>& grads) {
  auto& L = *layers_;
  Tensor<T> carry;
  for (int i = config_.levels() - 1; i >= 0; --i) {
    Tensor<T> g = L.cond_proj[i].backward(cache.proj[i], grads[i]);
    if (!carry.empty()) nn::add_inplace(g, carry);
    g = L.cond_mid[i].backward(cache.mid_conv[i], nn::silu_backward(cache.mid_pre[i], g));
    carry = L.cond_in[i].backward(cache.in_conv[i], nn::silu_backward(cache.in_pre[i], g));
  }
}

// ---------------------------------------------------------------- denoiser

template <typename T>
Tensor<T> Network<T>::predict_noise(const Tensor<T>& x, const std::vector<int>& t, const TextEmbedding<T>& text,
                                    const ConditionFeatures<T>& cond, DenoiserCache* cache) const {
  const auto& L = *layers_;
  const int levels = config_.levels();
  require(x.ndim() == 4 && x.dim(0) == 3 && x.dim(2) == config_.image_size && x.dim(3) == config_.image_size,
          "predict_noise: expected {3,N," + std::to_string(config_.image_size) + "," +
              std::to_string(config_.image_size) + "}, got " + shape_string(x.shape()));
  const int n = x.dim(1);
  require(static_cast<int>(t.size()) == n, "predict_noise: one timestep per batch element required");
  for (int v : t) {
    require(v >= 1 && v <= config_.schedule.steps, "predict_noise: timestep " + std::to_string(v) + " outside [1, T]");
  }
  require(text.batch == n, "predict_noise: text batch does not match image batch");
  require(static_cast<int>(cond.size()) == levels, "predict_noise: wrong number of condition feature maps");
  for (int i = 0; i < levels; ++i) {
    const int s = config_.image_size >> i;
    require(cond[i].shape() == std::vector<int>({config_.width(i), n, s, s}),
            "predict_noise: condition feature " + std::to_string(i) + " has shape " + shape_string(cond[i].shape()));
  }

  if (cache) {
    cache->down_res.resize(levels);
    cache->down_attn.resize(levels);
    cache->down_conv.resize(levels);
    cache->up_res.resize(levels);
    cache->up_attn.resize(levels);
    cache->up_conv.resize(levels);
    cache->batch = n;
  }

  const Tensor<T> tf = nn::timestep_features<T>(t, config_.base_width);
  Tensor<T> hidden = L.time1.forward(tf, cache ? &cache->time1 : nullptr);
  Tensor<T> e2 = L.time2.forward(nn::silu(hidden), cache ? &cache->time2 : nullptr);
  nn::add_inplace(e2, L.pooled_proj.forward(text.pooled, cache ? &cache->pooled : nullptr));
  const Tensor<T> temb = nn::silu(e2);

  const Tensor<T>& ctx = text.tokens;
  const auto& mask = text.mask;
  std::vector<Tensor<T>> skips(levels);
  Tensor<T> h = L.conv_in.forward(x, cache ? &cache->conv_in : nullptr);
  for (int i = 0; i < levels; ++i) {
    h = L.down_res[i].forward(h, temb, cache ? &cache->down_res[i] : nullptr);
    h = L.down_attn[i].forward(h, ctx, mask, cache ? &cache->down_attn[i] : nullptr);
    nn::add_inplace(h, cond[i]);
    skips[i] = h;
    if (i + 1 < levels) h = L.down_conv[i].forward(h, cache ? &cache->down_conv[i] : nullptr);
  }
  h = L.mid_res1.forward(h, temb, cache ? &cache->mid_res1 : nullptr);
  h = L.mid_attn.forward(h, ctx, mask, cache ? &cache->mid_attn : nullptr);
  h = L.mid_res2.forward(h, temb, cache ? &cache->mid_res2 : nullptr);
  for (int i = levels - 1; i >= 0; --i) {
    h = nn::concat_channels(h, skips[i]);
    h = L.up_res[i].forward(h, temb, cache ? &cache->up_res[i] : nullptr);
    h = L.up_attn[i].forward(h, ctx, mask, cache ? &cache->up_attn[i] : nullptr);
    if (i > 0) h = L.up_conv[i].forward(nn::upsample_nearest2(h), cache ? &cache->up_conv[i] : nullptr);
  }
  Tensor<T> pre = L.out_norm.forward(h, cache ? &cache->out_norm : nullptr);
  Tensor<T> eps = L.conv_out.forward(nn::silu(pre), cache ? &cache->conv_out : nullptr);
  if (config_.prediction == Prediction::kVelocity) {
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    for (int c = 0; c < 3; ++c) {
      for (int b = 0; b < n; ++b) {
        const T a = static_cast<T>(sqrt_ab_[t[b]]), s = static_cast<T>(sqrt_1m_ab_[t[b]]);
        const std::size_t off = (static_cast<std::size_t>(c) * n + b) * plane;
        T* e = eps.data() + off;
        const T* xi = x.data() + off;
        for (std::size_t i = 0; i < plane; ++i) e[i] = a * e[i] + s * xi[i];
      }
    }
  }
  check_finite(eps, "noise prediction");
  if (cache) {
    cache->t = t;
    cache->time_hidden = std::move(hidden);
    cache->time_out = std::move(e2);
    cache->out_pre = std::move(pre);
    cache->text_tokens_cols = static_cast<int>(ctx.size() / ctx.dim(0));
  }
  return eps;
}

template <typename T>
DenoiserGrads<T> Network<T>::backward_denoiser(const DenoiserCache& cache, const Tensor<T>& grad_eps) {
  auto& L = *layers_;
  const int levels = config_.levels();
  const int n = cache.batch;
  DenoiserGrads<T> out;
  out.text_tokens = Tensor<T>({config_.text_dim, cache.text_tokens_cols});
  out.condition.resize(levels);
  Tensor<T> g_temb({config_.time_dim(), n});

  Tensor<T> g_raw = grad_eps;
  if (config_.prediction == Prediction::kVelocity) {
    const std::size_t plane = g_raw.size() / (static_cast<std::size_t>(3) * n);
    for (int c = 0; c < 3; ++c) {
      for (int b = 0; b < n; ++b) {
        const T a = static_cast<T>(sqrt_ab_[cache.t[b]]);
        T* gp = g_raw.data() + (static_cast<std::size_t>(c) * n + b) * plane;
        for (std::size_t i = 0; i < plane; ++i) gp[i] *= a;
      }
    }
  }
  Tensor<T> g = L.conv_out.backward(cache.conv_out, g_raw);
  g = L.out_norm.backward(cache.out_norm, nn::silu_backward(cache.out_pre, g));
  std::vector<Tensor<T>> g_skip(levels);
  for (int i = 0; i < levels; ++i) {
    if (i > 0) g = nn::upsample_nearest2_backward(L.up_conv[i].backward(cache.up_conv[i], g));
    auto ga = L.up_attn[i].backward(cache.up_attn[i], g);
    nn::add_inplace(out.text_tokens, ga.context);
    auto gr = L.up_res[i].backward(cache.up_res[i], ga.x);
    nn::add_inplace(g_temb, gr.time);
    auto [gh, gs] = nn::split_channels(gr.x, config_.width(i));
    g = std::move(gh);
    g_skip[i] = std::move(gs);
  }
  {
    auto gr = L.mid_res2.backward(cache.mid_res2, g);
    nn::add_inplace(g_temb, gr.time);
    auto ga = L.mid_attn.backward(cache.mid_attn, gr.x);
    nn::add_inplace(out.text_tokens, ga.context);
    auto gr1 = L.mid_res1.backward(cache.mid_res1, ga.x);
    nn::add_inplace(g_temb, gr1.time);
    g = std::move(gr1.x);
  }
  for (int i = levels - 1; i >= 0; --i) {
    if (i + 1 < levels) g = L.down_conv[i].backward(cache.down_conv[i], g);
    nn::add_inplace(g, g_skip[i]);
    out.condition[i] = g;
    auto ga = L.down_attn[i].backward(cache.down_attn[i], g);
    nn::add_inplace(out.text_tokens, ga.context);
    auto gr = L.down_res[i].backward(cache.down_res[i], ga.x);
    nn::add_inplace(g_temb, gr.time);
    g = std::move(gr.x);
  }
  L.conv_in.backward(cache.conv_in, g);

  const Tensor<T> g_e2 = nn::silu_backward(cache.time_out, g_temb);
  out.text_pooled = L.pooled_proj.backward(cache.pooled, g_e2);
  const Tensor<T> g_hidden = L.time2.backward(cache.time2, g_e2);
  L.time1.backward(cache.time1, nn::silu_backward(cache.time_hidden, g_hidden));
  return out;
}

template class Network<float>;
template class Network<double>;

// ---------------------------------------------------------------- batching

template <typename T>
Tensor<T> images_to_batch(const std::vector<const Image*>& images) {
  require(!images.empty(), "images_to_batch: empty batch");
  const int h = images[0]->height(), w = images[0]->width(), c = images[0]->channels();
  const int n = static_cast<int>(images.size());
  Tensor<T> out({c, n, h, w});
  for (int b = 0; b < n; ++b) {
    const Image& img = *images[b];
    require(img.height() == h && img.width() == w && img.channels() == c, "images_to_batch: mixed image shapes");
    for (int ch = 0; ch < c; ++ch) {
      T* dst = out.data() + (static_cast<std::size_t>(ch) * n + b) * h * w;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) dst[y * w + x] = static_cast<T>(img.at(y, x, ch));
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> conditions_to_batch(const std::vector<const ConditionTensor*>& conds) {
  std::vector<const Image*> imgs;
  for (const auto* c : conds) imgs.push_back(&c->image());
  return images_to_batch<T>(imgs);
}

template <typename T>
Image batch_to_image(const Tensor<T>& batch, int index) {
  const int c = batch.dim(0), n = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  require(index >= 0 && index < n, "batch_to_image: index out of range");
  Image img(h, w, c);
  for (int ch = 0; ch < c; ++ch) {
    const T* src = batch.data() + (static_cast<std::size_t>(ch) * n + index) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) img.at(y, x, ch) = static_cast<float>(src[y * w + x]);
    }
  }
  return img;
}

template Tensor<float> images_to_batch<float>(const std::vector<const Image*>&);
template Tensor<double> images_to_batch<double>(const std::vector<const Image*>&);
template Tensor<float> conditions_to_batch<float>(const std::vector<const ConditionTensor*>&);
template Tensor<double> conditions_to_batch<double>(const std::vector<const ConditionTensor*>&);
template Image batch_to_image<float>(const Tensor<float>&, int);
template Image batch_to_image<double>(const Tensor<double>&, int);

// ---------------------------------------------------------------- state-level API

TextEmbedding<float> encode_text(const Prompt& prompt, const ModelState& state) {
  return state.network.encode_text({prompt});
}

ConditionFeatures<float> encode_condition(const ConditionTensor& cond, const ModelState& state) {
  return state.network.encode_condition(conditions_to_batch<float>({&cond}));
}

Image predict_noise(const Image& x_t, int t, const TextEmbedding<float>& text, const ConditionFeatures<float>& cond,
                    const ModelState& state) {
  require(x_t.channels() == 3, "predict_noise: x_t must have 3 channels");
  const Tensor<float> eps = state.network.predict_noise(images_to_batch<float>({&x_t}), {t}, text, cond);
  return batch_to_image(eps, 0);
}

Image guided_combination(const Image& eps_uncond, const Image& eps_cond, double scale) {
  require(eps_uncond.same_shape(eps_cond), "guided_combination: shape mismatch");
  require(scale >= 0.0, "guidance scale must be non-negative");
  Image out = eps_cond;
  const float s = static_cast<float>(scale);
  const float r = static_cast<float>(1.0 - scale);
  auto u = eps_uncond.span();
  auto c = eps_cond.span();
  auto o = out.span();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = r * u[i] + s * c[i];
  return out;
}

Image predict_noise_cfg(const Image& x_t, int t, const Prompt& prompt, const ConditionTensor& cond,
                        const ModelState& state, double scale) {
  require(scale >= 0.0, "guidance scale must be non-negative");
  const auto features = encode_condition(cond, state);
  const Image eps_cond = predict_noise(x_t, t, encode_text(prompt, state), features, state);
  const Image eps_uncond = predict_noise(x_t, t, encode_text(null_prompt(), state), features, state);
  return guided_combination(eps_uncond, eps_cond, scale);
}

}  // namespace iir
