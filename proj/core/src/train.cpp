#include "iir/train.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <unordered_map>

#include "iir/error.hpp"
#include "iir/rng.hpp"

namespace iir {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  model.validate();
  require(batch_size >= 1, "batch_size must be at least 1");
  require(learning_rate > 0.0 && std::isfinite(learning_rate), "learning_rate must be positive");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0,
          "adam betas must lie in [0, 1)");
  require(adam_eps > 0.0, "adam_eps must be positive");
  require(grad_clip >= 0.0, "grad_clip must be non-negative");
  require(total_steps >= 0, "total_steps must be non-negative");
  require(text_dropout >= 0.0 && text_dropout <= 1.0, "text_dropout must lie in [0, 1]");
  require(checkpoint_every >= 1, "checkpoint_every must be at least 1");
  require(model.cond_noise_max >= 0 && model.cond_noise_max <= model.schedule.steps, "K must satisfy 0 <= K <= T");
  require(roi_background_prob >= 0.0 && roi_whole_prob >= 0.0 && roi_background_prob + roi_whole_prob <= 1.0,
          "roi mode probabilities must be non-negative and sum to at most 1");
}

std::string to_json_string(const TrainConfig& c) {
  json j;
  j["model"] = json::parse(to_json_string(c.model));
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["grad_clip"] = c.grad_clip;
  j["total_steps"] = c.total_steps;
  j["text_dropout"] = c.text_dropout;
  j["seed"] = c.seed;
  j["checkpoint_every"] = c.checkpoint_every;
  j["dataset"] = c.dataset;
  j["roi_background_prob"] = c.roi_background_prob;
  j["roi_whole_prob"] = c.roi_whole_prob;
  return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
  TrainConfig c;
  try {
    const json j = json::parse(text);
    c.model = model_config_from_json(j.at("model").dump());
    c.batch_size = j.at("batch_size");
    c.learning_rate = j.at("learning_rate");
    c.adam_beta1 = j.at("adam_beta1");
    c.adam_beta2 = j.at("adam_beta2");
    c.adam_eps = j.at("adam_eps");
    c.grad_clip = j.at("grad_clip");
    c.total_steps = j.at("total_steps");
    c.text_dropout = j.at("text_dropout");
    c.seed = j.at("seed");
    c.checkpoint_every = j.at("checkpoint_every");
    c.dataset = j.at("dataset");
    c.roi_background_prob = j.at("roi_background_prob");
    c.roi_whole_prob = j.at("roi_whole_prob");
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid train config: ") + e.what());
  }
  c.validate();
  return c;
}

RoIMask roi_for_mode(const RoIMask& shape_mask, RoiMode mode) {
  switch (mode) {
    case RoiMode::kShape: return shape_mask;
    case RoiMode::kBackground: return shape_mask.complement();
    case RoiMode::kWhole: return RoIMask::full(shape_mask.height(), shape_mask.width());
  }
  return shape_mask;
}

PreparedBatch<float> prepare_batch(const std::vector<const Example*>& batch, const TrainConfig& config,
                                   const BetaSchedule& sched, std::uint64_t seed) {
  require(!batch.empty(), "training batch must be nonempty");
  const int n = static_cast<int>(batch.size());
  const int size = batch[0]->image.height();
  const int T = sched.steps();
  const int K = config.model.cond_noise_max;

  std::vector<Image> noisy(n), noise(n);
  std::vector<ConditionTensor> conds(n);
  PreparedBatch<float> out;
  for (int i = 0; i < n; ++i) {
    const Example& ex = *batch[i];
    require(ex.image.height() == size && ex.image.width() == size, "training images must share one size");
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
    const int t = uniform_int(rng, 1, T);
    const int k = uniform_int(rng, 0, K);
    const bool drop = uniform_real(rng) < config.text_dropout;
    const double u = uniform_real(rng);
    const RoiMode mode = u < config.roi_background_prob                           ? RoiMode::kBackground
                         : u < config.roi_background_prob + config.roi_whole_prob ? RoiMode::kWhole
                                                                                  : RoiMode::kShape;
    const std::uint64_t cond_seed = rng();
    noise[i] = Image(size, size, 3);
    fill_normal(rng, noise[i].span());
    noisy[i] = q_sample(ex.image, t, noise[i], sched);
    conds[i] = assemble_condition(ex.image, roi_for_mode(ex.mask, mode), k, sched, cond_seed, config.model.iirm);

    out.t.push_back(t);
    out.k.push_back(k);
    out.roi_mode.push_back(mode);
    out.text_dropped.push_back(drop ? 1 : 0);
    out.prompts.push_back(drop ? null_prompt() : ex.prompt);
  }
  std::vector<const Image*> xp, ep;
  std::vector<const ConditionTensor*> cp;
  for (int i = 0; i < n; ++i) {
    xp.push_back(&noisy[i]);
    ep.push_back(&noise[i]);
    cp.push_back(&conds[i]);
  }
  out.x_t = images_to_batch<float>(xp);
  out.eps = images_to_batch<float>(ep);
  out.cond = conditions_to_batch<float>(cp);
  return out;
}

template <typename T>
PreparedBatch<T> batch_cast(const PreparedBatch<float>& b) {
  PreparedBatch<T> out;
  out.x_t = tensor_cast<T>(b.x_t);
  out.eps = tensor_cast<T>(b.eps);
  out.cond = tensor_cast<T>(b.cond);
  out.t = b.t;
  out.k = b.k;
  out.roi_mode = b.roi_mode;
  out.text_dropped = b.text_dropped;
  out.prompts = b.prompts;
  return out;
}

template <typename T>
double noise_mse(const Tensor<T>& pred, const Tensor<T>& target, Tensor<T>* grad) {
  require(pred.same_shape(target), "noise_mse: shape mismatch " + shape_string(pred.shape()) + " vs " +
                                       shape_string(target.shape()));
  require(pred.size() > 0, "noise_mse: empty tensors");
  const double inv = 1.0 / static_cast<double>(pred.size());
  double acc = 0.0;
  if (grad) *grad = Tensor<T>(pred.shape());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    acc += d * d;
    if (grad) (*grad)[i] = static_cast<T>(2.0 * d * inv);
  }
  return acc * inv;
}

namespace {

std::string batch_diagnostics(const std::vector<int>& t, const std::vector<int>& k) {
  std::ostringstream os;
  os << "t=[";
  for (std::size_t i = 0; i < t.size(); ++i) os << (i ? "," : "") << t[i];
  os << "] k=[";
  for (std::size_t i = 0; i < k.size(); ++i) os << (i ? "," : "") << k[i];
  os << "]";
  return os.str();
}

}  // namespace

template <typename T>
double loss_and_gradients(Network<T>& net, const PreparedBatch<T>& batch) {
  typename Network<T>::TextCache tc;
  typename Network<T>::ConditionCache cc;
  typename Network<T>::DenoiserCache dc;
  const TextEmbedding<T> text = net.encode_text(batch.prompts, &tc);
  const ConditionFeatures<T> feats = net.encode_condition(batch.cond, &cc);
  Tensor<T> pred;
  try {
    pred = net.predict_noise(batch.x_t, batch.t, text, feats, &dc);
  } catch (const NumericalError& e) {
    throw NumericalError(std::string(e.what()) + " (" + batch_diagnostics(batch.t, batch.k) + ")");
  }
  Tensor<T> grad;
  const double loss = noise_mse(pred, batch.eps, &grad);
  if (!std::isfinite(loss)) {
    throw NumericalError("non-finite training loss (" + batch_diagnostics(batch.t, batch.k) + ")");
  }
  const DenoiserGrads<T> g = net.backward_denoiser(dc, grad);
  net.backward_text(tc, g.text_tokens, g.text_pooled);
  net.backward_condition(cc, g.condition);
  return loss;
}

template <typename T>
double batch_loss(const Network<T>& net, const PreparedBatch<T>& batch) {
  const TextEmbedding<T> text = net.encode_text(batch.prompts);
  const ConditionFeatures<T> feats = net.encode_condition(batch.cond);
  return noise_mse(net.predict_noise(batch.x_t, batch.t, text, feats), batch.eps);
}

double training_loss(const std::vector<const Example*>& batch, ModelState& state, const TrainConfig& config,
                     std::uint64_t seed) {
  const BetaSchedule sched = state.config().schedule.make();
  return loss_and_gradients(state.network, prepare_batch(batch, config, sched, seed));
}

template PreparedBatch<float> batch_cast<float>(const PreparedBatch<float>&);
template PreparedBatch<double> batch_cast<double>(const PreparedBatch<float>&);
template double noise_mse<float>(const Tensor<float>&, const Tensor<float>&, Tensor<float>*);
template double noise_mse<double>(const Tensor<double>&, const Tensor<double>&, Tensor<double>*);
template double loss_and_gradients<float>(Network<float>&, const PreparedBatch<float>&);
template double loss_and_gradients<double>(Network<double>&, const PreparedBatch<double>&);
template double batch_loss<float>(const Network<float>&, const PreparedBatch<float>&);
template double batch_loss<double>(const Network<double>&, const PreparedBatch<double>&);

// ---------------------------------------------------------------- optimizer

Adam::Adam(const TrainConfig& c, const nn::ParamList<float>& params)
    : lr_(c.learning_rate), beta1_(c.adam_beta1), beta2_(c.adam_beta2), eps_(c.adam_eps) {
  for (const auto* p : params) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::step(const nn::ParamList<float>& params, std::int64_t t) {
  require(params.size() == m_.size(), "Adam: parameter list changed");
  require(t >= 1, "Adam: step index starts at 1");
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t));
  const float b1 = static_cast<float>(beta1_), b2 = static_cast<float>(beta2_);
  const float step = static_cast<float>(lr_ / c1);
  const float rc2 = static_cast<float>(1.0 / std::sqrt(c2));
  const float eps = static_cast<float>(eps_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto* p = params[i];
    float* w = p->value.data();
    const float* g = p->grad.data();
    float* m = m_[i].data();
    float* v = v_[i].data();
    for (std::size_t j = 0; j < p->value.size(); ++j) {
      m[j] = b1 * m[j] + (1.0f - b1) * g[j];
      v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
      w[j] -= step * m[j] / (std::sqrt(v[j]) * rc2 + eps);
    }
  }
}

std::vector<NamedTensor> Adam::export_state(const nn::ParamList<float>& params) const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    out.push_back({"adam.m." + params[i]->name, m_[i]});
    out.push_back({"adam.v." + params[i]->name, v_[i]});
  }
  return out;
}

void Adam::import_state(const nn::ParamList<float>& params, const std::vector<NamedTensor>& tensors) {
  std::unordered_map<std::string, const Tensor<float>*> by_name;
  for (const auto& nt : tensors) by_name[nt.name] = &nt.tensor;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (auto [prefix, dst] : {std::pair{"adam.m.", &m_[i]}, std::pair{"adam.v.", &v_[i]}}) {
      const auto it = by_name.find(prefix + params[i]->name);
      if (it == by_name.end()) throw IoError("checkpoint lacks optimizer state for " + params[i]->name);
      if (!it->second->same_shape(*dst)) throw IoError("optimizer state shape mismatch for " + params[i]->name);
      *dst = *it->second;
    }
  }
}

double clip_grad_norm(const nn::ParamList<float>& params, double max_norm) {
  double sq = 0.0;
  for (const auto* p : params) {
    for (float g : p->grad.values()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float s = static_cast<float>(max_norm / norm);
    for (auto* p : params) {
      for (float& g : p->grad.values()) g *= s;
    }
  }
  return norm;
}

// ---------------------------------------------------------------- loop

namespace {

// Keep rows with step <= last_step so a resumed run never repeats a step.
void trim_loss_log(const fs::path& path, std::int64_t last_step) {
  std::ifstream is(path);
  if (!is) return;
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line.rfind("step,", 0) == 0) continue;
    if (std::stoll(line.substr(0, line.find(','))) <= last_step) keep.push_back(line);
  }
  is.close();
  std::ofstream os(path, std::ios::trunc);
  os << "step,loss,seconds\n";
  for (const auto& l : keep) os << l << '\n';
}

}  // namespace

TrainOutcome train(const TrainConfig& config, const std::vector<Example>& dataset, const fs::path& out_dir,
                   const TrainObserver& observer) {
  config.validate();
  require(!dataset.empty(), "training dataset is empty");
  for (const auto& ex : dataset) {
    require(ex.image.height() == config.model.image_size && ex.image.width() == config.model.image_size,
            "dataset image size does not match model image_size " + std::to_string(config.model.image_size));
    require(ex.mask.count() > 0, "training example " + std::to_string(ex.id) + " has an empty mask");
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create training directory '" + out_dir.string() + "': " + ec.message());

  const fs::path ckpt_path = out_dir / kCheckpointName;
  const fs::path log_path = out_dir / kLossLogName;
  const std::string config_json = to_json_string(config);

  TrainOutcome outcome;
  std::vector<NamedTensor> optimizer_state;
  if (fs::exists(ckpt_path)) {
    LoadedCheckpoint loaded = load_checkpoint(ckpt_path);
    if (to_json_string(loaded.state->config()) != to_json_string(config.model)) {
      throw ValidationError("checkpoint " + ckpt_path.string() + " was trained with a different model config");
    }
    outcome.state = std::move(loaded.state);
    optimizer_state = std::move(loaded.extra);
    trim_loss_log(log_path, outcome.state->step);
  } else {
    outcome.state = std::make_unique<ModelState>(config.model);
    std::ofstream os(log_path, std::ios::trunc);
    if (!os) throw IoError("cannot write '" + log_path.string() + "'");
    os << "step,loss,seconds\n";
  }
  ModelState& state = *outcome.state;
  state.train_config_json = json::parse(config_json).dump();

  auto params = state.network.parameters();
  Adam adam(config, params);
  if (!optimizer_state.empty()) adam.import_state(params, optimizer_state);

  std::ofstream log(log_path, std::ios::app);
  if (!log) throw IoError("cannot append to '" + log_path.string() + "'");
  log << std::setprecision(9);

  const BetaSchedule sched = config.model.schedule.make();
  const int n = static_cast<int>(dataset.size());
  std::vector<const Example*> batch(config.batch_size);
  while (state.step < config.total_steps) {
    const auto start = std::chrono::steady_clock::now();
    const std::uint64_t step_seed = derive_seed(config.seed, {static_cast<std::uint64_t>(state.step)});
    Rng pick(derive_seed(step_seed, {0xba7cULL}));
    for (auto& b : batch) b = &dataset[uniform_int(pick, 0, n - 1)];

    state.network.zero_grad();
    const PreparedBatch<float> prepared = prepare_batch(batch, config, sched, step_seed);
    double loss = 0.0;
    try {
      loss = loss_and_gradients(state.network, prepared);
    } catch (const NumericalError& e) {
      throw NumericalError("step " + std::to_string(state.step + 1) + ": " + e.what());
    }
    clip_grad_norm(params, config.grad_clip);
    ++state.step;
    adam.step(params, state.step);
    outcome.last_loss = loss;

    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log << state.step << ',' << loss << ',' << secs << '\n';
    if (observer) observer(state.step, loss);
    if (state.step % config.checkpoint_every == 0 || state.step == config.total_steps) {
      log.flush();
      save_checkpoint(ckpt_path, state, adam.export_state(params));
    }
  }
  if (!fs::exists(ckpt_path)) save_checkpoint(ckpt_path, state, adam.export_state(params));
  outcome.checkpoint = ckpt_path;
  return outcome;
}

}  // namespace iir
