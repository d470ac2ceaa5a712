#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <set>

#include "iir/checkpoint.hpp"
#include "iir/model.hpp"
#include "iir/rng.hpp"
#include "iir/train.hpp"
#include "support.hpp"

using namespace iir;
using iir::testing::tiny_config;

namespace {

// A batch with both a NULL-prompt row and a captioned row.
PreparedBatch<float> mixed_batch(const std::vector<Example>& examples, const ModelConfig& mc) {
  TrainConfig tc;
  tc.model = mc;
  tc.text_dropout = 0.5;
  const BetaSchedule sched = mc.schedule.make();
  for (std::uint64_t seed = 0; seed < 64; ++seed) {
    PreparedBatch<float> b = prepare_batch(iir::testing::pointers(examples), tc, sched, seed);
    int dropped = 0;
    for (auto d : b.text_dropped) dropped += d;
    if (dropped > 0 && dropped < b.size()) return b;
  }
  ADD_FAILURE() << "no seed produced a mixed batch";
  return {};
}

}  // namespace

TEST(ModelConfig, JsonRoundTrip) {
  ModelConfig c = tiny_config();
  c.iirm.noise_roi_only = true;
  c.cond_noise_max = 123;
  const std::string text = to_json_string(c);
  EXPECT_EQ(to_json_string(model_config_from_json(text)), text);
}

TEST(ModelConfig, RejectsBadShapes) {
  ModelConfig c = tiny_config();
  c.image_size = 18;  // not divisible by 2^(levels-1) * ... after downsampling
  c.channel_mult = {1, 2, 4};
  EXPECT_THROW(c.validate(), ValidationError);
  c = tiny_config();
  c.cond_noise_max = c.schedule.steps + 1;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(ModelConfig, PredictionKeyRoundTripsAndDefaultsToNoise) {
  ModelConfig c = tiny_config();
  c.prediction = Prediction::kNoise;
  EXPECT_EQ(model_config_from_json(to_json_string(c)).prediction, Prediction::kNoise);
  c.prediction = Prediction::kVelocity;
  EXPECT_EQ(model_config_from_json(to_json_string(c)).prediction, Prediction::kVelocity);

  // Configs written before the key existed describe noise-output weights.
  auto j = nlohmann::json::parse(to_json_string(c));
  j.erase("prediction");
  EXPECT_EQ(model_config_from_json(j.dump()).prediction, Prediction::kNoise);
  j["prediction"] = "x0";
  EXPECT_THROW(model_config_from_json(j.dump()), ValidationError);
}

TEST(Network, OutputShapeAndParameterNamesUnique) {
  Network<float> net(tiny_config());
  auto params = net.parameters();
  std::set<std::string> names;
  for (const auto* p : params) EXPECT_TRUE(names.insert(p->name).second) << p->name;
  EXPECT_GT(net.parameter_count(), 1000u);

  const auto examples = iir::testing::synthetic_examples(2, 16);
  const auto b = mixed_batch(examples, net.config());
  const auto eps = net.predict_noise(b.x_t, b.t, net.encode_text(b.prompts), net.encode_condition(b.cond));
  EXPECT_EQ(eps.shape(), (std::vector<int>{3, 2, 16, 16}));
}

TEST(Network, RejectsOutOfRangeTimestep) {
  Network<float> net(tiny_config());
  const auto examples = iir::testing::synthetic_examples(1, 16);
  auto b = mixed_batch(iir::testing::synthetic_examples(2, 16), net.config());
  const auto text = net.encode_text(b.prompts);
  const auto cond = net.encode_condition(b.cond);
  EXPECT_THROW(net.predict_noise(b.x_t, {0, 5}, text, cond), ValidationError);
  EXPECT_THROW(net.predict_noise(b.x_t, {1, 1001}, text, cond), ValidationError);
}

TEST(Network, SameSeedSameWeights) {
  Network<float> a(tiny_config()), b(tiny_config());
  auto pa = a.parameters();
  auto pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value.values(), pb[i]->value.values());
}

TEST(Network, ZeroInitConditionPathContributesNothing) {
  Network<float> net(tiny_config());
  for (const auto* conv : net.injection_projections()) {
    for (float v : conv->weight().value.values()) ASSERT_EQ(v, 0.0f);
    for (float v : conv->bias().value.values()) ASSERT_EQ(v, 0.0f);
  }
  const auto examples = iir::testing::synthetic_examples(2, 16);
  const auto b = mixed_batch(examples, net.config());
  const auto text = net.encode_text(b.prompts);

  Tensor<float> other = b.cond;
  Rng rng(3);
  fill_normal(rng, other.span());
  const auto eps1 = net.predict_noise(b.x_t, b.t, text, net.encode_condition(b.cond));
  const auto eps2 = net.predict_noise(b.x_t, b.t, text, net.encode_condition(other));
  ConditionFeatures<float> zeros = net.encode_condition(b.cond);
  for (auto& f : zeros) f.fill(0.0f);
  const auto eps3 = net.predict_noise(b.x_t, b.t, text, zeros);
  EXPECT_EQ(eps1.values(), eps2.values());
  EXPECT_EQ(eps1.values(), eps3.values());
}

TEST(Network, NullPromptIgnoresCaption) {
  Network<float> net(tiny_config());
  const auto e1 = net.encode_text({null_prompt()});
  const auto e2 = net.encode_text({Prompt{"", {}}});
  EXPECT_EQ(e1.tokens.values(), e2.tokens.values());
  EXPECT_EQ(e1.pooled.values(), e2.pooled.values());
  const auto e3 = net.encode_text({tokenize("a red circle on solid background")});
  EXPECT_NE(e1.pooled.values(), e3.pooled.values());
}

TEST(Network, VelocityHeadMapsRawOutputToNoise) {
  ModelConfig mc = tiny_config();
  mc.prediction = Prediction::kNoise;
  Network<double> raw(mc);
  mc.prediction = Prediction::kVelocity;
  Network<double> vel(mc);

  const PreparedBatch<double> b = batch_cast<double>(mixed_batch(iir::testing::synthetic_examples(2, 16), mc));
  const std::vector<int> t{1, 1000};
  const auto text = raw.encode_text(b.prompts);
  const auto cond = raw.encode_condition(b.cond);
  const auto u = raw.predict_noise(b.x_t, t, text, cond);
  const auto e = vel.predict_noise(b.x_t, t, text, cond);
  const BetaSchedule sched = mc.schedule.make();
  const std::size_t plane = 16 * 16;
  for (int c = 0; c < 3; ++c) {
    for (int n = 0; n < 2; ++n) {
      const double ab = sched.alpha_bar(t[n]);
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t k = (static_cast<std::size_t>(c) * 2 + n) * plane + i;
        EXPECT_NEAR(e.data()[k], std::sqrt(ab) * u.data()[k] + std::sqrt(1.0 - ab) * b.x_t.data()[k], 1e-12);
      }
    }
  }
}

// The training objective against central differences, in double precision,
// with the condition path made live.
TEST(Network, TrainingLossGradientMatchesFiniteDifferences) {
  const ModelConfig mc = tiny_config(16);
  Network<double> net(mc);
  iir::testing::randomize_injection(net, 5);
  const auto examples = iir::testing::synthetic_examples(2, 16, 4);
  const PreparedBatch<double> batch = batch_cast<double>(mixed_batch(examples, mc));

  net.zero_grad();
  loss_and_gradients(net, batch);
  auto params = net.parameters();

  const double h = 1e-5;
  double worst = 0.0;
  std::string worst_name;
  int checked = 0;
  for (auto* p : params) {
    // Probe the coordinate with the largest analytic gradient.
    std::size_t best = 0;
    for (std::size_t i = 1; i < p->grad.size(); ++i) {
      if (std::abs(p->grad[i]) > std::abs(p->grad[best])) best = i;
    }
    const double analytic = p->grad[best];
    if (std::abs(analytic) < 1e-9) continue;
    const double keep = p->value[best];
    p->value[best] = keep + h;
    const double up = batch_loss(net, batch);
    p->value[best] = keep - h;
    const double down = batch_loss(net, batch);
    p->value[best] = keep;
    const double numeric = (up - down) / (2 * h);
    const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric));
    if (rel > worst) {
      worst = rel;
      worst_name = p->name;
    }
    ++checked;
    EXPECT_LE(rel, 1e-3) << p->name << " analytic " << analytic << " numeric " << numeric;
  }
  EXPECT_GT(checked, static_cast<int>(params.size()) * 9 / 10);
  RecordProperty("worst_relative_error", std::to_string(worst) + " at " + worst_name);
}

TEST(Guidance, ScaleZeroAndOneSelectBranches) {
  Rng rng(9);
  Image u(4, 4, 3), c(4, 4, 3);
  fill_normal(rng, u.span());
  fill_normal(rng, c.span());
  const Image s0 = guided_combination(u, c, 0.0);
  const Image s1 = guided_combination(u, c, 1.0);
  for (std::size_t i = 0; i < u.span().size(); ++i) {
    EXPECT_NEAR(s0.span()[i], u.span()[i], 1e-6);
    EXPECT_NEAR(s1.span()[i], c.span()[i], 1e-6);
  }
  const Image s9 = guided_combination(u, c, 9.0);
  for (std::size_t i = 0; i < u.span().size(); ++i) {
    EXPECT_NEAR(s9.span()[i], u.span()[i] + 9.0f * (c.span()[i] - u.span()[i]), 1e-4);
  }
  EXPECT_THROW(guided_combination(u, c, -1.0), ValidationError);
}

TEST(Guidance, ModelLevelIdentities) {
  ModelState state(tiny_config());
  iir::testing::randomize_injection(state.network, 2);
  const auto ex = iir::testing::synthetic_examples(1, 16)[0];
  const ConditionTensor cond =
      assemble_condition(ex.image, ex.mask, 10, state.config().schedule.make(), 3, state.config().iirm);
  Image x(16, 16, 3);
  Rng rng(4);
  fill_normal(rng, x.span());
  const auto feats = encode_condition(cond, state);
  const Image ec = predict_noise(x, 500, encode_text(ex.prompt, state), feats, state);
  const Image eu = predict_noise(x, 500, encode_text(null_prompt(), state), feats, state);
  const Image g0 = predict_noise_cfg(x, 500, ex.prompt, cond, state, 0.0);
  const Image g1 = predict_noise_cfg(x, 500, ex.prompt, cond, state, 1.0);
  for (std::size_t i = 0; i < x.span().size(); ++i) {
    EXPECT_NEAR(g0.span()[i], eu.span()[i], 1e-6);
    EXPECT_NEAR(g1.span()[i], ec.span()[i], 1e-6);
  }
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  iir::testing::TempDir dir("ckpt");
  ModelState state(tiny_config());
  iir::testing::randomize_injection(state.network, 8);
  state.step = 42;
  state.train_config_json = R"({"note": "x", "lr": 0.001})";
  const std::vector<NamedTensor> extra{{"adam.m.demo", Tensor<float>({2, 3}, 0.5f)}};
  save_checkpoint(dir.path() / "a.iirc", state, extra);
  LoadedCheckpoint loaded = load_checkpoint(dir.path() / "a.iirc");
  EXPECT_EQ(loaded.state->step, 42);
  ASSERT_EQ(loaded.extra.size(), 1u);
  EXPECT_EQ(loaded.extra[0].name, "adam.m.demo");
  save_checkpoint(dir.path() / "b.iirc", *loaded.state, loaded.extra);
  const std::string a = iir::testing::read_file(dir.path() / "a.iirc");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, iir::testing::read_file(dir.path() / "b.iirc"));
  EXPECT_FALSE(std::filesystem::exists(dir.path() / "a.iirc.tmp"));
}

TEST(Checkpoint, RejectsCorruptFiles) {
  iir::testing::TempDir dir("ckpt_bad");
  ModelState state(tiny_config());
  save_checkpoint(dir.path() / "m.iirc", state);
  std::string bytes = iir::testing::read_file(dir.path() / "m.iirc");
  {
    std::ofstream os(dir.path() / "trunc.iirc", std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  EXPECT_THROW(load_checkpoint(dir.path() / "trunc.iirc"), IoError);
  bytes[0] = 'X';
  {
    std::ofstream os(dir.path() / "magic.iirc", std::ios::binary);
    os << bytes;
  }
  EXPECT_THROW(load_checkpoint(dir.path() / "magic.iirc"), IoError);
  EXPECT_THROW(load_checkpoint(dir.path() / "missing.iirc"), IoError);
}

TEST(Batching, ImagesRoundTrip) {
  const auto ex = iir::testing::synthetic_examples(3, 16);
  const auto batch = images_to_batch<float>({&ex[0].image, &ex[1].image, &ex[2].image});
  EXPECT_EQ(batch.shape(), (std::vector<int>{3, 3, 16, 16}));
  for (int i = 0; i < 3; ++i) EXPECT_TRUE(batch_to_image(batch, i) == ex[i].image);
}
