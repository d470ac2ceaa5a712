#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "iir/error.hpp"
#include "iir/eval.hpp"
#include "iir/rng.hpp"
#include "iir/sample.hpp"
#include "iir/train.hpp"
#include "support.hpp"

using namespace iir;
using iir::testing::read_file;
using iir::testing::synthetic_examples;
using iir::testing::TempDir;
using iir::testing::tiny_config;

namespace {

Image uniform(int h, int w, std::array<float, 3> rgb) {
  Image img(h, w, 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = rgb[c];
    }
  }
  return img;
}

RoIMask box(int h, int w, int y0, int y1, int x0, int x1) {
  RoIMask m(h, w);
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) m.set(y, x, true);
  }
  return m;
}

Image random_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w, 3);
  for (auto& v : img.span()) v = static_cast<float>(uniform_real(rng));
  return img;
}

EvalProtocol quick_protocol(EvalMode mode, int count) {
  EvalProtocol p;
  p.mode = mode;
  p.count = count;
  p.ddim_steps = 4;
  p.seed = 13;
  return p;
}

}  // namespace

TEST(EditSuccessColor, DocumentedExamples) {
  const RoIMask roi = box(8, 8, 2, 6, 2, 6);
  const auto blue = kShapeColors[2].rgb, red = kShapeColors[0].rgb;

  const EditScore same = edit_success_color(uniform(8, 8, blue), roi, blue);
  EXPECT_TRUE(same.success);
  EXPECT_DOUBLE_EQ(same.score, 0.0);

  const EditScore wrong = edit_success_color(uniform(8, 8, red), roi, blue);
  EXPECT_FALSE(wrong.success);
  EXPECT_NEAR(wrong.score, std::sqrt(2.0), 1e-12);

  // Gray is 0.707 from orange and 0.866 from red: orange is nearest, but too far.
  const Image gray = uniform(8, 8, {0.5f, 0.5f, 0.5f});
  const EditScore g = edit_success_color(gray, roi, red);
  EXPECT_NEAR(g.score, std::sqrt(0.75), 1e-12);
  EXPECT_FALSE(g.success);
  EXPECT_FALSE(edit_success_color(gray, roi, kShapeColors[7].rgb).success);

  // Near the target but closer to it than to anything else.
  EXPECT_TRUE(edit_success_color(uniform(8, 8, {0.1f, 0.05f, 0.9f}), roi, blue).success);
  EXPECT_FALSE(edit_success_color(uniform(8, 8, {0.1f, 0.05f, 0.9f}), roi, blue, 0.1).success);

  EXPECT_THROW(edit_success_color(gray, RoIMask(8, 8), red), ValidationError);
  EXPECT_THROW(edit_success_color(gray, RoIMask(4, 8), red), ValidationError);
}

TEST(EditSuccessColor, OnlyRoiPixelsCountAndOrderIrrelevant) {
  const RoIMask roi = box(16, 16, 3, 11, 4, 12);
  Image img = random_image(16, 16, 3);
  const EditScore base = edit_success_color(img, roi, kShapeColors[4].rgb);

  Image outside = img;
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      if (!roi.at(y, x)) outside.at(y, x, 1) = 0.0f;
    }
  }
  EXPECT_DOUBLE_EQ(edit_success_color(outside, roi, kShapeColors[4].rgb).score, base.score);

  std::vector<std::pair<int, int>> px;
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      if (roi.at(y, x)) px.emplace_back(y, x);
    }
  }
  std::vector<std::pair<int, int>> perm = px;
  std::reverse(perm.begin(), perm.end());
  std::rotate(perm.begin(), perm.begin() + 7, perm.end());
  Image shuffled = img;
  for (std::size_t i = 0; i < px.size(); ++i) {
    for (int c = 0; c < 3; ++c) shuffled.at(px[i].first, px[i].second, c) = img.at(perm[i].first, perm[i].second, c);
  }
  EXPECT_NEAR(edit_success_color(shuffled, roi, kShapeColors[4].rgb).score, base.score, 1e-9);
}

TEST(TextureClassifier, SimpleCases) {
  SceneSpec s = scene_from_seed(1, 64);
  const RoIMask everywhere_but_corner = box(64, 64, 0, 4, 0, 4).complement();
  s.texture = Texture::kSolid;
  TextureFeatures f;
  EXPECT_EQ(classify_texture(render_background(s), everywhere_but_corner, &f), Texture::kSolid);
  EXPECT_LT(f.band_energy, 1e-9);
  EXPECT_NEAR(f.class_scores[0] + f.class_scores[1] + f.class_scores[2], 1.0, 1e-9);

  s.texture = Texture::kStripes;
  s.orientation = 1;
  EXPECT_EQ(classify_texture(render_background(s), everywhere_but_corner, &f), Texture::kStripes);
  EXPECT_GT(f.class_scores[1], 0.5);
  s.texture = Texture::kChecker;
  EXPECT_EQ(classify_texture(render_background(s), everywhere_but_corner, &f), Texture::kChecker);
  EXPECT_GT(f.class_scores[2], 0.5);

  EXPECT_THROW(classify_texture(render_background(s), RoIMask(64, 64)), ValidationError);
  const EditScore sc = edit_success_texture(render_background(s), everywhere_but_corner, Texture::kChecker);
  EXPECT_TRUE(sc.success);
  EXPECT_GT(sc.score, 0.5);
  EXPECT_FALSE(edit_success_texture(render_background(s), everywhere_but_corner, Texture::kStripes).success);
}

// Calibration oracle: clean generator backgrounds outside the shape, at both
// the default and the desk resolution.
TEST(TextureClassifier, CalibratedOnGeneratorOutput) {
  for (int size : {64, 32}) {
    int correct = 0;
    std::array<int, 3> seen{};
    const int n = 500;
    for (int i = 0; i < n; ++i) {
      const SceneSpec s = scene_from_seed(derive_seed(0x7e57, {static_cast<std::uint64_t>(i)}), size);
      const Scene sc = render_scene(s);
      correct += classify_texture(sc.image, sc.mask.complement()) == s.texture;
      ++seen[static_cast<int>(s.texture)];
    }
    for (int c : seen) EXPECT_GT(c, 100);
    const double acc = static_cast<double>(correct) / n;
    RecordProperty("accuracy_" + std::to_string(size), std::to_string(acc));
    EXPECT_GE(acc, 0.95) << "size " << size;
  }
}

TEST(Fidelity, HandComputedAndMasked) {
  Image orig(4, 4, 3);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      for (int c = 0; c < 3; ++c) orig.at(y, x, c) = x < 2 ? 0.0f : 1.0f;
    }
  }
  Image inv = orig;
  for (auto& v : inv.span()) v = 1.0f - v;
  EXPECT_DOUBLE_EQ(fidelity_outside_roi(orig, orig, RoIMask(4, 4)), 0.0);
  EXPECT_DOUBLE_EQ(fidelity_outside_roi(orig, inv, RoIMask(4, 4)), 1.0);

  // Only the right half differs by 0.5; outside a mask over the left column
  // 8 of 12 remaining pixels see the error: sqrt(8 * 0.25 / 12).
  Image half = orig;
  for (int y = 0; y < 4; ++y) {
    for (int x = 2; x < 4; ++x) {
      for (int c = 0; c < 3; ++c) half.at(y, x, c) = 0.5f;
    }
  }
  EXPECT_NEAR(fidelity_outside_roi(orig, half, box(4, 4, 0, 4, 0, 1)), std::sqrt(8.0 * 0.25 / 12.0), 1e-12);
  EXPECT_NEAR(rmse(orig, half), std::sqrt(0.125), 1e-12);

  // Interior changes are invisible.
  const RoIMask roi = box(4, 4, 1, 3, 1, 3);
  Image inner = orig;
  inner.at(1, 1, 0) = 0.3f;
  inner.at(2, 2, 2) = 0.7f;
  EXPECT_DOUBLE_EQ(fidelity_outside_roi(orig, inner, roi), 0.0);

  EXPECT_THROW(fidelity_outside_roi(orig, inv, RoIMask::full(4, 4)), ValidationError);
  EXPECT_THROW(fidelity_outside_roi(orig, Image(4, 5, 3), RoIMask(4, 4)), ValidationError);
}

TEST(Fidelity, Pseudometric) {
  const RoIMask roi = box(12, 12, 2, 7, 3, 9);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Image a = random_image(12, 12, 3 * s), b = random_image(12, 12, 3 * s + 1), c = random_image(12, 12, 3 * s + 2);
    const double ab = fidelity_outside_roi(a, b, roi), ba = fidelity_outside_roi(b, a, roi);
    EXPECT_DOUBLE_EQ(ab, ba);
    EXPECT_DOUBLE_EQ(fidelity_outside_roi(a, a, roi), 0.0);
    // RMSE is a scaled Euclidean norm, so the triangle inequality carries over.
    EXPECT_LE(ab, fidelity_outside_roi(a, c, roi) + fidelity_outside_roi(c, b, roi) + 1e-12);
  }
}

TEST(Psnr, PeakOneAndCapped) {
  const Image a = uniform(4, 4, {0.5f, 0.5f, 0.5f});
  const Image b = uniform(4, 4, {0.6f, 0.6f, 0.6f});
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-4);
  EXPECT_DOUBLE_EQ(psnr(a, a), kPsnrCap);
}

TEST(EvalModes, NamesRoundTrip) {
  for (EvalMode m : {EvalMode::kColor, EvalMode::kTexture, EvalMode::kReconstruct}) {
    EXPECT_EQ(eval_mode_from_name(eval_mode_name(m)), m);
  }
  EXPECT_THROW(eval_mode_from_name("style"), ValidationError);
}

TEST(ProtocolEdit, TargetsDifferFromOriginal) {
  const auto exs = synthetic_examples(30, 32, 4);
  for (int i = 0; i < 30; ++i) {
    const Example& ex = exs[i];
    const ProtocolEdit c = protocol_edit(ex, i, EvalMode::kColor);
    EXPECT_NE(c.target_color, ex.spec.color);
    EXPECT_TRUE(c.roi == ex.mask);
    EXPECT_EQ(c.prompt.raw, edit_caption(ex.caption, PromptSlot::kColor, kShapeColors[c.target_color].name));

    const ProtocolEdit t = protocol_edit(ex, i, EvalMode::kTexture);
    EXPECT_NE(t.target_texture, ex.spec.texture);
    EXPECT_TRUE(t.roi == ex.mask.complement());

    const ProtocolEdit r = protocol_edit(ex, i, EvalMode::kReconstruct);
    EXPECT_EQ(r.target_color, ex.spec.color);
    EXPECT_TRUE(r.prompt == ex.prompt);
    EXPECT_TRUE(r.roi == ex.mask);
  }
}

TEST(Evaluate, AggregatesRecomputeAndFilesDeterministic) {
  const ModelState state(tiny_config());
  const auto test = synthetic_examples(6, 16, 5);
  const EvalProtocol p = quick_protocol(EvalMode::kColor, 6);
  TempDir a("eval_a"), b("eval_b");
  const EvalReport r1 = evaluate(state, test, p, &a.path());
  evaluate(state, test, p, &b.path());
  ASSERT_EQ(r1.records.size(), 6u);
  EXPECT_TRUE(r1.complete);
  for (const char* f : {"report.json", "report.csv"}) {
    const std::string x = read_file(a.path() / f);
    EXPECT_FALSE(x.empty());
    EXPECT_EQ(x, read_file(b.path() / f)) << f;
  }

  EvalReport again = r1;
  again.success_rate = again.mean_rmse = again.mean_psnr = again.mean_rmse_full = -1;
  again.recompute();
  EXPECT_DOUBLE_EQ(again.success_rate, r1.success_rate);
  EXPECT_DOUBLE_EQ(again.mean_rmse, r1.mean_rmse);
  EXPECT_DOUBLE_EQ(again.mean_rmse_full, r1.mean_rmse_full);
  EXPECT_DOUBLE_EQ(again.mean_psnr, r1.mean_psnr);
  EXPECT_GE(r1.success_rate, 0.0);
  EXPECT_LE(r1.success_rate, 1.0);

  const auto j = nlohmann::json::parse(read_file(a.path() / "report.json"));
  double sum = 0.0;
  for (const auto& rec : j.at("records")) sum += rec.at("rmse_outside").get<double>();
  EXPECT_NEAR(sum / 6.0, j.at("mean_rmse_outside").get<double>(), 1e-12);
  EXPECT_EQ(j.at("config").at("mode"), "color");

  const std::string csv = read_file(a.path() / "report.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "example_id,prompt,k,success,score,rmse_outside,psnr");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);

  // Each record follows from its own seed, independent of the worker count.
  EvalProtocol par = p;
  par.workers = 3;
  const EvalReport r3 = evaluate(state, test, par);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(r3.records[i].example_id, r1.records[i].example_id);
    EXPECT_EQ(r3.records[i].rmse_full, r1.records[i].rmse_full);
    EXPECT_EQ(r3.records[i].seed, r1.records[i].seed);
  }
}

TEST(Evaluate, PartialResultsFlushedOnFailure) {
  const ModelState state(tiny_config());
  auto test = synthetic_examples(4, 16, 6);
  const auto big = synthetic_examples(1, 32, 6);
  test[2].image = big[0].image;
  test[2].mask = big[0].mask;
  TempDir dir("eval_partial");
  EXPECT_THROW(evaluate(state, test, quick_protocol(EvalMode::kReconstruct, 4), &dir.path()), ValidationError);
  const auto j = nlohmann::json::parse(read_file(dir.path() / "report.json"));
  EXPECT_FALSE(j.at("complete").get<bool>());
  EXPECT_EQ(j.at("records").size(), 2u);
}

TEST(Evaluate, RejectsBadProtocol) {
  const ModelState state(tiny_config());
  const auto test = synthetic_examples(2, 16, 7);
  EvalProtocol p = quick_protocol(EvalMode::kColor, 0);
  EXPECT_THROW(evaluate(state, test, p), ValidationError);
  p.count = 2;
  p.k = 10000;
  EXPECT_THROW(evaluate(state, test, p), ValidationError);
  EXPECT_THROW(evaluate(state, {}, p), ValidationError);
}

// Ablation fixture: an untrained network with its condition path still at
// zero cannot paint the requested color; a briefly trained one can.
TEST(Evaluate, TrainedModelBeatsIdentityModel) {
  const auto train_set = synthetic_examples(256, 16, 31);
  const auto test = synthetic_examples(40, 16, 32);
  EvalProtocol p = quick_protocol(EvalMode::kColor, 40);
  p.ddim_steps = 10;

  const ModelState untrained(tiny_config());
  const EvalReport base = evaluate(untrained, test, p);
  EXPECT_LE(base.success_rate, 0.1);

  TrainConfig c;
  c.model = tiny_config();
  c.batch_size = 8;
  c.learning_rate = 2e-3;
  c.total_steps = 3000;
  c.checkpoint_every = 3000;
  c.seed = 5;
  TempDir dir("eval_trained");
  const TrainOutcome out = train(c, train_set, dir.path());
  const EvalReport trained = evaluate(*out.state, test, p);
  RecordProperty("untrained_success", std::to_string(base.success_rate));
  RecordProperty("trained_success", std::to_string(trained.success_rate));
  EXPECT_GT(trained.success_rate, base.success_rate);
}
