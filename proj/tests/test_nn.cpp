#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "iir/nn/blocks.hpp"
#include "iir/rng.hpp"

using namespace iir;
using namespace iir::nn;

namespace {

Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  fill_normal(rng, t.span());
  for (auto& v : t.values()) v *= scale;
  return t;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

// Central differences of f at a few coordinates of `target`.
void expect_grad_matches(const std::function<double()>& f, Tensor<double>& target, const Tensor<double>& analytic,
                         const char* what, int probes = 6) {
  ASSERT_TRUE(target.same_shape(analytic)) << what;
  const double h = 1e-5;
  for (int p = 0; p < probes; ++p) {
    const std::size_t i = (p * 7919u + 13u) % target.size();
    const double keep = target[i];
    target[i] = keep + h;
    const double up = f();
    target[i] = keep - h;
    const double down = f();
    target[i] = keep;
    const double numeric = (up - down) / (2 * h);
    EXPECT_LT(rel_err(analytic[i], numeric), 1e-5) << what << "[" << i << "] analytic " << analytic[i]
                                                   << " numeric " << numeric;
  }
}

void check_params(ParamList<double>& params, const std::function<double()>& f) {
  for (auto* p : params) expect_grad_matches(f, p->value, p->grad, p->name.c_str(), 3);
}

}  // namespace

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  Rng rng(1);
  for (auto [k, s, pad] : {std::tuple{3, 1, 1}, std::tuple{3, 2, 1}, std::tuple{1, 1, 0}}) {
    Conv2d<double> conv("c", 3, 4, k, s, pad, rng);
    Tensor<double> x = random_tensor({3, 2, 6, 6}, rng);
    typename Conv2d<double>::Cache cache;
    const Tensor<double> y = conv.forward(x, &cache);
    const Tensor<double> r = random_tensor(y.shape(), rng);
    ParamList<double> params;
    conv.collect(params);
    for (auto* p : params) p->zero_grad();
    const Tensor<double> gx = conv.backward(cache, r);
    auto f = [&] { return dot(conv.forward(x, nullptr), r); };
    expect_grad_matches(f, x, gx, "conv x");
    check_params(params, f);
  }
}

TEST(Conv2d, StrideTwoHalvesResolution) {
  Rng rng(2);
  Conv2d<float> conv("c", 2, 5, 3, 2, 1, rng);
  const Tensor<float> y = conv.forward(Tensor<float>({2, 3, 8, 8}, 1.0f), nullptr);
  EXPECT_EQ(y.shape(), (std::vector<int>{5, 3, 4, 4}));
}

TEST(Conv2d, ZeroInitOutputsZero) {
  Rng rng(3);
  Conv2d<float> conv("z", 4, 4, 1, 1, 0, rng, true);
  Tensor<float> x({4, 1, 3, 3}, 2.5f);
  const Tensor<float> y = conv.forward(x, nullptr);
  for (float v : y.values()) EXPECT_EQ(v, 0.0f);
}

TEST(GroupNorm, GradientsMatchFiniteDifferences) {
  Rng rng(4);
  GroupNorm<double> gn("g", 6, 3);
  ParamList<double> params;
  gn.collect(params);
  for (auto* p : params) {
    for (auto& v : p->value.values()) v += 0.3 * std::sin(static_cast<double>(&v - p->value.data()));
  }
  Tensor<double> x = random_tensor({6, 2, 4, 4}, rng, 2.0);
  typename GroupNorm<double>::Cache cache;
  const Tensor<double> r = random_tensor({6, 2, 4, 4}, rng);
  gn.forward(x, &cache);
  for (auto* p : params) p->zero_grad();
  const Tensor<double> gx = gn.backward(cache, r);
  auto f = [&] { return dot(gn.forward(x, nullptr), r); };
  expect_grad_matches(f, x, gx, "gn x");
  check_params(params, f);
}

TEST(GroupNorm, NormalisesEachGroup) {
  Rng rng(5);
  GroupNorm<double> gn("g", 4, 2);
  const Tensor<double> y = gn.forward(random_tensor({4, 1, 5, 5}, rng, 3.0), nullptr);
  for (int g = 0; g < 2; ++g) {
    double mean = 0, sq = 0;
    for (int i = 0; i < 50; ++i) mean += y[g * 50 + i];
    mean /= 50;
    for (int i = 0; i < 50; ++i) sq += (y[g * 50 + i] - mean) * (y[g * 50 + i] - mean);
    EXPECT_NEAR(mean, 0.0, 1e-9);
    EXPECT_NEAR(sq / 50, 1.0, 1e-3);
  }
}

TEST(LayerNorm, GradientsMatchFiniteDifferences) {
  Rng rng(6);
  LayerNorm<double> ln("l", 5);
  Tensor<double> x = random_tensor({5, 7}, rng);
  const Tensor<double> r = random_tensor({5, 7}, rng);
  typename LayerNorm<double>::Cache cache;
  ln.forward(x, &cache);
  ParamList<double> params;
  ln.collect(params);
  for (auto* p : params) p->zero_grad();
  const Tensor<double> gx = ln.backward(cache, r);
  auto f = [&] { return dot(ln.forward(x, nullptr), r); };
  expect_grad_matches(f, x, gx, "ln x");
  check_params(params, f);
}

TEST(Linear, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  Linear<double> lin("fc", 4, 3, rng);
  Tensor<double> x = random_tensor({4, 5}, rng);
  const Tensor<double> r = random_tensor({3, 5}, rng);
  typename Linear<double>::Cache cache;
  lin.forward(x, &cache);
  ParamList<double> params;
  lin.collect(params);
  for (auto* p : params) p->zero_grad();
  const Tensor<double> gx = lin.backward(cache, r);
  auto f = [&] { return dot(lin.forward(x, nullptr), r); };
  expect_grad_matches(f, x, gx, "linear x");
  check_params(params, f);
}

TEST(Attention, GradientsMatchFiniteDifferences) {
  Rng rng(8);
  MultiHeadAttention<double> attn("a", 6, 4, 2, rng);
  const int n = 2, m = 5, l = 3;
  Tensor<double> q = random_tensor({6, n * m}, rng);
  Tensor<double> c = random_tensor({4, n * l}, rng);
  const std::vector<std::uint8_t> mask{1, 1, 0, 1, 0, 0};
  const Tensor<double> r = random_tensor({6, n * m}, rng);
  typename MultiHeadAttention<double>::Cache cache;
  attn.forward(q, c, mask, n, &cache);
  ParamList<double> params;
  attn.collect(params);
  for (auto* p : params) p->zero_grad();
  const auto g = attn.backward(cache, r);
  auto f = [&] { return dot(attn.forward(q, c, mask, n, nullptr), r); };
  expect_grad_matches(f, q, g.query, "attn query");
  expect_grad_matches(f, c, g.context, "attn context");
  check_params(params, f);
}

TEST(Attention, MaskedKeysHaveNoInfluence) {
  Rng rng(9);
  MultiHeadAttention<double> attn("a", 4, 4, 2, rng);
  Tensor<double> q = random_tensor({4, 3}, rng);
  Tensor<double> c = random_tensor({4, 3}, rng);
  const std::vector<std::uint8_t> mask{1, 0, 1};
  const Tensor<double> before = attn.forward(q, c, mask, 1, nullptr);
  for (int d = 0; d < 4; ++d) c[d * 3 + 1] += 10.0;
  const Tensor<double> after = attn.forward(q, c, mask, 1, nullptr);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_DOUBLE_EQ(before[i], after[i]);
}

TEST(ResBlock, GradientsMatchFiniteDifferences) {
  Rng rng(10);
  ResBlock<double> block("r", 4, 6, 5, 2, rng);
  Tensor<double> x = random_tensor({4, 2, 4, 4}, rng);
  Tensor<double> time = random_tensor({5, 2}, rng);
  const Tensor<double> r = random_tensor({6, 2, 4, 4}, rng);
  typename ResBlock<double>::Cache cache;
  block.forward(x, time, &cache);
  ParamList<double> params;
  block.collect(params);
  for (auto* p : params) p->zero_grad();
  const auto g = block.backward(cache, r);
  auto f = [&] { return dot(block.forward(x, time, nullptr), r); };
  expect_grad_matches(f, x, g.x, "res x");
  expect_grad_matches(f, time, g.time, "res time");
  check_params(params, f);
}

TEST(CrossAttentionBlock, GradientsMatchFiniteDifferences) {
  Rng rng(11);
  CrossAttentionBlock<double> block("x", 4, 6, 2, 2, rng);
  Tensor<double> x = random_tensor({4, 2, 3, 3}, rng);
  Tensor<double> ctx = random_tensor({6, 2 * 4}, rng);
  const std::vector<std::uint8_t> mask{1, 1, 1, 0, 1, 0, 0, 0};
  const Tensor<double> r = random_tensor(x.shape(), rng);
  typename CrossAttentionBlock<double>::Cache cache;
  block.forward(x, ctx, mask, &cache);
  ParamList<double> params;
  block.collect(params);
  for (auto* p : params) p->zero_grad();
  const auto g = block.backward(cache, r);
  auto f = [&] { return dot(block.forward(x, ctx, mask, nullptr), r); };
  expect_grad_matches(f, x, g.x, "xattn x");
  expect_grad_matches(f, ctx, g.context, "xattn context");
  check_params(params, f);
}

TEST(TransformerLayer, GradientsMatchFiniteDifferences) {
  Rng rng(12);
  TransformerLayer<double> layer("t", 4, 2, rng);
  Tensor<double> x = random_tensor({4, 2 * 3}, rng);
  const std::vector<std::uint8_t> mask{1, 1, 0, 1, 0, 0};
  const Tensor<double> r = random_tensor(x.shape(), rng);
  typename TransformerLayer<double>::Cache cache;
  layer.forward(x, mask, 2, &cache);
  ParamList<double> params;
  layer.collect(params);
  for (auto* p : params) p->zero_grad();
  const Tensor<double> gx = layer.backward(cache, r);
  auto f = [&] { return dot(layer.forward(x, mask, 2, nullptr), r); };
  expect_grad_matches(f, x, gx, "transformer x");
  check_params(params, f);
}

TEST(Elementwise, SiluAndUpsampleBackward) {
  Rng rng(13);
  Tensor<double> x = random_tensor({2, 1, 3, 3}, rng);
  const Tensor<double> r = random_tensor(x.shape(), rng);
  expect_grad_matches([&] { return dot(silu(x), r); }, x, silu_backward(x, r), "silu");

  const Tensor<double> ru = random_tensor({2, 1, 6, 6}, rng);
  expect_grad_matches([&] { return dot(upsample_nearest2(x), ru); }, x, upsample_nearest2_backward(ru), "upsample");
}

TEST(Elementwise, ConcatSplitRoundTrip) {
  Rng rng(14);
  const Tensor<double> a = random_tensor({2, 2, 3, 3}, rng);
  const Tensor<double> b = random_tensor({3, 2, 3, 3}, rng);
  const auto [ga, gb] = split_channels(concat_channels(a, b), 2);
  EXPECT_EQ(ga.values(), a.values());
  EXPECT_EQ(gb.values(), b.values());
}

TEST(TimestepFeatures, SinCosLayout) {
  const Tensor<double> f = timestep_features<double>({0, 10}, 8);
  EXPECT_EQ(f.shape(), (std::vector<int>{8, 2}));
  // t = 0: sines vanish, cosines are one.
  for (int d = 0; d < 4; ++d) EXPECT_NEAR(f[d * 2 + 0], 0.0, 1e-12);
  for (int d = 4; d < 8; ++d) EXPECT_NEAR(f[d * 2 + 0], 1.0, 1e-12);
}
