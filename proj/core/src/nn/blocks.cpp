#include "iir/nn/blocks.hpp"

namespace iir::nn {

template <typename T>
ResBlock<T>::ResBlock(const std::string& name, int in, int out, int time_dim, int groups, Rng& rng)
    : has_skip_(in != out),
      gn1_(name + ".norm1", in, groups),
      gn2_(name + ".norm2", out, groups),
      conv1_(name + ".conv1", in, out, 3, 1, 1, rng),
      conv2_(name + ".conv2", out, out, 3, 1, 1, rng),
      time_(name + ".time_proj", time_dim, out, rng) {
  if (has_skip_) skip_ = Conv2d<T>(name + ".skip", in, out, 1, 1, 0, rng);
}

template <typename T>
Tensor<T> ResBlock<T>::forward(const Tensor<T>& x, const Tensor<T>& time, Cache* cache) const {
  Tensor<T> pre1 = gn1_.forward(x, cache ? &cache->gn1 : nullptr);
  Tensor<T> h = conv1_.forward(silu(pre1), cache ? &cache->conv1 : nullptr);
  const Tensor<T> tp = time_.forward(time, cache ? &cache->time : nullptr);
  const int c = h.dim(0), n = h.dim(1);
  const std::size_t hw = static_cast<std::size_t>(h.dim(2)) * h.dim(3);
  for (int ch = 0; ch < c; ++ch) {
    for (int b = 0; b < n; ++b) {
      const T add = tp[static_cast<std::size_t>(ch) * n + b];
      T* p = h.data() + (static_cast<std::size_t>(ch) * n + b) * hw;
      for (std::size_t i = 0; i < hw; ++i) p[i] += add;
    }
  }
  Tensor<T> pre2 = gn2_.forward(h, cache ? &cache->gn2 : nullptr);
  Tensor<T> y = conv2_.forward(silu(pre2), cache ? &cache->conv2 : nullptr);
  if (has_skip_) {
    add_inplace(y, skip_.forward(x, cache ? &cache->skip : nullptr));
  } else {
    add_inplace(y, x);
  }
  if (cache) {
    cache->pre1 = std::move(pre1);
    cache->pre2 = std::move(pre2);
  }
  return y;
}

template <typename T>
typename ResBlock<T>::Grads ResBlock<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  Tensor<T> g = conv2_.backward(cache.conv2, gy);
  g = gn2_.backward(cache.gn2, silu_backward(cache.pre2, g));
  const int c = g.dim(0), n = g.dim(1);
  const std::size_t hw = static_cast<std::size_t>(g.dim(2)) * g.dim(3);
  Tensor<T> gtp({c, n});
  for (int ch = 0; ch < c; ++ch) {
    for (int b = 0; b < n; ++b) {
      const T* p = g.data() + (static_cast<std::size_t>(ch) * n + b) * hw;
      T s = 0;
      for (std::size_t i = 0; i < hw; ++i) s += p[i];
      gtp[static_cast<std::size_t>(ch) * n + b] = s;
    }
  }
  Grads out;
  out.time = time_.backward(cache.time, gtp);
  g = conv1_.backward(cache.conv1, g);
  out.x = gn1_.backward(cache.gn1, silu_backward(cache.pre1, g));
  if (has_skip_) {
    add_inplace(out.x, skip_.backward(cache.skip, gy));
  } else {
    add_inplace(out.x, gy);
  }
  return out;
}

template <typename T>
void ResBlock<T>::collect(ParamList<T>& out) {
  gn1_.collect(out);
  conv1_.collect(out);
  time_.collect(out);
  gn2_.collect(out);
  conv2_.collect(out);
  if (has_skip_) skip_.collect(out);
}

template <typename T>
CrossAttentionBlock<T>::CrossAttentionBlock(const std::string& name, int channels, int context_dim, int heads,
                                            int groups, Rng& rng)
    : gn_(name + ".norm", channels, groups), attn_(name + ".attn", channels, context_dim, heads, rng) {}

template <typename T>
Tensor<T> CrossAttentionBlock<T>::forward(const Tensor<T>& x, const Tensor<T>& context,
                                          const std::vector<std::uint8_t>& mask, Cache* cache) const {
  const Tensor<T> normed = gn_.forward(x, cache ? &cache->gn : nullptr);
  Tensor<T> y = attn_.forward(normed, context, mask, x.dim(1), cache ? &cache->attn : nullptr);
  add_inplace(y, x);
  return y;
}

template <typename T>
typename CrossAttentionBlock<T>::Grads CrossAttentionBlock<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  auto ga = attn_.backward(cache.attn, gy);
  Grads out;
  out.x = gn_.backward(cache.gn, ga.query);
  add_inplace(out.x, gy);
  out.context = std::move(ga.context);
  return out;
}

template <typename T>
void CrossAttentionBlock<T>::collect(ParamList<T>& out) {
  gn_.collect(out);
  attn_.collect(out);
}

template <typename T>
TransformerLayer<T>::TransformerLayer(const std::string& name, int dim, int heads, Rng& rng)
    : ln1_(name + ".ln1", dim),
      ln2_(name + ".ln2", dim),
      attn_(name + ".attn", dim, dim, heads, rng),
      fc1_(name + ".fc1", dim, 2 * dim, rng),
      fc2_(name + ".fc2", 2 * dim, dim, rng) {}

template <typename T>
Tensor<T> TransformerLayer<T>::forward(const Tensor<T>& x, const std::vector<std::uint8_t>& mask, int batch,
                                       Cache* cache) const {
  const Tensor<T> n1 = ln1_.forward(x, cache ? &cache->ln1 : nullptr);
  Tensor<T> h = attn_.forward(n1, n1, mask, batch, cache ? &cache->attn : nullptr);
  add_inplace(h, x);
  const Tensor<T> n2 = ln2_.forward(h, cache ? &cache->ln2 : nullptr);
  Tensor<T> hidden = fc1_.forward(n2, cache ? &cache->fc1 : nullptr);
  Tensor<T> y = fc2_.forward(silu(hidden), cache ? &cache->fc2 : nullptr);
  add_inplace(y, h);
  if (cache) cache->hidden = std::move(hidden);
  return y;
}

template <typename T>
Tensor<T> TransformerLayer<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  Tensor<T> g = fc2_.backward(cache.fc2, gy);
  g = fc1_.backward(cache.fc1, silu_backward(cache.hidden, g));
  Tensor<T> gh = ln2_.backward(cache.ln2, g);
  add_inplace(gh, gy);
  auto ga = attn_.backward(cache.attn, gh);
  add_inplace(ga.query, ga.context);
  Tensor<T> gx = ln1_.backward(cache.ln1, ga.query);
  add_inplace(gx, gh);
  return gx;
}

template <typename T>
void TransformerLayer<T>::collect(ParamList<T>& out) {
  ln1_.collect(out);
  attn_.collect(out);
  ln2_.collect(out);
  fc1_.collect(out);
  fc2_.collect(out);
}

template class ResBlock<float>;
template class ResBlock<double>;
template class CrossAttentionBlock<float>;
template class CrossAttentionBlock<double>;
template class TransformerLayer<float>;
template class TransformerLayer<double>;

}  // namespace iir::nn
