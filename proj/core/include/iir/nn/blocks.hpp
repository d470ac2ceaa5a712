#pragma once

#include <cstdint>
#include <vector>

#include "iir/nn/attention.hpp"
#include "iir/nn/layers.hpp"

namespace iir::nn {

// GN -> SiLU -> conv3x3 -> +time -> GN -> SiLU -> conv3x3, plus a (1x1) skip.
template <typename T>
class ResBlock {
 public:
  struct Cache {
    typename GroupNorm<T>::Cache gn1, gn2;
    typename Conv2d<T>::Cache conv1, conv2, skip;
    typename Linear<T>::Cache time;
    Tensor<T> pre1, pre2;
  };
  struct Grads {
    Tensor<T> x;
    Tensor<T> time;
  };

  ResBlock() = default;
  ResBlock(const std::string& name, int in, int out, int time_dim, int groups, Rng& rng);

  // time: SiLU-activated time embedding, [time_dim, N].
  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& time, Cache* cache) const;
  Grads backward(const Cache& cache, const Tensor<T>& gy);
  void collect(ParamList<T>& out);

 private:
  bool has_skip_ = false;
  GroupNorm<T> gn1_, gn2_;
  Conv2d<T> conv1_, conv2_, skip_;
  Linear<T> time_;
};

// x + attn(GN(x), text): queries are pixels, keys/values are text tokens.
template <typename T>
class CrossAttentionBlock {
 public:
  struct Cache {
    typename GroupNorm<T>::Cache gn;
    typename MultiHeadAttention<T>::Cache attn;
  };
  struct Grads {
    Tensor<T> x;
    Tensor<T> context;
  };

  CrossAttentionBlock() = default;
  CrossAttentionBlock(const std::string& name, int channels, int context_dim, int heads, int groups, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& context, const std::vector<std::uint8_t>& mask,
                    Cache* cache) const;
  Grads backward(const Cache& cache, const Tensor<T>& gy);
  void collect(ParamList<T>& out);

 private:
  GroupNorm<T> gn_;
  MultiHeadAttention<T> attn_;
};

// Pre-norm transformer layer over a [D, N*L] token matrix.
template <typename T>
class TransformerLayer {
 public:
  struct Cache {
    typename LayerNorm<T>::Cache ln1, ln2;
    typename MultiHeadAttention<T>::Cache attn;
    typename Linear<T>::Cache fc1, fc2;
    Tensor<T> hidden;
  };

  TransformerLayer() = default;
  TransformerLayer(const std::string& name, int dim, int heads, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, const std::vector<std::uint8_t>& mask, int batch, Cache* cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy);
  void collect(ParamList<T>& out);

 private:
  LayerNorm<T> ln1_, ln2_;
  MultiHeadAttention<T> attn_;
  Linear<T> fc1_, fc2_;
};

}  // namespace iir::nn
