#pragma once

#include <string>
#include <vector>

#include "iir/rng.hpp"
#include "iir/tensor.hpp"

// Minimal layer set for the denoiser, condition encoder and text encoder.
// Every layer exposes a const forward that optionally records what backward
// needs into a caller-owned cache, and a backward that accumulates parameter
// gradients and returns the input gradient. Layers never mutate themselves
// during forward, so one set of weights can serve concurrent inference.
//
// Feature-major layout: a batch of vectors is [D, M]; a batch of feature maps
// is {C, N, H, W}; both are row-major.
namespace iir::nn {

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  void resize(std::vector<int> shape) {
    value = Tensor<T>(shape);
    grad = Tensor<T>(std::move(shape));
  }
  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
using ParamList = std::vector<Param<T>*>;

// U(-bound, bound) with bound = 1/sqrt(fan_in).
template <typename T>
void init_fan_in(Param<T>& p, int fan_in, Rng& rng);

template <typename T>
class Linear {
 public:
  struct Cache {
    Tensor<T> x;
  };

  Linear() = default;
  Linear(const std::string& name, int in, int out, Rng& rng, bool zero_init = false);

  // x: {in, ...} -> {out, ...}
  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy);
  void collect(ParamList<T>& out);

  int in() const { return in_; }
  int out() const { return out_; }

 private:
  int in_ = 0;
  int out_ = 0;
  Param<T> weight_;
  Param<T> bias_;
};

template <typename T>
class Conv2d {
 public:
  struct Cache {
    Tensor<T> x;
  };

  Conv2d() = default;
  Conv2d(const std::string& name, int in, int out, int kernel, int stride, int pad, Rng& rng,
         bool zero_init = false);

  // x: {C, N, H, W}
  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy);
  void collect(ParamList<T>& out);

  int in() const { return in_; }
  int out() const { return out_; }
  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }
  const Param<T>& weight() const { return weight_; }
  const Param<T>& bias() const { return bias_; }

 private:
  int out_size(int n) const { return (n + 2 * pad_ - kernel_) / stride_ + 1; }
  void im2col(const Tensor<T>& x, Tensor<T>& col) const;
  void col2im(const Tensor<T>& col, Tensor<T>& gx) const;
  bool pointwise() const { return kernel_ == 1 && stride_ == 1 && pad_ == 0; }

  int in_ = 0;
  int out_ = 0;
  int kernel_ = 1;
  int stride_ = 1;
  int pad_ = 0;
  Param<T> weight_;  // [out, in*k*k]
  Param<T> bias_;
};

template <typename T>
class GroupNorm {
 public:
  struct Cache {
    Tensor<T> xhat;
    std::vector<T> inv_std;
  };

  GroupNorm() = default;
  GroupNorm(const std::string& name, int channels, int groups);

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy);
  void collect(ParamList<T>& out);

 private:
  int channels_ = 0;
  int groups_ = 1;
  Param<T> gamma_;
  Param<T> beta_;
};

// Normalises each column of a [D, M] matrix.
template <typename T>
class LayerNorm {
 public:
  struct Cache {
    Tensor<T> xhat;
    std::vector<T> inv_std;
  };

  LayerNorm() = default;
  LayerNorm(const std::string& name, int features);

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const;
  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy);
  void collect(ParamList<T>& out);

 private:
  int features_ = 0;
  Param<T> gamma_;
  Param<T> beta_;
};

template <typename T>
Tensor<T> silu(const Tensor<T>& x);
template <typename T>
Tensor<T> silu_backward(const Tensor<T>& x, const Tensor<T>& gy);

// {C, N, H, W} -> {C, N, 2H, 2W}
template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& x);
template <typename T>
Tensor<T> upsample_nearest2_backward(const Tensor<T>& gy);

// Channel concatenation of {Ca, N, H, W} and {Cb, N, H, W}; contiguous in this layout.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& g, int ca);

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src);

// Sinusoidal timestep features, [dim, N].
template <typename T>
Tensor<T> timestep_features(const std::vector<int>& t, int dim);

}  // namespace iir::nn
