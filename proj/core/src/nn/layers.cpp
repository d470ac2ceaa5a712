#include "iir/nn/layers.hpp"

#include <cmath>

namespace iir::nn {

template <typename T>
void init_fan_in(Param<T>& p, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : p.value.values()) v = static_cast<T>(dist(rng));
}

// ---------------------------------------------------------------- Linear

template <typename T>
Linear<T>::Linear(const std::string& name, int in, int out, Rng& rng, bool zero_init) : in_(in), out_(out) {
  weight_.name = name + ".weight";
  bias_.name = name + ".bias";
  weight_.resize({out, in});
  bias_.resize({out});
  if (!zero_init) {
    init_fan_in(weight_, in, rng);
    init_fan_in(bias_, in, rng);
  }
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x, Cache* cache) const {
  require(x.ndim() >= 1 && x.dim(0) == in_,
          weight_.name + ": expected leading dim " + std::to_string(in_) + ", got " + shape_string(x.shape()));
  std::vector<int> shape = x.shape();
  shape[0] = out_;
  Tensor<T> y(shape);
  auto ym = as_matrix(y, out_);
  ym.noalias() = as_matrix(weight_.value, out_) * as_matrix(x, in_);
  const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias_.value.data(), out_);
  ym.colwise() += b;
  if (cache) cache->x = x;
  return y;
}

template <typename T>
Tensor<T> Linear<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  const auto gym = as_matrix(gy, out_);
  as_matrix(weight_.grad, out_).noalias() += gym * as_matrix(cache.x, in_).transpose();
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias_.grad.data(), out_) += gym.rowwise().sum();
  Tensor<T> gx(cache.x.shape());
  as_matrix(gx, in_).noalias() = as_matrix(weight_.value, out_).transpose() * gym;
  return gx;
}

template <typename T>
void Linear<T>::collect(ParamList<T>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

// ---------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T>::Conv2d(const std::string& name, int in, int out, int kernel, int stride, int pad, Rng& rng,
                  bool zero_init)
    : in_(in), out_(out), kernel_(kernel), stride_(stride), pad_(pad) {
  weight_.name = name + ".weight";
  bias_.name = name + ".bias";
  weight_.resize({out, in * kernel * kernel});
  bias_.resize({out});
  if (!zero_init) {
    init_fan_in(weight_, in * kernel * kernel, rng);
    init_fan_in(bias_, in * kernel * kernel, rng);
  }
}

template <typename T>
void Conv2d<T>::im2col(const Tensor<T>& x, Tensor<T>& col) const {
  const int n = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = out_size(h), wo = out_size(w);
  const std::size_t cols = static_cast<std::size_t>(n) * ho * wo;
  col = Tensor<T>({in_ * kernel_ * kernel_, static_cast<int>(cols)});
  T* dst = col.data();
  for (int c = 0; c < in_; ++c) {
    for (int ky = 0; ky < kernel_; ++ky) {
      for (int kx = 0; kx < kernel_; ++kx) {
        for (int b = 0; b < n; ++b) {
          const T* src = x.data() + (static_cast<std::size_t>(c) * n + b) * h * w;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= h) {
              std::fill(dst, dst + wo, T(0));
              dst += wo;
              continue;
            }
            const T* row = src + static_cast<std::size_t>(iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              *dst++ = (ix >= 0 && ix < w) ? row[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void Conv2d<T>::col2im(const Tensor<T>& col, Tensor<T>& gx) const {
  const int n = gx.dim(1), h = gx.dim(2), w = gx.dim(3);
  const int ho = out_size(h), wo = out_size(w);
  const T* src = col.data();
  for (int c = 0; c < in_; ++c) {
    for (int ky = 0; ky < kernel_; ++ky) {
      for (int kx = 0; kx < kernel_; ++kx) {
        for (int b = 0; b < n; ++b) {
          T* dst = gx.data() + (static_cast<std::size_t>(c) * n + b) * h * w;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= h) {
              src += wo;
              continue;
            }
            T* row = dst + static_cast<std::size_t>(iy) * w;
            for (int ox = 0; ox < wo; ++ox, ++src) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < w) row[ix] += *src;
            }
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x, Cache* cache) const {
  require(x.ndim() == 4 && x.dim(0) == in_,
          weight_.name + ": expected {" + std::to_string(in_) + ",N,H,W}, got " + shape_string(x.shape()));
  const int n = x.dim(1), ho = out_size(x.dim(2)), wo = out_size(x.dim(3));
  Tensor<T> y({out_, n, ho, wo});
  auto ym = as_matrix(y, out_);
  if (pointwise()) {
    ym.noalias() = as_matrix(weight_.value, out_) * as_matrix(x, in_);
  } else {
    Tensor<T> col;
    im2col(x, col);
    ym.noalias() = as_matrix(weight_.value, out_) * as_matrix(col, in_ * kernel_ * kernel_);
  }
  ym.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias_.value.data(), out_);
  if (cache) cache->x = x;
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  const auto gym = as_matrix(gy, out_);
  Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias_.grad.data(), out_) += gym.rowwise().sum();
  Tensor<T> gx(cache.x.shape());
  const int kk = in_ * kernel_ * kernel_;
  if (pointwise()) {
    as_matrix(weight_.grad, out_).noalias() += gym * as_matrix(cache.x, in_).transpose();
    as_matrix(gx, in_).noalias() = as_matrix(weight_.value, out_).transpose() * gym;
    return gx;
  }
  Tensor<T> col;
  im2col(cache.x, col);
  as_matrix(weight_.grad, out_).noalias() += gym * as_matrix(col, kk).transpose();
  as_matrix(col, kk).noalias() = as_matrix(weight_.value, out_).transpose() * gym;
  col2im(col, gx);
  return gx;
}

template <typename T>
void Conv2d<T>::collect(ParamList<T>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

// ---------------------------------------------------------------- GroupNorm

namespace {
constexpr double kNormEps = 1e-5;
}

template <typename T>
GroupNorm<T>::GroupNorm(const std::string& name, int channels, int groups) : channels_(channels), groups_(groups) {
  require(groups > 0 && channels % groups == 0, name + ": channels must be divisible by groups");
  gamma_.name = name + ".weight";
  beta_.name = name + ".bias";
  gamma_.resize({channels});
  beta_.resize({channels});
  gamma_.value.fill(T(1));
}

template <typename T>
Tensor<T> GroupNorm<T>::forward(const Tensor<T>& x, Cache* cache) const {
  require(x.ndim() == 4 && x.dim(0) == channels_, gamma_.name + ": bad input shape " + shape_string(x.shape()));
  const int n = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const int cpg = channels_ / groups_;
  const double count = static_cast<double>(cpg) * hw;
  Tensor<T> y(x.shape());
  Tensor<T> xhat;
  std::vector<T> inv(static_cast<std::size_t>(n) * groups_);
  if (cache) xhat = Tensor<T>(x.shape());
  for (int b = 0; b < n; ++b) {
    for (int g = 0; g < groups_; ++g) {
      double sum = 0.0, sq = 0.0;
      for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
        const T* p = x.data() + (static_cast<std::size_t>(c) * n + b) * hw;
        for (std::size_t i = 0; i < hw; ++i) sum += p[i];
      }
      const double mean = sum / count;
      for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
        const T* p = x.data() + (static_cast<std::size_t>(c) * n + b) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = p[i] - mean;
          sq += d * d;
        }
      }
      const T is = static_cast<T>(1.0 / std::sqrt(sq / count + kNormEps));
      inv[static_cast<std::size_t>(b) * groups_ + g] = is;
      const T m = static_cast<T>(mean);
      for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
        const std::size_t off = (static_cast<std::size_t>(c) * n + b) * hw;
        const T gm = gamma_.value[c], bt = beta_.value[c];
        for (std::size_t i = 0; i < hw; ++i) {
          const T xh = (x[off + i] - m) * is;
          if (cache) xhat[off + i] = xh;
          y[off + i] = xh * gm + bt;
        }
      }
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv);
  }
  return y;
}

template <typename T>
Tensor<T> GroupNorm<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  const Tensor<T>& xhat = cache.xhat;
  const int n = xhat.dim(1);
  const std::size_t hw = static_cast<std::size_t>(xhat.dim(2)) * xhat.dim(3);
  const int cpg = channels_ / groups_;
  const T count = static_cast<T>(cpg * hw);
  Tensor<T> gx(xhat.shape());
  for (int b = 0; b < n; ++b) {
    for (int g = 0; g < groups_; ++g) {
      T sum_g = 0, sum_gx = 0;
      for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
        const std::size_t off = (static_cast<std::size_t>(c) * n + b) * hw;
        const T gm = gamma_.value[c];
        T dg = 0, db = 0;
        for (std::size_t i = 0; i < hw; ++i) {
          const T go = gy[off + i];
          dg += go * xhat[off + i];
          db += go;
          const T gh = go * gm;
          sum_g += gh;
          sum_gx += gh * xhat[off + i];
        }
        gamma_.grad[c] += dg;
        beta_.grad[c] += db;
      }
      const T is = cache.inv_std[static_cast<std::size_t>(b) * groups_ + g];
      for (int c = g * cpg; c < (g + 1) * cpg; ++c) {
        const std::size_t off = (static_cast<std::size_t>(c) * n + b) * hw;
        const T gm = gamma_.value[c];
        for (std::size_t i = 0; i < hw; ++i) {
          const T gh = gy[off + i] * gm;
          gx[off + i] = is / count * (count * gh - sum_g - xhat[off + i] * sum_gx);
        }
      }
    }
  }
  return gx;
}

template <typename T>
void GroupNorm<T>::collect(ParamList<T>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

// ---------------------------------------------------------------- LayerNorm

template <typename T>
LayerNorm<T>::LayerNorm(const std::string& name, int features) : features_(features) {
  gamma_.name = name + ".weight";
  beta_.name = name + ".bias";
  gamma_.resize({features});
  beta_.resize({features});
  gamma_.value.fill(T(1));
}

template <typename T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x, Cache* cache) const {
  require(x.ndim() >= 1 && x.dim(0) == features_, gamma_.name + ": bad input shape " + shape_string(x.shape()));
  const auto xm = as_matrix(x, features_);
  const Eigen::Index cols = xm.cols();
  Tensor<T> y(x.shape());
  auto ym = as_matrix(y, features_);
  Tensor<T> xhat;
  if (cache) {
    xhat = Tensor<T>(x.shape());
    cache->inv_std.assign(cols, T(0));
  }
  for (Eigen::Index j = 0; j < cols; ++j) {
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < features_; ++i) sum += xm(i, j);
    const double mean = sum / features_;
    for (int i = 0; i < features_; ++i) {
      const double d = xm(i, j) - mean;
      sq += d * d;
    }
    const T is = static_cast<T>(1.0 / std::sqrt(sq / features_ + kNormEps));
    for (int i = 0; i < features_; ++i) {
      const T xh = (xm(i, j) - static_cast<T>(mean)) * is;
      if (cache) as_matrix(xhat, features_)(i, j) = xh;
      ym(i, j) = xh * gamma_.value[i] + beta_.value[i];
    }
    if (cache) cache->inv_std[j] = is;
  }
  if (cache) cache->xhat = std::move(xhat);
  return y;
}

template <typename T>
Tensor<T> LayerNorm<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  const auto xh = as_matrix(cache.xhat, features_);
  const auto gm = as_matrix(gy, features_);
  Tensor<T> gx(cache.xhat.shape());
  auto gxm = as_matrix(gx, features_);
  const T count = static_cast<T>(features_);
  for (Eigen::Index j = 0; j < xh.cols(); ++j) {
    T sum_g = 0, sum_gx = 0;
    for (int i = 0; i < features_; ++i) {
      gamma_.grad[i] += gm(i, j) * xh(i, j);
      beta_.grad[i] += gm(i, j);
      const T g = gm(i, j) * gamma_.value[i];
      sum_g += g;
      sum_gx += g * xh(i, j);
    }
    const T is = cache.inv_std[j];
    for (int i = 0; i < features_; ++i) {
      const T g = gm(i, j) * gamma_.value[i];
      gxm(i, j) = is / count * (count * g - sum_g - xh(i, j) * sum_gx);
    }
  }
  return gx;
}

template <typename T>
void LayerNorm<T>::collect(ParamList<T>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] / (T(1) + std::exp(-x[i]));
  return y;
}

template <typename T>
Tensor<T> silu_backward(const Tensor<T>& x, const Tensor<T>& gy) {
  Tensor<T> gx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T s = T(1) / (T(1) + std::exp(-x[i]));
    gx[i] = gy[i] * s * (T(1) + x[i] * (T(1) - s));
  }
  return gx;
}

template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& x) {
  const int c = x.dim(0), n = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> y({c, n, 2 * h, 2 * w});
  for (int p = 0; p < c * n; ++p) {
    const T* src = x.data() + static_cast<std::size_t>(p) * h * w;
    T* dst = y.data() + static_cast<std::size_t>(p) * 4 * h * w;
    for (int yy = 0; yy < 2 * h; ++yy) {
      for (int xx = 0; xx < 2 * w; ++xx) dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
    }
  }
  return y;
}

template <typename T>
Tensor<T> upsample_nearest2_backward(const Tensor<T>& gy) {
  const int c = gy.dim(0), n = gy.dim(1), h = gy.dim(2) / 2, w = gy.dim(3) / 2;
  Tensor<T> gx({c, n, h, w});
  for (int p = 0; p < c * n; ++p) {
    const T* src = gy.data() + static_cast<std::size_t>(p) * 4 * h * w;
    T* dst = gx.data() + static_cast<std::size_t>(p) * h * w;
    for (int yy = 0; yy < 2 * h; ++yy) {
      for (int xx = 0; xx < 2 * w; ++xx) dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
    }
  }
  return gx;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.ndim() == 4 && b.ndim() == 4 && a.dim(1) == b.dim(1) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: incompatible shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
  Tensor<T> y({a.dim(0) + b.dim(0), a.dim(1), a.dim(2), a.dim(3)});
  std::copy(a.values().begin(), a.values().end(), y.values().begin());
  std::copy(b.values().begin(), b.values().end(), y.values().begin() + a.size());
  return y;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& g, int ca) {
  const int cb = g.dim(0) - ca;
  Tensor<T> a({ca, g.dim(1), g.dim(2), g.dim(3)});
  Tensor<T> b({cb, g.dim(1), g.dim(2), g.dim(3)});
  std::copy(g.values().begin(), g.values().begin() + a.size(), a.values().begin());
  std::copy(g.values().begin() + a.size(), g.values().end(), b.values().begin());
  return {std::move(a), std::move(b)};
}

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src) {
  require(dst.same_shape(src), "add_inplace: shape mismatch " + shape_string(dst.shape()) + " vs " +
                                   shape_string(src.shape()));
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
Tensor<T> timestep_features(const std::vector<int>& t, int dim) {
  require(dim % 2 == 0, "timestep feature dim must be even");
  const int half = dim / 2;
  const int n = static_cast<int>(t.size());
  Tensor<T> out({dim, n});
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    for (int b = 0; b < n; ++b) {
      out[static_cast<std::size_t>(i) * n + b] = static_cast<T>(std::sin(t[b] * freq));
      out[static_cast<std::size_t>(i + half) * n + b] = static_cast<T>(std::cos(t[b] * freq));
    }
  }
  return out;
}

#define IIR_INSTANTIATE(T)                                                               \
  template void init_fan_in<T>(Param<T>&, int, Rng&);                                    \
  template class Linear<T>;                                                              \
  template class Conv2d<T>;                                                              \
  template class GroupNorm<T>;                                                           \
  template class LayerNorm<T>;                                                           \
  template Tensor<T> silu<T>(const Tensor<T>&);                                          \
  template Tensor<T> silu_backward<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> upsample_nearest2<T>(const Tensor<T>&);                             \
  template Tensor<T> upsample_nearest2_backward<T>(const Tensor<T>&);                    \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);             \
  template std::pair<Tensor<T>, Tensor<T>> split_channels<T>(const Tensor<T>&, int);     \
  template void add_inplace<T>(Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> timestep_features<T>(const std::vector<int>&, int);

IIR_INSTANTIATE(float)
IIR_INSTANTIATE(double)

#undef IIR_INSTANTIATE

}  // namespace iir::nn
