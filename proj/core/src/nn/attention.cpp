#include "iir/nn/attention.hpp"

#include <cmath>
#include <limits>

namespace iir::nn {

namespace {

template <typename T>
using Strided = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStrided = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

// Rows [head*dh, (head+1)*dh) and columns [b*cols, (b+1)*cols) of a [inner, N*cols] matrix.
template <typename T>
ConstStrided<T> block(const Tensor<T>& t, int head, int dh, int b, int cols, int total_cols) {
  return ConstStrided<T>(t.data() + static_cast<std::size_t>(head) * dh * total_cols + static_cast<std::size_t>(b) * cols,
                         dh, cols, Eigen::OuterStride<>(total_cols));
}
template <typename T>
Strided<T> block(Tensor<T>& t, int head, int dh, int b, int cols, int total_cols) {
  return Strided<T>(t.data() + static_cast<std::size_t>(head) * dh * total_cols + static_cast<std::size_t>(b) * cols,
                    dh, cols, Eigen::OuterStride<>(total_cols));
}

}  // namespace

template <typename T>
MultiHeadAttention<T>::MultiHeadAttention(const std::string& name, int query_dim, int context_dim, int heads,
                                          Rng& rng)
    : heads_(heads), inner_(query_dim) {
  require(heads > 0 && query_dim % heads == 0, name + ": query dim must be divisible by heads");
  to_q_ = Linear<T>(name + ".to_q", query_dim, inner_, rng);
  to_k_ = Linear<T>(name + ".to_k", context_dim, inner_, rng);
  to_v_ = Linear<T>(name + ".to_v", context_dim, inner_, rng);
  to_out_ = Linear<T>(name + ".to_out", inner_, query_dim, rng);
}

template <typename T>
Tensor<T> MultiHeadAttention<T>::forward(const Tensor<T>& query, const Tensor<T>& context,
                                         const std::vector<std::uint8_t>& key_mask, int batch, Cache* cache) const {
  const int total_q = static_cast<int>(query.size() / query.dim(0));
  const int total_k = static_cast<int>(context.size() / context.dim(0));
  require(batch > 0 && total_q % batch == 0 && total_k % batch == 0, "attention: batch does not divide inputs");
  require(static_cast<int>(key_mask.size()) == total_k, "attention: key mask size mismatch");
  const int m = total_q / batch;
  const int l = total_k / batch;
  const int dh = inner_ / heads_;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  typename Linear<T>::Cache* cq = cache ? &cache->q_in : nullptr;
  typename Linear<T>::Cache* ck = cache ? &cache->k_in : nullptr;
  typename Linear<T>::Cache* cv = cache ? &cache->v_in : nullptr;
  Tensor<T> flat_q = query;
  flat_q.reshape({query.dim(0), total_q});
  Tensor<T> flat_c = context;
  flat_c.reshape({context.dim(0), total_k});
  Tensor<T> q = to_q_.forward(flat_q, cq);
  Tensor<T> k = to_k_.forward(flat_c, ck);
  Tensor<T> v = to_v_.forward(flat_c, cv);

  Tensor<T> o({inner_, total_q});
  Tensor<T> probs;
  if (cache) probs = Tensor<T>({batch, heads_, l, m});
  RowMatrix<T> s(l, m);
  for (int b = 0; b < batch; ++b) {
    for (int hd = 0; hd < heads_; ++hd) {
      s.noalias() = block(k, hd, dh, b, l, total_k).transpose() * block(q, hd, dh, b, m, total_q);
      s *= scale;
      for (int j = 0; j < m; ++j) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int i = 0; i < l; ++i) {
          if (key_mask[static_cast<std::size_t>(b) * l + i]) mx = std::max(mx, s(i, j));
        }
        T sum = 0;
        for (int i = 0; i < l; ++i) {
          const T e = key_mask[static_cast<std::size_t>(b) * l + i] ? std::exp(s(i, j) - mx) : T(0);
          s(i, j) = e;
          sum += e;
        }
        const T inv = sum > 0 ? T(1) / sum : T(0);
        for (int i = 0; i < l; ++i) s(i, j) *= inv;
      }
      block(o, hd, dh, b, m, total_q).noalias() = block(v, hd, dh, b, l, total_k) * s;
      if (cache) {
        std::copy(s.data(), s.data() + s.size(),
                  probs.data() + (static_cast<std::size_t>(b) * heads_ + hd) * l * m);
      }
    }
  }
  Tensor<T> y = to_out_.forward(o, cache ? &cache->o_in : nullptr);
  y.reshape(query.shape());
  if (cache) {
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->n = batch;
    cache->m = m;
    cache->l = l;
    cache->mask = key_mask;
    cache->query_shape = query.shape();
    cache->context_shape = context.shape();
  }
  return y;
}

template <typename T>
typename MultiHeadAttention<T>::Grads MultiHeadAttention<T>::backward(const Cache& cache, const Tensor<T>& gy) {
  const int batch = cache.n, m = cache.m, l = cache.l;
  const int total_q = batch * m, total_k = batch * l;
  const int dh = inner_ / heads_;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  Tensor<T> gflat = gy;
  gflat.reshape({gy.dim(0), total_q});
  const Tensor<T> go = to_out_.backward(cache.o_in, gflat);

  Tensor<T> gq({inner_, total_q});
  Tensor<T> gk({inner_, total_k});
  Tensor<T> gv({inner_, total_k});
  RowMatrix<T> gp(l, m);
  for (int b = 0; b < batch; ++b) {
    for (int hd = 0; hd < heads_; ++hd) {
      const ConstMatrixMap<T> p(cache.probs.data() + (static_cast<std::size_t>(b) * heads_ + hd) * l * m, l, m);
      const auto gob = block(go, hd, dh, b, m, total_q);
      block(gv, hd, dh, b, l, total_k).noalias() = gob * p.transpose();
      gp.noalias() = block(cache.v, hd, dh, b, l, total_k).transpose() * gob;
      for (int j = 0; j < m; ++j) {
        T dot = 0;
        for (int i = 0; i < l; ++i) dot += p(i, j) * gp(i, j);
        for (int i = 0; i < l; ++i) gp(i, j) = p(i, j) * (gp(i, j) - dot) * scale;
      }
      block(gq, hd, dh, b, m, total_q).noalias() = block(cache.k, hd, dh, b, l, total_k) * gp;
      block(gk, hd, dh, b, l, total_k).noalias() = block(cache.q, hd, dh, b, m, total_q) * gp.transpose();
    }
  }
  Grads out;
  out.query = to_q_.backward(cache.q_in, gq);
  out.context = to_k_.backward(cache.k_in, gk);
  add_inplace(out.context, to_v_.backward(cache.v_in, gv));
  out.query.reshape(cache.query_shape);
  out.context.reshape(cache.context_shape);
  return out;
}

template <typename T>
void MultiHeadAttention<T>::collect(ParamList<T>& out) {
  to_q_.collect(out);
  to_k_.collect(out);
  to_v_.collect(out);
  to_out_.collect(out);
}

template class MultiHeadAttention<float>;
template class MultiHeadAttention<double>;

}  // namespace iir::nn
