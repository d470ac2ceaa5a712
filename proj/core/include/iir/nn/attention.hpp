#pragma once

#include <cstdint>
#include <vector>

#include "iir/nn/layers.hpp"

namespace iir::nn {

// Multi-head scaled dot-product attention. Queries are [Dq, N*M]; context
// is [Dc, N*L] with a per-key validity mask of size N*L. Masked keys get zero
// weight.
template <typename T>
class MultiHeadAttention {
 public:
  struct Cache {
    typename Linear<T>::Cache q_in, k_in, v_in, o_in;
    Tensor<T> q, k, v;
    Tensor<T> probs;  // per (n, head): [L, M]
    int n = 0, m = 0, l = 0;
    std::vector<std::uint8_t> mask;
    std::vector<int> query_shape, context_shape;
  };
  struct Grads {
    Tensor<T> query;
    Tensor<T> context;
  };

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, int query_dim, int context_dim, int heads, Rng& rng);

  Tensor<T> forward(const Tensor<T>& query, const Tensor<T>& context, const std::vector<std::uint8_t>& key_mask,
                    int batch, Cache* cache) const;
  Grads backward(const Cache& cache, const Tensor<T>& gy);
  void collect(ParamList<T>& out);

 private:
  int heads_ = 1;
  int inner_ = 0;
  Linear<T> to_q_, to_k_, to_v_, to_out_;
};

}  // namespace iir::nn
