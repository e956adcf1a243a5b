// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations. Every op records itself on the active tape
// when at least one input requires gradients; otherwise it runs
// forward-only. Matrices are rank-2 row-major tensors.

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "duorec/rng.hpp"
#include "duorec/tensor.hpp"

namespace duorec {

/// a[m x k] . b[k x n]
Tensor matmul(const Tensor& a, const Tensor& b);
/// a[m x k] . b[n x k]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Elementwise sum of equal-shaped tensors.
Tensor add(const Tensor& a, const Tensor& b);
/// x[m x n] + bias[n] broadcast over rows. The only broadcast supported.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double factor);
/// Exact (erf-based) GELU.
Tensor gelu(const Tensor& x);

/// Row-wise softmax with max subtraction. NaN inputs propagate.
Tensor softmax_rows(const Tensor& x);

/// Inverted dropout: each element is zeroed with probability `rate` and
/// survivors are scaled by 1/(1-rate). The mask is drawn from `stream`,
/// one uniform per element in row-major order. rate == 0 returns `x`
/// unchanged and draws nothing.
Tensor dropout(const Tensor& x, double rate, RngStream& stream);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

/// Stacks table rows. Backward scatter-adds into the table; rows equal to
/// `frozen_row` receive no gradient.
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices,
                   std::optional<std::size_t> frozen_row = std::nullopt);
/// Rows [begin, end) of a matrix.
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
/// Vertical concatenation of two matrices with equal column counts.
Tensor concat_rows(const Tensor& a, const Tensor& b);
/// Same data under a new shape of equal element count.
Tensor reshape(const Tensor& x, Shape shape);
/// Each row divided by its Euclidean norm.
Tensor l2_normalize_rows(const Tensor& x);

/// Mean over rows of -log softmax(logits)[target].
Tensor cross_entropy_from_logits(const Tensor& logits, std::span<const std::size_t> targets);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// sum_i x_i * weights_i with constant weights.
Tensor weighted_sum(const Tensor& x, std::span<const double> weights);

struct AttentionShape {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::size_t heads = 1;
};

/// Multi-head causal scaled dot-product attention over flattened
/// [batch*seq_len x d] projections. Query i of a row attends to keys j <= i
/// with key_valid[row*seq_len + j] set; a query with no admissible key
/// yields a zero output. Attention probabilities are dropped out at `rate`.
/// With `last_query_only` only the final position of each row is computed
/// and the result is [batch x d].
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& shape,
                        std::span<const unsigned char> key_valid, double rate, RngStream* stream,
                        bool last_query_only = false);

}  // namespace duorec
