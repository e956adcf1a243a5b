// SPDX-License-Identifier: Apache-2.0
#include "duorec/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "duorec/errors.hpp"
#include "kernels.hpp"

namespace duorec {

namespace {

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " . " +
                         shape_str(b.shape()));
  }
  Tensor out({m, n});
  kernels::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.mutable_data().data());
  if (autodiff::should_track({&a, &b})) {
    autodiff::record({a, b}, out, [a, b, out, m, k, n]() mutable {
      const double* g = out.grad().data();
      if (a.requires_grad()) kernels::gemm_nt(m, n, k, g, b.data().data(), a.mutable_grad().data());
      if (b.requires_grad()) kernels::gemm_tn(k, m, n, a.data().data(), g, b.mutable_grad().data());
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " . " +
                         shape_str(b.shape()) + "^T");
  }
  Tensor out({m, n});
  kernels::gemm_nt(m, k, n, a.data().data(), b.data().data(), out.mutable_data().data());
  if (autodiff::should_track({&a, &b})) {
    autodiff::record({a, b}, out, [a, b, out, m, k, n]() mutable {
      const double* g = out.grad().data();
      if (a.requires_grad()) kernels::gemm_nn(m, n, k, g, b.data().data(), a.mutable_grad().data());
      if (b.requires_grad()) kernels::gemm_tn(n, m, k, g, a.data().data(), b.mutable_grad().data());
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out({c, r});
  kernels::transpose(r, c, a.data().data(), out.mutable_data().data());
  if (autodiff::should_track({&a})) {
    autodiff::record({a}, out, [a, out, r, c]() mutable {
      std::vector<double> tmp(r * c);
      kernels::transpose(c, r, out.grad().data(), tmp.data());
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (autodiff::should_track({&a, &b})) {
    autodiff::record({a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank2(x, "add_row_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.numel() != n) {
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " does not match columns of " +
                         shape_str(x.shape()));
  }
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  auto bd = bias.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[i * n + j] = xd[i * n + j] + bd[j];
  if (autodiff::should_track({&x, &bias})) {
    autodiff::record({x, bias}, out, [x, bias, out, m, n]() mutable {
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xd[i] * factor;
  if (autodiff::should_track({&x})) {
    autodiff::record({x}, out, [x, out, factor]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * inv_sqrt2));
  if (autodiff::should_track({&x})) {
    autodiff::record({x}, out, [x, out]() mutable {
      constexpr double inv_sqrt_2pi = 0.39894228040143267794;
      auto g = out.grad();
      auto gx = x.mutable_grad();
      auto xv = x.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double cdf = 0.5 * (1.0 + std::erf(xv[i] * inv_sqrt2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xv[i] * xv[i]);
        gx[i] += g[i] * (cdf + xv[i] * pdf);
      }
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  require_rank2(x, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xd.data() + i * n;
    double* orow = o.data() + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      total += orow[j];
    }
    for (std::size_t j = 0; j < n; ++j) orow[j] /= total;
  }
  if (autodiff::should_track({&x})) {
    autodiff::record({x}, out, [x, out, m, n]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double rate, RngStream& stream) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mult(x.numel());
  for (double& m : mult) m = stream.next_uniform() < rate ? 0.0 : keep_scale;
  Tensor out(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xd[i] * mult[i];
  if (autodiff::should_track({&x})) {
    autodiff::record({x}, out, [x, out, mult = std::move(mult)]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mult[i];
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_rank2(x, "layer_norm");
  const std::size_t m = x.dim(0), d = x.dim(1);
  if (d == 0) throw DimensionError("layer_norm: feature dimension must be >= 1");
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match " + shape_str(x.shape()));
  }
  Tensor out(x.shape());
  std::vector<double> xhat(m * d);
  std::vector<double> rstd(m);
  auto xd = x.data();
  auto gd = gain.data();
  auto bd = bias.data();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xd.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mu) * rstd[i];
      o[i * d + j] = xhat[i * d + j] * gd[j] + bd[j];
    }
  }
  if (autodiff::should_track({&x, &gain, &bias})) {
    autodiff::record({x, gain, bias}, out,
                     [x, gain, bias, out, m, d, xhat = std::move(xhat), rstd = std::move(rstd)]() mutable {
                       auto g = out.grad();
                       if (gain.requires_grad()) {
                         auto gg = gain.mutable_grad();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xhat[i * d + j];
                       }
                       if (bias.requires_grad()) {
                         auto gb = bias.mutable_grad();
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
                       }
                       if (x.requires_grad()) {
                         auto gx = x.mutable_grad();
                         auto gd2 = gain.data();
                         const double inv_d = 1.0 / static_cast<double>(d);
                         for (std::size_t i = 0; i < m; ++i) {
                           double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dxh = g[i * d + j] * gd2[j];
                             mean_dxhat += dxh;
                             mean_dxhat_xhat += dxh * xhat[i * d + j];
                           }
                           mean_dxhat *= inv_d;
                           mean_dxhat_xhat *= inv_d;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dxh = g[i * d + j] * gd2[j];
                             gx[i * d + j] += rstd[i] * (dxh - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat);
                           }
                         }
                       }
                     });
  }
  return out;
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices,
                   std::optional<std::size_t> frozen_row) {
  require_rank2(table, "gather_rows");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  for (std::size_t idx : indices) {
    if (idx >= rows) {
      throw IndexError("gather_rows: index " + std::to_string(idx) + " out of range for table with " +
                       std::to_string(rows) + " rows");
    }
  }
  const std::size_t t = indices.size();
  Tensor out({t, d});
  auto o = out.mutable_data();
  auto src = table.data();
  for (std::size_t r = 0; r < t; ++r) std::copy_n(src.data() + indices[r] * d, d, o.data() + r * d);
  if (autodiff::should_track({&table})) {
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    autodiff::record({table}, out, [table, out, d, frozen_row, idx = std::move(idx)]() mutable {
      auto g = out.grad();
      auto gt = table.mutable_grad();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        if (frozen_row && idx[r] == *frozen_row) continue;
        double* dst = gt.data() + idx[r] * d;
        const double* srcg = g.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += srcg[j];
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank2(x, "slice_rows");
  if (begin > end || end > x.dim(0)) {
    throw IndexError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t d = x.dim(1);
  Tensor out({end - begin, d});
  std::copy_n(x.data().data() + begin * d, (end - begin) * d, out.mutable_data().data());
  if (autodiff::should_track({&x})) {
    autodiff::record({x}, out, [x, out, begin, d]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[begin * d + i] += g[i];
    });
  }
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  require_rank2(a, "concat_rows");
  require_rank2(b, "concat_rows");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("concat_rows: column mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor out({a.dim(0) + b.dim(0), a.dim(1)});
  auto o = out.mutable_data();
  std::copy(a.data().begin(), a.data().end(), o.begin());
  std::copy(b.data().begin(), b.data().end(), o.begin() + static_cast<std::ptrdiff_t>(a.numel()));
  if (autodiff::should_track({&a, &b})) {
    autodiff::record({a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      const std::size_t na = a.numel();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (autodiff::should_track({&x})) {
    autodiff::record({x}, out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor l2_normalize_rows(const Tensor& x) {
  require_rank2(x, "l2_normalize_rows");
  const std::size_t m = x.dim(0), d = x.dim(1);
  Tensor out(x.shape());
  std::vector<double> norms(m);
  auto xd = x.data();
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xd[i * d + j] * xd[i * d + j];
    norms[i] = std::sqrt(s);
    if (norms[i] == 0.0) throw DegenerateInputError("l2_normalize_rows: row " + std::to_string(i) + " is zero");
    for (std::size_t j = 0; j < d; ++j) o[i * d + j] = xd[i * d + j] / norms[i];
  }
  if (autodiff::should_track({&x})) {
    autodiff::record({x}, out, [x, out, m, d, norms = std::move(norms)]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += y[i * d + j] * g[i * d + j];
        for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += (g[i * d + j] - y[i * d + j] * dot) / norms[i];
      }
    });
  }
  return out;
}

Tensor cross_entropy_from_logits(const Tensor& logits, std::span<const std::size_t> targets) {
  require_rank2(logits, "cross_entropy_from_logits");
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  if (targets.size() != m) {
    throw DimensionError("cross_entropy_from_logits: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(m) + " rows");
  }
  for (std::size_t t : targets) {
    if (t >= n) {
      throw IndexError("cross_entropy_from_logits: target " + std::to_string(t) + " out of range for " +
                       std::to_string(n) + " classes");
    }
  }
  auto xd = logits.data();
  std::vector<double> probs(m * n);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xd.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      probs[i * n + j] = std::exp(row[j] - mx);
      s += probs[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] /= s;
    total += (mx + std::log(s)) - row[targets[i]];
  }
  Tensor out = Tensor::scalar(m ? total / static_cast<double>(m) : 0.0);
  if (autodiff::should_track({&logits})) {
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    autodiff::record({logits}, out, [logits, out, m, n, probs = std::move(probs), tg = std::move(tg)]() mutable {
      const double g = out.grad()[0] / static_cast<double>(m);
      auto gl = logits.mutable_grad();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gl[i * n + j] += g * probs[i * n + j];
        gl[i * n + tg[i]] -= g;
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (autodiff::should_track({&x})) {
    autodiff::record({x}, out, [x, out]() mutable {
      const double g = out.grad()[0];
      for (double& gx : x.mutable_grad()) gx += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor weighted_sum(const Tensor& x, std::span<const double> weights) {
  if (weights.size() != x.numel()) {
    throw DimensionError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                         shape_str(x.shape()));
  }
  double s = 0.0;
  auto xd = x.data();
  for (std::size_t i = 0; i < weights.size(); ++i) s += xd[i] * weights[i];
  Tensor out = Tensor::scalar(s);
  if (autodiff::should_track({&x})) {
    std::vector<double> w(weights.begin(), weights.end());
    autodiff::record({x}, out, [x, out, w = std::move(w)]() mutable {
      const double g = out.grad()[0];
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < w.size(); ++i) gx[i] += g * w[i];
    });
  }
  return out;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionShape& shape,
                        std::span<const unsigned char> key_valid, double rate, RngStream* stream,
                        bool last_query_only) {
  require_rank2(q, "causal_attention");
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  const std::size_t B = shape.batch, N = shape.seq_len, H = shape.heads;
  const std::size_t d = q.dim(1);
  if (q.dim(0) != B * N) {
    throw DimensionError("causal_attention: " + shape_str(q.shape()) + " is not batch*seq_len rows");
  }
  if (H == 0 || d % H != 0) {
    throw DimensionError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(H) + " heads");
  }
  if (key_valid.size() != B * N) throw DimensionError("causal_attention: key mask size mismatch");
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("causal_attention: dropout rate must lie in [0, 1)");
  if (rate > 0.0 && stream == nullptr) throw ContractError("causal_attention: dropout needs a stream");

  const std::size_t dh = d / H;
  const std::size_t q_begin = last_query_only ? N - 1 : 0;
  const std::size_t nq = N - q_begin;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const double keep_scale = rate > 0.0 ? 1.0 / (1.0 - rate) : 1.0;

  // probs[((b*H + h)*nq + qi)*N + j]: softmax weights; mult: dropout factors.
  std::vector<double> probs(B * H * nq * N, 0.0);
  std::vector<double> mult(rate > 0.0 ? probs.size() : 0, 1.0);
  Tensor out({B * nq, d});
  auto qd = q.data();
  auto kd = k.data();
  auto vd = v.data();
  auto od = out.mutable_data();

  std::vector<double> scores(N);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t qi = 0; qi < nq; ++qi) {
        const std::size_t i = q_begin + qi;
        double* p = probs.data() + ((b * H + h) * nq + qi) * N;
        const double* qrow = qd.data() + (b * N + i) * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j <= i; ++j) {
          if (!key_valid[b * N + j]) continue;
          const double* krow = kd.data() + (b * N + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qrow[c] * krow[c];
          scores[j] = s * inv_scale;
          mx = std::max(mx, scores[j]);
          any = true;
        }
        if (rate > 0.0) {
          double* mrow = mult.data() + ((b * H + h) * nq + qi) * N;
          for (std::size_t j = 0; j < N; ++j) mrow[j] = stream->next_uniform() < rate ? 0.0 : keep_scale;
        }
        if (!any) continue;
        double total = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          if (!key_valid[b * N + j]) continue;
          p[j] = std::exp(scores[j] - mx);
          total += p[j];
        }
        for (std::size_t j = 0; j <= i; ++j) p[j] /= total;
        const double* mrow = rate > 0.0 ? mult.data() + ((b * H + h) * nq + qi) * N : nullptr;
        double* orow = od.data() + (b * nq + qi) * d + h * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          if (p[j] == 0.0) continue;
          const double w = mrow ? p[j] * mrow[j] : p[j];
          if (w == 0.0) continue;
          const double* vrow = vd.data() + (b * N + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) orow[c] += w * vrow[c];
        }
      }
    }
  }

  if (autodiff::should_track({&q, &k, &v})) {
    autodiff::record(
        {q, k, v}, out,
        [q, k, v, out, B, N, H, d, dh, q_begin, nq, inv_scale, probs = std::move(probs),
         mult = std::move(mult)]() mutable {
          auto g = out.grad();
          auto qd2 = q.data();
          auto kd2 = k.data();
          auto vd2 = v.data();
          std::vector<double> gq(q.numel(), 0.0), gk(k.numel(), 0.0), gv(v.numel(), 0.0);
          std::vector<double> dp(N);
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t h = 0; h < H; ++h) {
              for (std::size_t qi = 0; qi < nq; ++qi) {
                const std::size_t i = q_begin + qi;
                const double* p = probs.data() + ((b * H + h) * nq + qi) * N;
                const double* mrow = mult.empty() ? nullptr : mult.data() + ((b * H + h) * nq + qi) * N;
                const double* grow = g.data() + (b * nq + qi) * d + h * dh;
                double weighted = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                  dp[j] = 0.0;
                  if (p[j] == 0.0) continue;
                  const double m = mrow ? mrow[j] : 1.0;
                  const double* vrow = vd2.data() + (b * N + j) * d + h * dh;
                  double* gvrow = gv.data() + (b * N + j) * d + h * dh;
                  double s = 0.0;
                  const double w = p[j] * m;
                  for (std::size_t c = 0; c < dh; ++c) {
                    s += grow[c] * vrow[c];
                    gvrow[c] += w * grow[c];
                  }
                  dp[j] = s * m;
                  weighted += p[j] * dp[j];
                }
                const double* qrow = qd2.data() + (b * N + i) * d + h * dh;
                double* gqrow = gq.data() + (b * N + i) * d + h * dh;
                for (std::size_t j = 0; j <= i; ++j) {
                  if (p[j] == 0.0) continue;
                  const double ds = p[j] * (dp[j] - weighted) * inv_scale;
                  const double* krow = kd2.data() + (b * N + j) * d + h * dh;
                  double* gkrow = gk.data() + (b * N + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) {
                    gqrow[c] += ds * krow[c];
                    gkrow[c] += ds * qrow[c];
                  }
                }
              }
            }
          }
          auto acc = [](const Tensor& t, const std::vector<double>& src) {
            if (!t.requires_grad()) return;
            auto dst = t.mutable_grad();
            for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
          };
          acc(q, gq);
          acc(k, gk);
          acc(v, gv);
        });
  }
  return out;
}

}  // namespace duorec
