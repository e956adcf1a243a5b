// SPDX-License-Identifier: Apache-2.0
#include "duorec/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "duorec/errors.hpp"
#include "duorec/ops.hpp"

namespace duorec {

std::size_t rank_in_scores(std::span<const double> scores, std::size_t target_col) {
  if (target_col >= scores.size()) {
    throw IndexError("rank_in_scores: target column " + std::to_string(target_col) + " of " +
                     std::to_string(scores.size()));
  }
  const double t = scores[target_col];
  std::size_t rank = 1;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] > t || (scores[j] == t && j < target_col)) ++rank;
  }
  return rank;
}

std::vector<std::size_t> rank_full_catalog(const Tensor& h, const Tensor& item_emb,
                                           std::span<const ItemId> targets) {
  if (h.rank() != 2 || h.dim(0) != targets.size()) {
    throw DimensionError("rank_full_catalog: " + shape_str(h.shape()) + " for " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t items = item_emb.dim(0) - 1;
  std::vector<std::size_t> ranks(targets.size());
  // Chunked so the score buffer stays small for large catalogues.
  const std::size_t chunk = 256;
  Tensor candidates = slice_rows(item_emb.detach(), 1, item_emb.dim(0));
  for (std::size_t begin = 0; begin < targets.size(); begin += chunk) {
    const std::size_t end = std::min(targets.size(), begin + chunk);
    Tensor scores = matmul_nt(slice_rows(h.detach(), begin, end), candidates);
    for (std::size_t b = begin; b < end; ++b) {
      const ItemId t = targets[b];
      if (t == kPadIndex || t > items) {
        throw IndexError("rank_full_catalog: target " + std::to_string(t) + " is not a catalogue item");
      }
      ranks[b] = rank_in_scores(scores.data().subspan((b - begin) * items, items), t - 1);
    }
  }
  return ranks;
}

double hr_at_k(std::span<const std::size_t> ranks, std::size_t k) {
  if (k == 0) throw ContractError("hr_at_k: K must be >= 1");
  if (ranks.empty()) return 0.0;
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r <= k; });
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

double ndcg_at_k(std::span<const std::size_t> ranks, std::size_t k) {
  if (k == 0) throw ContractError("ndcg_at_k: K must be >= 1");
  if (ranks.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t r : ranks)
    if (r <= k) total += 1.0 / std::log2(static_cast<double>(r) + 1.0);
  return total / static_cast<double>(ranks.size());
}

EvalReport make_report(std::span<const std::size_t> ranks, std::span<const std::size_t> ks) {
  EvalReport rep;
  rep.n_users = ranks.size();
  for (std::size_t k : ks) {
    rep.hr[k] = hr_at_k(ranks, k);
    rep.ndcg[k] = ndcg_at_k(ranks, k);
  }
  return rep;
}

namespace {

std::vector<double> normalized_rows(const Tensor& x, const char* who) {
  if (x.rank() != 2) throw DimensionError(std::string(who) + ": expected a matrix, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (std::size_t c = 0; c < d; ++c) norm += out[i * d + c] * out[i * d + c];
    norm = std::sqrt(norm);
    if (norm == 0.0) throw DegenerateInputError(std::string(who) + ": row " + std::to_string(i) + " is zero");
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] /= norm;
  }
  return out;
}

}  // namespace

double alignment(const Tensor& x, const Tensor& y) {
  if (x.shape() != y.shape()) {
    throw DimensionError("alignment: " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  }
  const auto a = normalized_rows(x, "alignment");
  const auto b = normalized_rows(y, "alignment");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (n == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < n * d; ++i) total += (a[i] - b[i]) * (a[i] - b[i]);
  return total / static_cast<double>(n);
}

double uniformity(const Tensor& reps) {
  if (reps.rank() != 2 || reps.dim(0) < 2) {
    throw ContractError("uniformity: needs at least two representations, got " + shape_str(reps.shape()));
  }
  const auto u = normalized_rows(reps, "uniformity");
  const std::size_t n = reps.dim(0), d = reps.dim(1);
  // On the unit sphere ||x - y||^2 = 2 - 2 <x, y>; accumulate with a
  // running max so tiny terms are not lost.
  std::vector<double> logs;
  logs.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double sq = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = u[i * d + c] - u[j * d + c];
        sq += diff * diff;
      }
      logs.push_back(-2.0 * sq);
    }
  }
  const double mx = *std::max_element(logs.begin(), logs.end());
  double s = 0.0;
  for (double l : logs) s += std::exp(l - mx);
  return mx + std::log(s / static_cast<double>(logs.size()));
}

SymmetricEigen jacobi_eigen(std::vector<double> a, std::size_t n, double tol, int max_sweeps) {
  if (a.size() != n * n) throw DimensionError("jacobi_eigen: buffer is not n x n");
  SymmetricEigen out;
  out.vectors.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) out.vectors[i * n + i] = 1.0;
  auto A = [&](std::size_t i, std::size_t j) -> double& { return a[i * n + j]; };
  for (; out.sweeps < max_sweeps; ++out.sweeps) {
    double scale = 1.0, off = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      scale = std::max(scale, std::abs(A(i, i)));
      for (std::size_t j = i + 1; j < n; ++j) off = std::max(off, std::abs(A(i, j)));
    }
    if (off < tol * scale) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = A(p, q);
        if (apq == 0.0) continue;
        // Rotation angle from the stable tangent formula.
        const double theta = (A(q, q) - A(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = A(k, p), akq = A(k, q);
          A(k, p) = c * akp - s * akq;
          A(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = A(p, k), aqk = A(q, k);
          A(p, k) = c * apk - s * aqk;
          A(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          double* v = out.vectors.data() + k * n;
          const double vkp = v[p], vkq = v[q];
          v[p] = c * vkp - s * vkq;
          v[q] = s * vkp + c * vkq;
        }
      }
    }
  }
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.values[i] = A(i, i);
  return out;
}

namespace {

// Non-pad rows, optionally centred, as a row-major copy.
std::vector<double> prepared_rows(const Tensor& item_emb, bool center, std::size_t& rows, std::size_t& d) {
  if (item_emb.rank() != 2 || item_emb.dim(0) < 2) {
    throw DimensionError("spectrum: item table " + shape_str(item_emb.shape()) + " has no non-pad rows");
  }
  rows = item_emb.dim(0) - 1;
  d = item_emb.dim(1);
  std::vector<double> x(item_emb.data().begin() + static_cast<std::ptrdiff_t>(d), item_emb.data().end());
  if (center) {
    for (std::size_t c = 0; c < d; ++c) {
      double m = 0.0;
      for (std::size_t i = 0; i < rows; ++i) m += x[i * d + c];
      m /= static_cast<double>(rows);
      for (std::size_t i = 0; i < rows; ++i) x[i * d + c] -= m;
    }
  }
  return x;
}

}  // namespace

SpectrumResult singular_spectrum(const Tensor& item_emb, bool center) {
  std::size_t rows = 0, d = 0;
  const auto x = prepared_rows(item_emb, center, rows, d);
  std::vector<double> gram(d * d, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = a; b < d; ++b) gram[a * d + b] += x[i * d + a] * x[i * d + b];
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < a; ++b) gram[a * d + b] = gram[b * d + a];
  double frob = 0.0;
  for (double v : x) frob += v * v;

  SymmetricEigen eig = jacobi_eigen(gram, d);
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return eig.values[a] > eig.values[b]; });
  const std::size_t k = std::min(rows, d);
  SpectrumResult out;
  out.d = d;
  for (std::size_t i = 0; i < k; ++i) out.singular.push_back(std::sqrt(std::max(0.0, eig.values[order[i]])));
  if (frob == 0.0 || out.singular[0] <= 1e-12 * std::sqrt(frob)) {
    throw DegenerateInputError("singular_spectrum: embedding matrix has rank 0");
  }
  for (double s : out.singular) out.normalized.push_back(s / out.singular[0]);
  out.right_vectors.resize(d * k);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t i = 0; i < k; ++i) out.right_vectors[r * k + i] = eig.vectors[r * d + order[i]];
  return out;
}

double spectrum_tail_mass(std::span<const double> normalized) {
  double s = 0.0;
  for (std::size_t i = 1; i < normalized.size(); ++i) s += normalized[i];
  return s;
}

std::vector<ProjectedItem> project_2d(const Tensor& item_emb, std::span<const std::int64_t> frequency,
                                      bool center) {
  SpectrumResult spec = singular_spectrum(item_emb, center);
  std::size_t rows = 0, d = 0;
  const auto x = prepared_rows(item_emb, center, rows, d);
  const std::size_t k = spec.singular.size();
  std::vector<ProjectedItem> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    ProjectedItem& p = out[i];
    p.item = i + 1;
    p.frequency = i + 1 < frequency.size() ? frequency[i + 1] : 0;
    for (std::size_t c = 0; c < d; ++c) {
      p.x += x[i * d + c] * spec.right_vectors[c * k + 0];
      if (k > 1 && spec.normalized[1] > 0.0) p.y += x[i * d + c] * spec.right_vectors[c * k + 1];
    }
  }
  return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

std::vector<ProbeResult> gradient_degeneration_probe(const EncoderParams& params, const EncoderConfig& config,
                                                     const IdMatrix& inputs, std::span<const ItemId> targets,
                                                     std::span<const ItemId> probe_items) {
  for (ItemId p : probe_items) {
    if (p == kPadIndex || p >= params.item_emb.dim(0)) {
      throw ContractError("gradient_degeneration_probe: " + std::to_string(p) + " is not a catalogue item");
    }
    if (std::find(inputs.ids.begin(), inputs.ids.end(), p) != inputs.ids.end() ||
        std::find(targets.begin(), targets.end(), p) != targets.end()) {
      throw ContractError("gradient_degeneration_probe: item " + std::to_string(p) +
                          " appears in the batch inputs or targets");
    }
  }
  const std::size_t d = config.d, B = targets.size();
  // Work on a detached copy so the caller's gradient buffers stay intact;
  // only the item table is tracked.
  EncoderParams local = params;
  local.item_emb = params.item_emb.detach();
  local.item_emb.set_requires_grad(true);
  local.pos_emb = params.pos_emb.detach();
  for (EncoderLayer& L : local.layers) {
    for (Tensor* t : {&L.wq, &L.wk, &L.wv, &L.wo, &L.ln1_gain, &L.ln1_bias, &L.w1, &L.b1, &L.w2, &L.b2,
                      &L.ln2_gain, &L.ln2_bias})
      *t = t->detach();
  }
  Tensor h;
  {
    Tape tape;
    TapeScope scope(tape);
    h = encode_ids(inputs, local, config, RngStream(0, "probe"), {Mode::eval, false}).h;
    tape.backward(recommendation_loss(h, targets, local));
  }
  auto grad = local.item_emb.grad();

  Tensor probs = softmax_rows(score_items(h.detach(), params));
  std::vector<ProbeResult> out;
  for (ItemId p : probe_items) {
    ProbeResult r;
    r.item = p;
    r.analytic.assign(grad.begin() + static_cast<std::ptrdiff_t>(p * d),
                      grad.begin() + static_cast<std::ptrdiff_t>((p + 1) * d));
    r.predicted.assign(d, 0.0);
    for (std::size_t b = 0; b < B; ++b) {
      const double w = probs.at(b, p - 1) / static_cast<double>(B);
      for (std::size_t c = 0; c < d; ++c) r.predicted[c] += w * h.at(b, c);
    }
    r.cosine = cosine_similarity(r.analytic, r.predicted);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace duorec
