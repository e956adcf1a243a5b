// SPDX-License-Identifier: Apache-2.0
//
// Full-catalogue ranking metrics and embedding-geometry diagnostics.

#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "duorec/data.hpp"
#include "duorec/encoder.hpp"
#include "duorec/tensor.hpp"

namespace duorec {

/// 1 + (#columns scoring strictly higher) + (#columns tying with a smaller
/// index). Deterministic for any score vector, including NaN-free ties.
std::size_t rank_in_scores(std::span<const double> scores, std::size_t target_col);

/// Ranks of each target item among all non-pad items, scores h . V[1:]^T.
std::vector<std::size_t> rank_full_catalog(const Tensor& h, const Tensor& item_emb,
                                           std::span<const ItemId> targets);

double hr_at_k(std::span<const std::size_t> ranks, std::size_t k);
double ndcg_at_k(std::span<const std::size_t> ranks, std::size_t k);

struct EvalReport {
  std::map<std::size_t, double> hr;
  std::map<std::size_t, double> ndcg;
  std::size_t n_users = 0;
};

EvalReport make_report(std::span<const std::size_t> ranks, std::span<const std::size_t> ks);

/// Mean squared distance between L2-normalized row pairs of x and y.
double alignment(const Tensor& x, const Tensor& y);
/// log mean over unordered pairs i<j of exp(-2 ||x_i - x_j||^2) on
/// L2-normalized rows. Needs at least two rows.
double uniformity(const Tensor& reps);

struct SymmetricEigen {
  std::vector<double> values;   // unsorted, one per column of vectors
  std::vector<double> vectors;  // n x n row-major; column k is eigenvector k
  int sweeps = 0;
};

/// Cyclic Jacobi rotations on a symmetric n x n matrix. Stops when every
/// off-diagonal magnitude is below tol * max(1, max |a_ii|).
SymmetricEigen jacobi_eigen(std::vector<double> a, std::size_t n, double tol = 1e-12, int max_sweeps = 100);

struct SpectrumResult {
  /// Descending singular values divided by the largest.
  std::vector<double> normalized;
  /// Raw descending singular values.
  std::vector<double> singular;
  /// d x k row-major right singular vectors, column order matches `singular`.
  std::vector<double> right_vectors;
  std::size_t d = 0;
};

/// Spectrum of the item table with the pad row removed, mean-centred unless
/// `center` is false. All-zero (rank 0) input throws DegenerateInputError.
SpectrumResult singular_spectrum(const Tensor& item_emb, bool center = true);

/// Sum of normalized singular values after the first.
double spectrum_tail_mass(std::span<const double> normalized);

struct ProjectedItem {
  ItemId item = 0;
  double x = 0.0;
  double y = 0.0;
  std::int64_t frequency = 0;
};

/// Centred rows projected on the top two right singular vectors, so the
/// axes carry the singular-value scale. One entry per non-pad item.
std::vector<ProjectedItem> project_2d(const Tensor& item_emb, std::span<const std::int64_t> frequency,
                                      bool center = true);

struct EmbeddingDiagnostics {
  std::vector<double> singular_values;
  std::vector<ProjectedItem> projection_2d;
  double alignment = 0.0;
  double uniformity = 0.0;
};

struct ProbeResult {
  ItemId item = 0;
  std::vector<double> analytic;
  std::vector<double> predicted;
  double cosine = 0.0;
};

/// Gradient of the recommendation loss w.r.t. item rows that appear neither
/// in the inputs nor among the targets, next to its closed form
/// mean_b softmax(h_b)[item] * h_b. Runs the encoder in eval mode.
std::vector<ProbeResult> gradient_degeneration_probe(const EncoderParams& params, const EncoderConfig& config,
                                                     const IdMatrix& inputs, std::span<const ItemId> targets,
                                                     std::span<const ItemId> probe_items);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

}  // namespace duorec
