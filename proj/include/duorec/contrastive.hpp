// SPDX-License-Identifier: Apache-2.0
//
// In-batch contrastive regularizer over interleaved positive pairs, and the
// combined training objective.

#pragma once

#include <string_view>

#include "duorec/data.hpp"
#include "duorec/encoder.hpp"
#include "duorec/tensor.hpp"

namespace duorec {

struct ContrastiveBatch {
  /// [2B x d], rows 2i and 2i+1 form pair i.
  Tensor reps;
  NegativeMask mask;
  double tau = 1.0;
};

/// Interleaves [left_0, right_0, left_1, right_1, ...]. tau <= 0 is a
/// ConfigError.
ContrastiveBatch assemble(const Tensor& left, const Tensor& right, NegativeMask mask, double tau);

/// Per-slot terms -log(e^{s_ap} / (e^{s_ap} + sum_{j admitted} e^{s_aj})),
/// s = <r_a, r_j> / tau, p = a xor 1. Shape [2B].
Tensor nce_slot_terms(const Tensor& reps, const NegativeMask& mask, double tau);

/// (1/B) * sum of both directional terms of every pair. With `normalize`
/// the representations are L2-normalized first.
Tensor nce_regularizer(const ContrastiveBatch& cb, bool normalize = false);

struct LossBundle {
  Tensor rec;
  Tensor reg;
  Tensor total;
  double lambda = 0.0;
};

/// total = rec + lambda * reg. Negative lambda is a ConfigError.
LossBundle combined_loss(const Tensor& rec, const Tensor& reg, double lambda);

enum class PositiveMode { unsupervised, supervised, duo };

PositiveMode parse_positive_mode(std::string_view name);
std::string_view positive_mode_name(PositiveMode mode);

/// Representations consumed by one training step.
struct StepViews {
  Tensor rec;    // anchor for the recommendation loss (stream A)
  Tensor left;   // first member of each positive pair
  Tensor right;  // second member
};

/// unsupervised: (item_ids under B, item_ids under C)
/// supervised:   (the anchor itself, positive_ids under C)
/// duo:          (item_ids under B, positive_ids under C)
StepViews positive_views(PositiveMode mode, const Batch& batch, const EncoderParams& params,
                         const EncoderConfig& config, const RngStream& base, const TwinLabels& labels = {});

}  // namespace duorec
