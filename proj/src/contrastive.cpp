// SPDX-License-Identifier: Apache-2.0
#include "duorec/contrastive.hpp"

#include <cmath>
#include <limits>

#include "duorec/errors.hpp"
#include "duorec/ops.hpp"

namespace duorec {

ContrastiveBatch assemble(const Tensor& left, const Tensor& right, NegativeMask mask, double tau) {
  if (!(tau > 0.0)) throw ConfigError("assemble: tau must be positive, got " + std::to_string(tau));
  if (left.shape() != right.shape() || left.rank() != 2) {
    throw DimensionError("assemble: pair shapes " + shape_str(left.shape()) + " and " +
                         shape_str(right.shape()) + " differ");
  }
  const std::size_t B = left.dim(0);
  if (mask.slots() != 2 * B) {
    throw DimensionError("assemble: mask has " + std::to_string(mask.slots()) + " slots for batch of " +
                         std::to_string(B));
  }
  std::vector<std::size_t> order(2 * B);
  for (std::size_t i = 0; i < B; ++i) {
    order[2 * i] = i;
    order[2 * i + 1] = B + i;
  }
  return ContrastiveBatch{gather_rows(concat_rows(left, right), order), std::move(mask), tau};
}

Tensor nce_slot_terms(const Tensor& reps, const NegativeMask& mask, double tau) {
  if (reps.rank() != 2 || reps.dim(0) % 2 != 0 || reps.dim(0) != mask.slots()) {
    throw DimensionError("nce_slot_terms: reps " + shape_str(reps.shape()) + " vs " +
                         std::to_string(mask.slots()) + " mask slots");
  }
  const std::size_t S = reps.dim(0), d = reps.dim(1);
  auto r = reps.data();
  // sim[a*S+j] = <r_a, r_j> / tau; prob holds the softmax over {p} u admitted.
  std::vector<double> prob(S * S, 0.0);
  Tensor out({S});
  auto o = out.mutable_data();
  std::vector<double> s(S);
  for (std::size_t a = 0; a < S; ++a) {
    const std::size_t p = a ^ 1u;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < S; ++j) {
      if (j != p && !mask.admits(a, j)) continue;
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += r[a * d + c] * r[j * d + c];
      s[j] = dot / tau;
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < S; ++j) {
      if (j != p && !mask.admits(a, j)) continue;
      prob[a * S + j] = std::exp(s[j] - mx);
      z += prob[a * S + j];
    }
    for (std::size_t j = 0; j < S; ++j) prob[a * S + j] /= z;
    o[a] = mx + std::log(z) - s[p];
  }
  if (autodiff::should_track({&reps})) {
    autodiff::record({reps}, out, [reps, out, prob = std::move(prob), S, d, tau]() {
      auto go = out.grad();
      auto r = reps.data();
      auto gr = reps.mutable_grad();
      for (std::size_t a = 0; a < S; ++a) {
        if (go[a] == 0.0) continue;
        const std::size_t p = a ^ 1u;
        for (std::size_t j = 0; j < S; ++j) {
          double g = prob[a * S + j] - (j == p ? 1.0 : 0.0);
          if (g == 0.0) continue;
          g *= go[a] / tau;
          for (std::size_t c = 0; c < d; ++c) {
            gr[a * d + c] += g * r[j * d + c];
            gr[j * d + c] += g * r[a * d + c];
          }
        }
      }
    });
  }
  return out;
}

Tensor nce_regularizer(const ContrastiveBatch& cb, bool normalize) {
  Tensor reps = normalize ? l2_normalize_rows(cb.reps) : cb.reps;
  const double B = static_cast<double>(reps.dim(0) / 2);
  return scale(sum(nce_slot_terms(reps, cb.mask, cb.tau)), 1.0 / B);
}

LossBundle combined_loss(const Tensor& rec, const Tensor& reg, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("combined_loss: lambda must be >= 0, got " + std::to_string(lambda));
  return LossBundle{rec, reg, add(rec, scale(reg, lambda)), lambda};
}

PositiveMode parse_positive_mode(std::string_view name) {
  if (name == "unsupervised") return PositiveMode::unsupervised;
  if (name == "supervised") return PositiveMode::supervised;
  if (name == "duo") return PositiveMode::duo;
  throw ConfigError("unknown positive_mode '" + std::string(name) + "' (expected unsupervised, supervised or duo)");
}

std::string_view positive_mode_name(PositiveMode mode) {
  switch (mode) {
    case PositiveMode::unsupervised: return "unsupervised";
    case PositiveMode::supervised: return "supervised";
    case PositiveMode::duo: return "duo";
  }
  return "duo";
}

StepViews positive_views(PositiveMode mode, const Batch& batch, const EncoderParams& params,
                         const EncoderConfig& config, const RngStream& base, const TwinLabels& labels) {
  const EncodeOptions opts{Mode::train, false};
  StepViews v;
  if (mode == PositiveMode::duo) {
    Twins t = encode_twins(batch, params, config, base, labels);
    return StepViews{t.h, t.h_prime, t.h_prime_s};
  }
  v.rec = encode_ids(batch.item_ids, params, config, base.child(labels.anchor), opts).h;
  switch (mode) {
    case PositiveMode::unsupervised:
      v.left = encode_ids(batch.item_ids, params, config, base.child(labels.twin), opts).h;
      v.right = encode_ids(batch.item_ids, params, config, base.child(labels.partner), opts).h;
      break;
    case PositiveMode::supervised:
      v.left = v.rec;
      v.right = encode_ids(batch.positive_ids, params, config, base.child(labels.partner), opts).h;
      break;
    case PositiveMode::duo:
      break;
  }
  return v;
}

}  // namespace duorec
