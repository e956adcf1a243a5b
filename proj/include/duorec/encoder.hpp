// SPDX-License-Identifier: Apache-2.0
//
// Causal Transformer sequence encoder over left-padded item-id matrices.

#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "duorec/data.hpp"
#include "duorec/rng.hpp"
#include "duorec/tensor.hpp"

namespace duorec {

struct EncoderConfig {
  /// Vocabulary size including the pad row.
  std::size_t num_items = 0;
  std::size_t d = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  /// Input width N; also the number of positional rows.
  std::size_t max_len = 50;
  double emb_dropout = 0.1;
  double hidden_dropout = 0.1;
  double ln_eps = 1e-12;
  double init_std = 0.02;

  /// Throws ConfigError on inconsistent values.
  void validate() const;
};

struct EncoderLayer {
  Tensor wq, wk, wv, wo;
  Tensor ln1_gain, ln1_bias;
  Tensor w1, b1, w2, b2;
  Tensor ln2_gain, ln2_bias;
};

struct EncoderParams {
  Tensor item_emb;  // [num_items x d], row 0 is the pad
  Tensor pos_emb;   // [max_len x d]
  std::vector<EncoderLayer> layers;

  /// Every trainable tensor with a stable name, in checkpoint order.
  std::vector<std::pair<std::string, Tensor>> named() const;
  void zero_grad();
};

/// Truncated normal (resampled beyond two std) weights, zero biases, unit
/// layer-norm gains, pad row zero.
EncoderParams init_params(const EncoderConfig& config, RngStream stream);

enum class Mode { train, eval };

struct EncodedBatch {
  /// [B x d] representation at the last column.
  Tensor h;
  /// [B*N x d] outputs for every position, row b*N+t. Only filled when
  /// requested; the last layer otherwise computes the final column only.
  Tensor all_positions;
};

struct EncodeOptions {
  Mode mode = Mode::eval;
  bool keep_all_positions = false;
};

/// V[id] + P[t] for each cell of `ids` (shape [B*N x d]) followed by
/// embedding dropout in train mode.
Tensor embed(const IdMatrix& ids, const EncoderParams& params, const EncoderConfig& config,
             RngStream& stream, Mode mode);

/// Stack of causal self-attention and feed-forward blocks, each followed by
/// residual add and layer norm. Keys at pad cells of `ids` are masked.
EncodedBatch encode(const Tensor& h0, const IdMatrix& ids, const EncoderParams& params,
                    const EncoderConfig& config, RngStream& stream, const EncodeOptions& options);

/// embed + encode under one stream.
EncodedBatch encode_ids(const IdMatrix& ids, const EncoderParams& params, const EncoderConfig& config,
                        RngStream stream, const EncodeOptions& options);

/// Stream labels for the three forward passes of one training step.
struct TwinLabels {
  std::string anchor = "A";
  std::string twin = "B";
  std::string partner = "C";
};

struct Twins {
  Tensor h;          // item_ids under stream A
  Tensor h_prime;    // item_ids under stream B
  Tensor h_prime_s;  // positive_ids under stream C
};

/// Three train-mode forwards sharing weights with independent dropout masks.
Twins encode_twins(const Batch& batch, const EncoderParams& params, const EncoderConfig& config,
                   const RngStream& base, const TwinLabels& labels = {});

/// h . V[1:]^T. Column c scores item c+1; the pad is never a candidate.
Tensor score_items(const Tensor& h, const EncoderParams& params);

/// Cross-entropy of next-item prediction over the full catalogue.
Tensor recommendation_loss(const Tensor& h, std::span<const ItemId> targets, const EncoderParams& params);

}  // namespace duorec
