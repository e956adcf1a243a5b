// SPDX-License-Identifier: Apache-2.0
#include "duorec/encoder.hpp"

#include <cmath>

#include "duorec/errors.hpp"
#include "duorec/ops.hpp"

namespace duorec {

void EncoderConfig::validate() const {
  if (num_items < 2) throw ConfigError("encoder: num_items must be >= 2 (pad plus one item)");
  if (d == 0 || heads == 0 || d % heads != 0) {
    throw ConfigError("encoder: d=" + std::to_string(d) + " must be a positive multiple of heads=" +
                      std::to_string(heads));
  }
  if (max_len == 0) throw ConfigError("encoder: max_len must be positive");
  if (!(emb_dropout >= 0.0 && emb_dropout < 1.0) || !(hidden_dropout >= 0.0 && hidden_dropout < 1.0)) {
    throw ConfigError("encoder: dropout rates must lie in [0, 1)");
  }
  if (!(ln_eps > 0.0)) throw ConfigError("encoder: ln_eps must be positive");
}

std::vector<std::pair<std::string, Tensor>> EncoderParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out{{"item_emb", item_emb}, {"pos_emb", pos_emb}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const EncoderLayer& L = layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    out.insert(out.end(), {{p + "wq", L.wq},
                           {p + "wk", L.wk},
                           {p + "wv", L.wv},
                           {p + "wo", L.wo},
                           {p + "ln1_gain", L.ln1_gain},
                           {p + "ln1_bias", L.ln1_bias},
                           {p + "w1", L.w1},
                           {p + "b1", L.b1},
                           {p + "w2", L.w2},
                           {p + "b2", L.b2},
                           {p + "ln2_gain", L.ln2_gain},
                           {p + "ln2_bias", L.ln2_bias}});
  }
  return out;
}

void EncoderParams::zero_grad() {
  for (auto& [name, t] : named()) t.zero_grad();
}

namespace {

Tensor trunc_normal(Shape shape, double std, RngStream& rng) {
  Tensor t(std::move(shape), true);
  for (double& x : t.mutable_data()) {
    double z;
    do z = rng.next_normal();
    while (std::abs(z) > 2.0);
    x = z * std;
  }
  return t;
}

Tensor filled(Shape shape, double value) {
  Tensor t(std::move(shape), true);
  for (double& x : t.mutable_data()) x = value;
  return t;
}

}  // namespace

EncoderParams init_params(const EncoderConfig& c, RngStream rng) {
  c.validate();
  EncoderParams p;
  p.item_emb = trunc_normal({c.num_items, c.d}, c.init_std, rng);
  auto v = p.item_emb.mutable_data();
  std::fill(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(c.d), 0.0);
  p.pos_emb = trunc_normal({c.max_len, c.d}, c.init_std, rng);
  for (std::size_t l = 0; l < c.layers; ++l) {
    EncoderLayer L;
    L.wq = trunc_normal({c.d, c.d}, c.init_std, rng);
    L.wk = trunc_normal({c.d, c.d}, c.init_std, rng);
    L.wv = trunc_normal({c.d, c.d}, c.init_std, rng);
    L.wo = trunc_normal({c.d, c.d}, c.init_std, rng);
    L.ln1_gain = filled({c.d}, 1.0);
    L.ln1_bias = filled({c.d}, 0.0);
    L.w1 = trunc_normal({c.d, 4 * c.d}, c.init_std, rng);
    L.b1 = filled({4 * c.d}, 0.0);
    L.w2 = trunc_normal({4 * c.d, c.d}, c.init_std, rng);
    L.b2 = filled({c.d}, 0.0);
    L.ln2_gain = filled({c.d}, 1.0);
    L.ln2_bias = filled({c.d}, 0.0);
    p.layers.push_back(std::move(L));
  }
  return p;
}

Tensor embed(const IdMatrix& ids, const EncoderParams& params, const EncoderConfig& config,
             RngStream& stream, Mode mode) {
  if (ids.cols != params.pos_emb.dim(0)) {
    throw DimensionError("embed: input width " + std::to_string(ids.cols) + " != positional rows " +
                         std::to_string(params.pos_emb.dim(0)));
  }
  std::vector<std::size_t> positions(ids.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i % ids.cols;
  Tensor items = gather_rows(params.item_emb, ids.ids, kPadIndex);
  Tensor pos = gather_rows(params.pos_emb, positions);
  Tensor h0 = add(items, pos);
  if (mode == Mode::train) h0 = dropout(h0, config.emb_dropout, stream);
  return h0;
}

EncodedBatch encode(const Tensor& h0, const IdMatrix& ids, const EncoderParams& params,
                    const EncoderConfig& config, RngStream& stream, const EncodeOptions& options) {
  const std::size_t B = ids.rows, N = ids.cols;
  if (h0.rank() != 2 || h0.dim(0) != B * N || h0.dim(1) != config.d) {
    throw DimensionError("encode: h0 shape " + shape_str(h0.shape()) + " does not match batch " +
                         std::to_string(B) + "x" + std::to_string(N) + " and d=" + std::to_string(config.d));
  }
  std::vector<unsigned char> key_valid(ids.ids.size());
  for (std::size_t i = 0; i < key_valid.size(); ++i) key_valid[i] = ids.ids[i] != kPadIndex;
  std::vector<std::size_t> last(B);
  for (std::size_t b = 0; b < B; ++b) last[b] = b * N + N - 1;

  const bool train = options.mode == Mode::train;
  const double rate = train ? config.hidden_dropout : 0.0;
  const AttentionShape shape{B, N, config.heads};

  Tensor x = h0;
  bool collapsed = false;  // x holds only the last column
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const EncoderLayer& L = params.layers[l];
    const bool last_only = !options.keep_all_positions && l + 1 == params.layers.size();
    // Full-layout q keeps the kernel indexing simple; only the last query
    // row is read when last_only is set.
    Tensor q = matmul(x, L.wq);
    Tensor k = matmul(x, L.wk);
    Tensor v = matmul(x, L.wv);
    Tensor attn = causal_attention(q, k, v, shape, key_valid, rate, &stream, last_only);
    Tensor residual = last_only ? gather_rows(x, last) : x;
    x = layer_norm(add(residual, matmul(attn, L.wo)), L.ln1_gain, L.ln1_bias, config.ln_eps);
    Tensor f = gelu(add_row_bias(matmul(x, L.w1), L.b1));
    f = add_row_bias(matmul(f, L.w2), L.b2);
    if (train) f = dropout(f, rate, stream);
    x = layer_norm(add(x, f), L.ln2_gain, L.ln2_bias, config.ln_eps);
    collapsed = last_only;
  }
  EncodedBatch out;
  if (collapsed) {
    out.h = x;
  } else {
    out.h = gather_rows(x, last);
    if (options.keep_all_positions) out.all_positions = x;
  }
  return out;
}

EncodedBatch encode_ids(const IdMatrix& ids, const EncoderParams& params, const EncoderConfig& config,
                        RngStream stream, const EncodeOptions& options) {
  Tensor h0 = embed(ids, params, config, stream, options.mode);
  return encode(h0, ids, params, config, stream, options);
}

Twins encode_twins(const Batch& batch, const EncoderParams& params, const EncoderConfig& config,
                   const RngStream& base, const TwinLabels& labels) {
  const EncodeOptions opts{Mode::train, false};
  Twins t;
  t.h = encode_ids(batch.item_ids, params, config, base.child(labels.anchor), opts).h;
  t.h_prime = encode_ids(batch.item_ids, params, config, base.child(labels.twin), opts).h;
  t.h_prime_s = encode_ids(batch.positive_ids, params, config, base.child(labels.partner), opts).h;
  return t;
}

Tensor score_items(const Tensor& h, const EncoderParams& params) {
  return matmul_nt(h, slice_rows(params.item_emb, 1, params.item_emb.dim(0)));
}

Tensor recommendation_loss(const Tensor& h, std::span<const ItemId> targets, const EncoderParams& params) {
  std::vector<std::size_t> shifted(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == kPadIndex || targets[i] >= params.item_emb.dim(0)) {
      throw IndexError("recommendation_loss: target " + std::to_string(targets[i]) + " is not a catalogue item");
    }
    shifted[i] = targets[i] - 1;
  }
  return cross_entropy_from_logits(score_items(h, params), shifted);
}

}  // namespace duorec
