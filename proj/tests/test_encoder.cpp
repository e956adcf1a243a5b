// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "duorec/encoder.hpp"
#include "duorec/errors.hpp"
#include "duorec/ops.hpp"
#include "gradcheck.hpp"

namespace duorec {
namespace {

EncoderConfig small_config(std::size_t items = 12, std::size_t d = 8, std::size_t layers = 2, std::size_t n = 6) {
  EncoderConfig c;
  c.num_items = items;
  c.d = d;
  c.layers = layers;
  c.heads = 2;
  c.max_len = n;
  c.emb_dropout = 0.0;
  c.hidden_dropout = 0.0;
  return c;
}

// Larger init so that perturbations are visible well above rounding.
EncoderParams wide_params(const EncoderConfig& c, std::uint64_t seed) {
  EncoderConfig w = c;
  w.init_std = 0.5;
  return init_params(w, RngStream(seed, "init"));
}

IdMatrix ids_of(std::vector<std::vector<ItemId>> rows) {
  IdMatrix m;
  m.rows = rows.size();
  m.cols = rows.front().size();
  for (auto& r : rows) m.ids.insert(m.ids.end(), r.begin(), r.end());
  return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

TEST(Init, InvariantsHold) {
  EncoderConfig c = small_config();
  EncoderParams p = init_params(c, RngStream(1, "init"));
  for (std::size_t j = 0; j < c.d; ++j) EXPECT_EQ(p.item_emb.at(0, j), 0.0);
  for (double v : p.item_emb.data()) EXPECT_LE(std::abs(v), 2 * c.init_std);
  EXPECT_EQ(p.pos_emb.shape(), (Shape{c.max_len, c.d}));
  EXPECT_EQ(p.layers[0].w1.shape(), (Shape{c.d, 4 * c.d}));
  EXPECT_EQ(p.named().size(), 2u + 12u * c.layers);
  for (double v : p.layers[1].b1.data()) EXPECT_EQ(v, 0.0);
  for (double v : p.layers[1].ln2_gain.data()) EXPECT_EQ(v, 1.0);
}

TEST(Init, RejectsBadConfig) {
  EncoderConfig c = small_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.emb_dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Embed, SingleItemByHand) {
  EncoderConfig c = small_config();
  EncoderParams p = wide_params(c, 2);
  IdMatrix ids = ids_of({{0, 0, 0, 0, 0, 5}});
  RngStream s(3, "emb");
  Tensor h0 = embed(ids, p, c, s, Mode::train);
  const std::size_t N = c.max_len;
  for (std::size_t j = 0; j < c.d; ++j) {
    EXPECT_EQ(h0.at(N - 1, j), p.item_emb.at(5, j) + p.pos_emb.at(N - 1, j));
    for (std::size_t t = 0; t + 1 < N; ++t) EXPECT_EQ(h0.at(t, j), p.pos_emb.at(t, j));
  }
}

TEST(Embed, DropoutStreamsDetermineMasks) {
  EncoderConfig c = small_config();
  c.emb_dropout = 0.2;
  EncoderParams p = wide_params(c, 2);
  IdMatrix ids = ids_of({{1, 2, 3, 4, 5, 6}, {0, 0, 7, 8, 9, 10}});
  RngStream a(4, "x"), b(4, "y"), a2(4, "x");
  Tensor ha = embed(ids, p, c, a, Mode::train);
  Tensor hb = embed(ids, p, c, b, Mode::train);
  Tensor ha2 = embed(ids, p, c, a2, Mode::train);
  EXPECT_FALSE(bit_equal(ha, hb));
  EXPECT_TRUE(bit_equal(ha, ha2));
  RngStream e(4, "x");
  Tensor he = embed(ids, p, c, e, Mode::eval);
  EXPECT_EQ(e.counter(), 0u) << "eval mode draws nothing";
}

TEST(Embed, OutOfRangeId) {
  EncoderConfig c = small_config();
  EncoderParams p = wide_params(c, 2);
  RngStream s(1, "e");
  EXPECT_THROW(embed(ids_of({{0, 0, 0, 0, 0, 12}}), p, c, s, Mode::eval), IndexError);
}

TEST(Encode, CausalityPerturbationProbe) {
  EncoderConfig c = small_config();
  EncoderParams p = wide_params(c, 5);
  const std::vector<ItemId> base{1, 2, 3, 4, 5, 6};
  const EncodeOptions opts{Mode::eval, true};
  Tensor ref = encode_ids(ids_of({base}), p, c, RngStream(1, "e"), opts).all_positions;
  for (std::size_t j = 0; j < base.size(); ++j) {
    auto changed = base;
    changed[j] = 11;
    Tensor out = encode_ids(ids_of({changed}), p, c, RngStream(1, "e"), opts).all_positions;
    for (std::size_t i = 0; i < base.size(); ++i) {
      double diff = 0.0;
      for (std::size_t k = 0; k < c.d; ++k) diff = std::max(diff, std::abs(out.at(i, k) - ref.at(i, k)));
      if (i < j) EXPECT_EQ(diff, 0.0) << "position " << i << " saw future item " << j;
      else EXPECT_GT(diff, 1e-6) << "position " << i << " ignored item " << j;
    }
  }
}

TEST(Encode, ZeroLayersIsLastEmbedding) {
  EncoderConfig c = small_config(12, 8, 0);
  EncoderParams p = wide_params(c, 6);
  IdMatrix ids = ids_of({{0, 0, 1, 2, 3, 4}, {5, 6, 7, 8, 9, 10}});
  RngStream s(1, "e");
  Tensor h0 = embed(ids, p, c, s, Mode::eval);
  EncodedBatch out = encode(h0, ids, p, c, s, {Mode::eval, false});
  ASSERT_EQ(out.h.shape(), (Shape{2, 8}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(out.h.at(b, j), h0.at(b * 6 + 5, j));
}

TEST(Encode, EvalIsDeterministic) {
  EncoderConfig c = small_config();
  c.emb_dropout = c.hidden_dropout = 0.3;
  EncoderParams p = wide_params(c, 7);
  IdMatrix ids = ids_of({{0, 0, 1, 2, 3, 4}, {5, 6, 7, 8, 9, 10}});
  Tensor a = encode_ids(ids, p, c, RngStream(1, "a"), {Mode::eval, false}).h;
  Tensor b = encode_ids(ids, p, c, RngStream(2, "b"), {Mode::eval, false}).h;
  EXPECT_TRUE(bit_equal(a, b));
}

TEST(Encode, LastColumnMatchesFullLayout) {
  EncoderConfig c = small_config();
  EncoderParams p = wide_params(c, 8);
  IdMatrix ids = ids_of({{0, 0, 1, 2, 3, 4}, {5, 6, 7, 8, 9, 10}, {0, 0, 0, 0, 0, 3}});
  EncodedBatch full = encode_ids(ids, p, c, RngStream(1, "e"), {Mode::eval, true});
  EncodedBatch fast = encode_ids(ids, p, c, RngStream(1, "e"), {Mode::eval, false});
  EXPECT_FALSE(fast.all_positions.defined());
  ASSERT_EQ(full.all_positions.shape(), (Shape{18, 8}));
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(full.h.at(b, j), full.all_positions.at(b * 6 + 5, j));
  EXPECT_LT(max_abs_diff(full.h, fast.h), 1e-12);
}

TEST(Encode, PadPositionsAreNeutral) {
  EncoderConfig c = small_config();
  EncoderParams p = wide_params(c, 9);
  IdMatrix ids = ids_of({{0, 0, 0, 2, 3, 4}});
  Tensor ref = encode_ids(ids, p, c, RngStream(1, "e"), {Mode::eval, false}).h;
  auto pos = p.pos_emb.mutable_data();
  RngStream noise(2, "noise");
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t j = 0; j < c.d; ++j) pos[t * c.d + j] += noise.next_normal();
  Tensor moved = encode_ids(ids, p, c, RngStream(1, "e"), {Mode::eval, false}).h;
  EXPECT_TRUE(bit_equal(ref, moved));
}

// GEMM blocking can round a row differently depending on the row count, so
// this is equality up to rounding rather than bit equality.
TEST(Encode, RowsAreIndependentOfBatchmates) {
  EncoderConfig c = small_config();
  EncoderParams p = wide_params(c, 10);
  Tensor alone = encode_ids(ids_of({{0, 0, 1, 2, 3, 4}}), p, c, RngStream(1, "e"), {}).h;
  Tensor pair = encode_ids(ids_of({{5, 6, 7, 8, 9, 10}, {0, 0, 1, 2, 3, 4}}), p, c, RngStream(1, "e"), {}).h;
  for (std::size_t j = 0; j < c.d; ++j) EXPECT_NEAR(alone.at(0, j), pair.at(1, j), 1e-12);
}

Batch self_partner_batch() {
  Batch b;
  b.item_ids = ids_of({{0, 0, 1, 2, 3, 4}, {5, 6, 7, 8, 9, 10}});
  b.positive_ids = b.item_ids;
  b.targets = {5, 11};
  b.positive_targets = b.targets;
  b.lengths = {4, 6};
  b.example_ids = {0, 1};
  b.partner_ids = {0, 1};
  b.collision_mask = NegativeMask::from_targets(b.targets);
  return b;
}

TEST(Twins, ZeroRatesGiveIdenticalTwins) {
  EncoderConfig c = small_config();
  EncoderParams p = wide_params(c, 11);
  Twins t = encode_twins(self_partner_batch(), p, c, RngStream(3, "step"));
  EXPECT_TRUE(bit_equal(t.h, t.h_prime));
  EXPECT_TRUE(bit_equal(t.h, t.h_prime_s));
}

TEST(Twins, SelfPartnerDiffersOnlyByMask) {
  EncoderConfig c = small_config();
  c.emb_dropout = c.hidden_dropout = 0.2;
  EncoderParams p = wide_params(c, 12);
  Batch b = self_partner_batch();
  Twins t = encode_twins(b, p, c, RngStream(3, "step"));
  EXPECT_FALSE(bit_equal(t.h_prime, t.h_prime_s));
  EXPECT_FALSE(bit_equal(t.h, t.h_prime));
  Twins forced = encode_twins(b, p, c, RngStream(3, "step"), {"A", "B", "B"});
  EXPECT_TRUE(bit_equal(forced.h_prime, forced.h_prime_s));
  EXPECT_TRUE(bit_equal(forced.h_prime, t.h_prime));
}

TEST(Twins, ShapeContract) {
  EncoderConfig c = small_config(6, 4, 1, 3);
  c.emb_dropout = c.hidden_dropout = 0.1;
  EncoderParams p = init_params(c, RngStream(1, "init"));
  Batch b;
  b.item_ids = ids_of({{0, 1, 2}});
  b.positive_ids = ids_of({{3, 4, 5}});
  b.targets = {3};
  Twins t = encode_twins(b, p, c, RngStream(5, "s"));
  for (const Tensor* x : {&t.h, &t.h_prime, &t.h_prime_s}) {
    EXPECT_EQ(x->shape(), (Shape{1, 4}));
    for (double v : x->data()) EXPECT_TRUE(std::isfinite(v));
  }
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

TEST(Twins, TwinIsCloserThanOtherRows) {
  EncoderConfig c = small_config(40, 16, 2, 8);
  c.emb_dropout = c.hidden_dropout = 0.3;
  EncoderParams p = init_params(c, RngStream(13, "init"));
  RngStream data(14, "rows");
  double own = 0, other = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Batch b;
    b.item_ids.rows = 4;
    b.item_ids.cols = 8;
    for (std::size_t i = 0; i < 32; ++i) b.item_ids.ids.push_back(1 + data.next_below(39));
    b.positive_ids = b.item_ids;
    Twins t = encode_twins(b, p, c, RngStream(15, "trial" + std::to_string(trial)));
    for (std::size_t r = 0; r < 4; ++r) {
      auto hr = t.h.data().subspan(r * c.d, c.d);
      own += cosine(hr, t.h_prime.data().subspan(r * c.d, c.d));
      other += cosine(hr, t.h_prime.data().subspan(((r + 1) % 4) * c.d, c.d));
    }
  }
  EXPECT_GT(own, other);
}

TEST(Gradient, EncoderMatchesFiniteDifferences) {
  EncoderConfig c = small_config(7, 4, 1, 3);
  EncoderParams p = wide_params(c, 16);
  IdMatrix ids = ids_of({{0, 1, 2}, {3, 4, 5}});
  std::vector<ItemId> targets{3, 6};
  auto loss = [&] {
    Tensor h = encode_ids(ids, p, c, RngStream(1, "e"), {Mode::eval, false}).h;
    return recommendation_loss(h, targets, p);
  };
  std::vector<Tensor> params;
  for (auto& [n, t] : p.named()) params.push_back(t);
  auto r = testing::gradcheck(loss, params);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Gradient, DropoutForwardMatchesFiniteDifferences) {
  EncoderConfig c = small_config(7, 4, 1, 3);
  c.emb_dropout = c.hidden_dropout = 0.25;
  EncoderParams p = wide_params(c, 17);
  IdMatrix ids = ids_of({{0, 1, 2}, {3, 4, 5}});
  std::vector<ItemId> targets{3, 6};
  auto loss = [&] {
    Tensor h = encode_ids(ids, p, c, RngStream(1, "e"), {Mode::train, false}).h;
    return recommendation_loss(h, targets, p);
  };
  std::vector<Tensor> params;
  for (auto& [n, t] : p.named()) params.push_back(t);
  EXPECT_LT(testing::gradcheck(loss, params).max_rel_error, 1e-6);
}

TEST(Gradient, AbsentItemsGetOnlyDenominatorTerm) {
  EncoderConfig c = small_config(20, 8, 2, 6);
  EncoderParams p = wide_params(c, 18);
  IdMatrix ids = ids_of({{0, 0, 1, 2, 3, 4}, {0, 5, 6, 7, 8, 9}});
  std::vector<ItemId> targets{5, 10};
  p.zero_grad();
  Tensor h, probs;
  {
    Tape tape;
    TapeScope scope(tape);
    h = encode_ids(ids, p, c, RngStream(1, "e"), {Mode::eval, false}).h;
    Tensor loss = recommendation_loss(h, targets, p);
    tape.backward(loss);
  }
  probs = softmax_rows(score_items(h.detach(), p));
  auto g = p.item_emb.grad();
  for (ItemId k = 1; k <= 10; ++k) {
    double norm = 0;
    for (std::size_t j = 0; j < c.d; ++j) norm += g[k * c.d + j] * g[k * c.d + j];
    EXPECT_GT(norm, 0.0) << "item " << k;
  }
  for (std::size_t j = 0; j < c.d; ++j) EXPECT_EQ(g[j], 0.0) << "pad row";
  // Items 11..19 never appear: gradient = mean_b p_b(item) h_b.
  for (ItemId k = 11; k < 20; ++k) {
    for (std::size_t j = 0; j < c.d; ++j) {
      double expected = 0;
      for (std::size_t b = 0; b < 2; ++b) expected += probs.at(b, k - 1) * h.at(b, j) / 2.0;
      EXPECT_NEAR(g[k * c.d + j], expected, 1e-12);
    }
  }
}

TEST(Scoring, PadIsNotACandidate) {
  EncoderConfig c = small_config();
  EncoderParams p = wide_params(c, 19);
  Tensor h = encode_ids(ids_of({{0, 0, 1, 2, 3, 4}}), p, c, RngStream(1, "e"), {}).h;
  Tensor s = score_items(h, p);
  ASSERT_EQ(s.shape(), (Shape{1, c.num_items - 1}));
  double dot = 0;
  for (std::size_t j = 0; j < c.d; ++j) dot += h.at(0, j) * p.item_emb.at(3, j);
  EXPECT_NEAR(s.at(0, 2), dot, 1e-12);
  std::vector<ItemId> bad{0};
  EXPECT_THROW(recommendation_loss(h, bad, p), IndexError);
}

}  // namespace
}  // namespace duorec
