// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "duorec/errors.hpp"
#include "duorec/synthetic.hpp"
#include "duorec/trainer.hpp"

using namespace duorec;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("duorec_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SplitDataset synthetic_split(std::size_t sequences, std::size_t items, std::uint64_t seed = 7,
                             bool structured = true) {
  SyntheticSpec spec;
  if (!structured) {
    spec.follow_prob = 0.0;
    spec.noise_prob = 1.0;
  }
  spec.sequences = sequences;
  spec.items = items;
  spec.clusters = std::min<std::size_t>(10, items);
  spec.seed = seed;
  Corpus c = build_sequences(synthetic_events(spec), 1, 50);
  return split_leave_one_out(std::move(c.sequences), c.vocab.size());
}

TrainConfig small_config() {
  TrainConfig c;
  c.d = 8;
  c.max_len = 12;
  c.batch_size = 32;
  c.epochs = 2;
  c.lambda = 0.2;
  return c;
}

std::vector<double> flatten(const EncoderParams& p) {
  std::vector<double> out;
  for (auto& [name, t] : p.named()) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

}  // namespace

// --- Adam ----------------------------------------------------------------------

TEST(Adam, ZeroGradientKeepsParamsAndDecaysMoments) {
  std::vector<double> p{0.5, -1.0}, m{0.2, -0.4}, v{0.01, 0.04};
  const std::vector<double> g{0.0, 0.0};
  AdamHyper h;
  // Nonzero moments still move p; a zero gradient with zero moments must not.
  std::vector<double> p0{0.5, -1.0}, m0{0.0, 0.0}, v0{0.0, 0.0};
  adam_update(p0, g, m0, v0, h, 1);
  EXPECT_EQ(p0, (std::vector<double>{0.5, -1.0}));
  adam_update(p, g, m, v, h, 3);
  EXPECT_DOUBLE_EQ(m[0], 0.9 * 0.2);
  EXPECT_DOUBLE_EQ(m[1], 0.9 * -0.4);
  EXPECT_DOUBLE_EQ(v[0], 0.999 * 0.01);
  EXPECT_DOUBLE_EQ(v[1], 0.999 * 0.04);
}

TEST(Adam, FirstStepClosedForm) {
  // m_hat = v_hat = 1 after one step on g = 1, so the move is -lr / (1 + eps).
  for (double lr : {1e-3, 0.1}) {
    std::vector<double> p{0.0}, m{0.0}, v{0.0};
    const std::vector<double> g{1.0};
    AdamHyper h;
    h.lr = lr;
    adam_update(p, g, m, v, h, 1);
    EXPECT_NEAR(p[0], -lr / (1.0 + 1e-8), 1e-16);
  }
}

TEST(Adam, IdenticalGradientsGiveIdenticalUpdates) {
  std::vector<double> p{0.3, 0.3}, m{0.0, 0.0}, v{0.0, 0.0};
  AdamHyper h;
  for (std::uint64_t t = 1; t <= 5; ++t) {
    const double g = std::sin(static_cast<double>(t));
    adam_update(p, std::vector<double>{g, g}, m, v, h, t);
    EXPECT_EQ(p[0], p[1]);
  }
}

TEST(Adam, Preconditions) {
  std::vector<double> p{0.0, 0.0}, m{0.0, 0.0}, v{0.0, 0.0}, shortv{0.0};
  AdamHyper h;
  EXPECT_THROW(adam_update(p, std::vector<double>{1.0}, m, v, h, 1), ContractError);
  EXPECT_THROW(adam_update(p, std::vector<double>{1.0, 1.0}, m, shortv, h, 1), ContractError);
  EXPECT_THROW(adam_update(p, std::vector<double>{1.0, 1.0}, m, v, h, 0), ContractError);
}

TEST(Adam, StepKeepsPadRowZero) {
  EncoderConfig ec;
  ec.num_items = 6;
  ec.d = 4;
  ec.max_len = 3;
  ec.layers = 1;
  EncoderParams params = init_params(ec, RngStream(1, "init"));
  auto g = params.item_emb.mutable_grad();
  std::fill(g.begin(), g.end(), 1.0);
  AdamState st;
  adam_step(params, st, AdamHyper{0.1});
  EXPECT_EQ(st.t, 1u);
  for (std::size_t j = 0; j < ec.d; ++j) EXPECT_EQ(params.item_emb.data()[j], 0.0);
  EXPECT_NE(params.item_emb.data()[ec.d], 0.0);
}

// --- config --------------------------------------------------------------------

TEST(Config, Defaults) {
  TrainConfig c;
  EXPECT_EQ(c.d, 64u);
  EXPECT_EQ(c.layers, 2u);
  EXPECT_EQ(c.heads, 2u);
  EXPECT_EQ(c.max_len, 50u);
  EXPECT_EQ(c.batch_size, 256u);
  EXPECT_EQ(c.lr, 0.001);
  EXPECT_EQ(c.tau, 1.0);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, JsonRoundTrip) {
  TrainConfig c;
  c.d = 32;
  c.lambda = 0.3;
  c.positive_mode = PositiveMode::supervised;
  c.seed = 0xFFFFFFFFFFFFull;
  c.nce_normalize = true;
  const TrainConfig back = config_from_json(config_to_json(c));
  EXPECT_EQ(config_to_json(back), config_to_json(c));
  EXPECT_EQ(back.seed, c.seed);
  EXPECT_EQ(back.positive_mode, PositiveMode::supervised);
}

TEST(Config, MissingKeysKeepDefaults) {
  const TrainConfig c = config_from_json(R"({"lambda": 0.4})");
  EXPECT_EQ(c.lambda, 0.4);
  EXPECT_EQ(c.d, 64u);
}

TEST(Config, Rejections) {
  EXPECT_THROW(config_from_json(R"({"lamda": 0.1})"), ConfigError);
  EXPECT_THROW(config_from_json(R"({"d": "big"})"), ConfigError);
  EXPECT_THROW(config_from_json(R"({"d": -4})"), ConfigError);
  EXPECT_THROW(config_from_json(R"({"lambda": 1.5})"), ConfigError);
  EXPECT_THROW(config_from_json(R"({"emb_dropout": 0.6})"), ConfigError);
  EXPECT_THROW(config_from_json(R"({"d": 63})"), ConfigError);
  EXPECT_THROW(config_from_json(R"({"positive_mode": "both"})"), ConfigError);
  EXPECT_THROW(config_from_json("[1, 2]"), ConfigError);
  EXPECT_THROW(config_from_json("{"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/cfg.json"), IoError);
}

TEST(Config, SetField) {
  TrainConfig c;
  set_config_field(c, "lambda", "0.3");
  set_config_field(c, "batch_size", "128");
  set_config_field(c, "positive_mode", "unsupervised");
  set_config_field(c, "nce_normalize", "true");
  EXPECT_EQ(c.lambda, 0.3);
  EXPECT_EQ(c.batch_size, 128u);
  EXPECT_EQ(c.positive_mode, PositiveMode::unsupervised);
  EXPECT_TRUE(c.nce_normalize);
  EXPECT_THROW(set_config_field(c, "gamma", "1"), ConfigError);
  EXPECT_THROW(set_config_field(c, "tau", "-1"), ConfigError);
}

// --- checkpoint ----------------------------------------------------------------

TEST(Checkpoint, RoundTripIsByteAndEvalIdentical) {
  const SplitDataset data = synthetic_split(40, 30);
  TrainResult r = train(small_config(), data);
  ASSERT_GT(r.best.adam.t, 0u);
  const fs::path dir = scratch("roundtrip");
  save_checkpoint(dir / "a.duo", r.best);
  const Checkpoint back = load_checkpoint(dir / "a.duo");
  save_checkpoint(dir / "b.duo", back);
  EXPECT_EQ(slurp(dir / "a.duo"), slurp(dir / "b.duo"));
  EXPECT_EQ(back.epoch, r.best.epoch);
  EXPECT_EQ(back.global_step, r.best.global_step);
  EXPECT_EQ(back.sampler_counter, r.best.sampler_counter);
  EXPECT_EQ(back.adam.m, r.best.adam.m);
  EXPECT_EQ(back.adam.v, r.best.adam.v);

  const std::vector<std::size_t> ks{5, 10};
  for (SplitName s : {SplitName::valid, SplitName::test}) {
    const EvalReport a = evaluate(r.best, data, s, ks);
    const EvalReport b = evaluate(back, data, s, ks);
    EXPECT_EQ(a.hr, b.hr);
    EXPECT_EQ(a.ndcg, b.ndcg);
  }
}

TEST(Checkpoint, LoadErrors) {
  const fs::path dir = scratch("errors");
  EXPECT_THROW(load_checkpoint(dir / "missing.duo"), IoError);
  { std::ofstream(dir / "bad.duo") << "NOPE and more"; }
  EXPECT_THROW(load_checkpoint(dir / "bad.duo"), IoError);

  Checkpoint c;
  c.config = small_config();
  c.num_items = 9;
  c.params = init_params(c.config.encoder(9), RngStream(3, "init"));
  save_checkpoint(dir / "ok.duo", c);
  const std::string full = slurp(dir / "ok.duo");
  for (std::size_t cut : {std::size_t{6}, full.size() / 2, full.size() - 3}) {
    std::ofstream(dir / "cut.duo", std::ios::binary).write(full.data(), static_cast<std::streamsize>(cut));
    EXPECT_THROW(load_checkpoint(dir / "cut.duo"), IoError) << "cut at " << cut;
  }
}

TEST(Checkpoint, CloneDoesNotAlias) {
  Checkpoint c;
  c.config = small_config();
  c.num_items = 9;
  c.params = init_params(c.config.encoder(9), RngStream(3, "init"));
  Checkpoint d = clone(c);
  d.params.item_emb.mutable_data()[20] += 1.0;
  EXPECT_NE(c.params.item_emb.data()[20], d.params.item_emb.data()[20]);
  EXPECT_TRUE(d.params.item_emb.requires_grad());
}

// --- evaluation ----------------------------------------------------------------

TEST(Evaluate, DoesNotMutateParameters) {
  const SplitDataset data = synthetic_split(40, 30);
  TrainResult r = train(small_config(), data);
  const fs::path dir = scratch("nomutate");
  save_checkpoint(dir / "before.duo", r.best);
  (void)evaluate(r.best, data, SplitName::test);
  (void)represent(r.best.params, r.best.config.encoder(r.best.num_items), data, data.valid);
  save_checkpoint(dir / "after.duo", r.best);
  EXPECT_EQ(slurp(dir / "before.duo"), slurp(dir / "after.duo"));
}

TEST(Evaluate, NumItemsMismatch) {
  const SplitDataset data = synthetic_split(20, 30);
  Checkpoint c;
  c.config = small_config();
  c.num_items = data.num_items + 1;
  c.params = init_params(c.config.encoder(c.num_items), RngStream(3, "init"));
  EXPECT_THROW(evaluate(c, data, SplitName::test), ContractError);
}

TEST(Evaluate, SplitNames) {
  EXPECT_EQ(parse_split("valid"), SplitName::valid);
  EXPECT_EQ(parse_split("test"), SplitName::test);
  EXPECT_THROW(parse_split("train"), ConfigError);
}

TEST(Evaluate, NdcgMonotoneInK) {
  const SplitDataset data = synthetic_split(60, 40);
  TrainResult r = train(small_config(), data);
  const EvalReport rep = evaluate(r.best, data, SplitName::test, std::vector<std::size_t>{1, 5, 10, 20});
  EXPECT_EQ(rep.n_users, data.test.size());
  EXPECT_LE(rep.ndcg.at(5), rep.ndcg.at(10));
  EXPECT_LE(rep.ndcg.at(10), rep.ndcg.at(20));
  EXPECT_LE(rep.hr.at(5), rep.hr.at(10));
  EXPECT_EQ(rep.hr.at(1), rep.ndcg.at(1));
}

TEST(Evaluate, UntrainedModelIsAtChance) {
  // Uniform draws: with cluster structure an untrained model already favours
  // items seen in the prefix through the residual path.
  const SplitDataset data = synthetic_split(3000, 1000, 11, false);
  ASSERT_EQ(data.num_items, 1001u);
  TrainConfig cfg = small_config();
  cfg.d = 16;
  const EncoderConfig ec = cfg.encoder(data.num_items);
  const EncoderParams params = init_params(ec, RngStream(5, "init"));
  const EvalReport rep = evaluate(params, ec, data, SplitName::test);
  const double p = 10.0 / 1000.0, n = static_cast<double>(rep.n_users);
  const double se = std::sqrt(p * (1 - p) / n);
  EXPECT_NEAR(rep.hr.at(10), p, 3 * se);
}

// --- training ------------------------------------------------------------------

TEST(Train, LambdaZeroSmokeLowersLoss) {
  const SplitDataset data = synthetic_split(50, 40);
  TrainConfig cfg = small_config();
  cfg.lambda = 0.0;
  cfg.epochs = 5;
  cfg.early_stop_patience = 100;
  double first = NAN;
  TrainOptions opts;
  opts.on_step = [&](const StepRecord& s) {
    if (s.step == 1) first = s.total;
  };
  TrainResult r = train(cfg, data, opts);
  ASSERT_EQ(r.curves.size(), 5u);
  EXPECT_LT(r.curves.back().rec_loss, first);
  EXPECT_FALSE(r.diverged);
}

TEST(Train, TotalLossIdentityEveryStep) {
  const SplitDataset data = synthetic_split(40, 30);
  for (double lambda : {0.0, 0.2, 1.0}) {
    TrainConfig cfg = small_config();
    cfg.lambda = lambda;
    std::size_t steps = 0;
    TrainOptions opts;
    opts.on_step = [&](const StepRecord& s) {
      ++steps;
      EXPECT_EQ(s.lambda, lambda);
      EXPECT_LE(std::abs(s.total - (s.rec + lambda * s.reg)), 1e-15);
    };
    train(cfg, data, opts);
    EXPECT_GT(steps, 0u);
  }
}

TEST(Train, DeterministicArtifacts) {
  const SplitDataset data = synthetic_split(40, 30);
  const fs::path dir = scratch("determinism");
  for (int run = 0; run < 2; ++run) {
    TrainResult r = train(small_config(), data);
    write_curves_csv(dir / ("curves" + std::to_string(run) + ".csv"), r.curves);
    save_checkpoint(dir / ("ckpt" + std::to_string(run) + ".duo"), r.best);
  }
  EXPECT_EQ(slurp(dir / "curves0.csv"), slurp(dir / "curves1.csv"));
  EXPECT_EQ(slurp(dir / "ckpt0.duo"), slurp(dir / "ckpt1.duo"));

  TrainConfig other = small_config();
  other.seed = 99;
  TrainResult r = train(other, data);
  write_curves_csv(dir / "curves_other.csv", r.curves);
  EXPECT_NE(slurp(dir / "curves0.csv"), slurp(dir / "curves_other.csv"));
}

TEST(Train, MemorizesRingSequences) {
  // Five walks round a 10-item ring; every transition appears in training.
  std::vector<UserSequence> seqs;
  for (std::size_t u = 0; u < 5; ++u) {
    UserSequence s;
    s.user = u;
    s.user_id = "u" + std::to_string(u);
    for (std::size_t t = 0; t < 14; ++t) s.items.push_back(static_cast<ItemId>(1 + (2 * u + t) % 10));
    seqs.push_back(s);
  }
  const SplitDataset data = split_leave_one_out(seqs, 11);
  TrainConfig cfg;
  cfg.d = 16;
  cfg.max_len = 14;
  cfg.batch_size = 16;
  cfg.lr = 0.01;
  cfg.lambda = 0.0;
  cfg.emb_dropout = 0.0;
  cfg.hidden_dropout = 0.0;
  cfg.epochs = 150;
  cfg.early_stop_patience = 150;
  TrainResult r = train(cfg, data);
  const EvalReport rep = evaluate(r.best, data, SplitName::test);
  EXPECT_EQ(rep.hr.at(5), 1.0);
  EXPECT_EQ(r.best.best_valid_hr5, 1.0);
}

TEST(Train, EarlyStoppingAfterPatience) {
  const SplitDataset data = synthetic_split(40, 30);
  TrainConfig cfg = small_config();
  cfg.lr = 1e-12;  // validation HR@5 cannot improve after the first epoch
  cfg.epochs = 20;
  cfg.early_stop_patience = 2;
  TrainResult r = train(cfg, data);
  EXPECT_TRUE(r.early_stopped);
  EXPECT_EQ(r.curves.size(), 3u);
  EXPECT_EQ(r.best.epoch, 1u);
}

TEST(Train, DivergenceKeepsLastFiniteCheckpoint) {
  const SplitDataset data = synthetic_split(40, 30);
  TrainConfig cfg = small_config();
  cfg.lr = 1e300;
  cfg.epochs = 3;
  TrainResult r = train(cfg, data);
  EXPECT_TRUE(r.diverged);
  for (double x : flatten(r.best.params)) ASSERT_TRUE(std::isfinite(x));
}

TEST(Train, RejectsEmptyDataset) {
  SplitDataset empty;
  empty.num_items = 5;
  EXPECT_THROW(train(small_config(), empty), DegenerateInputError);
}

// --- artefact files ------------------------------------------------------------

TEST(Artifacts, EvalJsonLayout) {
  EvalReport rep;
  rep.hr = {{5, 0.25}, {10, 0.5}};
  rep.ndcg = {{5, 1.0 / 3.0}, {10, 0.4}};
  rep.n_users = 8;
  const fs::path dir = scratch("evaljson");
  write_eval_json(dir / "eval.json", rep);
  EXPECT_EQ(slurp(dir / "eval.json"),
            "{\n  \"hr@5\": 0.250000,\n  \"hr@10\": 0.500000,\n  \"ndcg@5\": 0.333333,\n"
            "  \"ndcg@10\": 0.400000,\n  \"n_users\": 8\n}\n");
}

TEST(Artifacts, CsvHeaders) {
  const fs::path dir = scratch("csv");
  write_curves_csv(dir / "c.csv", {EpochRecord{1, 2.5, 0.5, 1.0, -2.0, 0.125}});
  EXPECT_EQ(slurp(dir / "c.csv"), "epoch,rec_loss,reg_loss,align,uniformity,valid_hr5\n1,2.5,0.5,1,-2,0.125000\n");
  write_spectrum_csv(dir / "s.csv", std::vector<double>{1.0, 0.5});
  EXPECT_EQ(slurp(dir / "s.csv"), "rank,normalized_singular_value\n1,1\n2,0.5\n");
  write_diagnostics_csv(dir / "d.csv", {ProjectedItem{3, 0.5, -1.0, 7}});
  EXPECT_EQ(slurp(dir / "d.csv"), "item_index,x,y,frequency\n3,0.5,-1,7\n");
}
