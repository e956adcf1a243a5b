// SPDX-License-Identifier: Apache-2.0
#include "duorec/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <ostream>
#include <sstream>

#include "duorec/errors.hpp"
#include "json.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace duorec {

using nlohmann::json;

// --- config ------------------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
  if (d == 0 || heads == 0 || d % heads != 0) fail("d must be a positive multiple of heads");
  if (max_len == 0) fail("max_len must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (!(lr > 0.0)) fail("lr must be positive");
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail("lambda must lie in [0, 1]");
  if (!(tau > 0.0)) fail("tau must be positive");
  if (!(emb_dropout >= 0.0 && emb_dropout <= 0.5)) fail("emb_dropout must lie in [0, 0.5]");
  if (!(hidden_dropout >= 0.0 && hidden_dropout <= 0.5)) fail("hidden_dropout must lie in [0, 0.5]");
  if (epochs == 0) fail("epochs must be positive");
  if (early_stop_patience == 0) fail("early_stop_patience must be positive");
}

EncoderConfig TrainConfig::encoder(std::size_t num_items) const {
  EncoderConfig c;
  c.num_items = num_items;
  c.d = d;
  c.layers = layers;
  c.heads = heads;
  c.max_len = max_len;
  c.emb_dropout = emb_dropout;
  c.hidden_dropout = hidden_dropout;
  return c;
}

namespace {

json config_json(const TrainConfig& c) {
  return json{{"d", c.d},
              {"layers", c.layers},
              {"heads", c.heads},
              {"max_len", c.max_len},
              {"batch_size", c.batch_size},
              {"lr", c.lr},
              {"lambda", c.lambda},
              {"tau", c.tau},
              {"emb_dropout", c.emb_dropout},
              {"hidden_dropout", c.hidden_dropout},
              {"positive_mode", std::string(positive_mode_name(c.positive_mode))},
              {"epochs", c.epochs},
              {"seed", c.seed},
              {"early_stop_patience", c.early_stop_patience},
              {"nce_normalize", c.nce_normalize}};
}

template <typename T>
void read_unsigned(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
    throw ConfigError(std::string("config: '") + key + "' must be a non-negative integer");
  }
  out = v.get<T>();
}

void read_double(const json& j, const char* key, double& out) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_number()) throw ConfigError(std::string("config: '") + key + "' must be a number");
  out = j.at(key).get<double>();
}

TrainConfig config_from(const json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
  const TrainConfig defaults;
  const json known = config_json(defaults);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.contains(it.key())) throw ConfigError("config: unknown key '" + it.key() + "'");
  }
  TrainConfig c;
  read_unsigned(j, "d", c.d);
  read_unsigned(j, "layers", c.layers);
  read_unsigned(j, "heads", c.heads);
  read_unsigned(j, "max_len", c.max_len);
  read_unsigned(j, "batch_size", c.batch_size);
  read_double(j, "lr", c.lr);
  read_double(j, "lambda", c.lambda);
  read_double(j, "tau", c.tau);
  read_double(j, "emb_dropout", c.emb_dropout);
  read_double(j, "hidden_dropout", c.hidden_dropout);
  if (j.contains("positive_mode")) {
    if (!j.at("positive_mode").is_string()) throw ConfigError("config: 'positive_mode' must be a string");
    c.positive_mode = parse_positive_mode(j.at("positive_mode").get<std::string>());
  }
  read_unsigned(j, "epochs", c.epochs);
  read_unsigned(j, "seed", c.seed);
  read_unsigned(j, "early_stop_patience", c.early_stop_patience);
  if (j.contains("nce_normalize")) {
    if (!j.at("nce_normalize").is_boolean()) throw ConfigError("config: 'nce_normalize' must be true or false");
    c.nce_normalize = j.at("nce_normalize").get<bool>();
  }
  c.validate();
  return c;
}

}  // namespace

TrainConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  return config_from(j);
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

std::string config_to_json(const TrainConfig& config) { return config_json(config).dump(2); }

void set_config_field(TrainConfig& config, const std::string& key, const std::string& value) {
  json j = config_json(config);
  if (!j.contains(key)) throw ConfigError("config: unknown key '" + key + "'");
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::parse_error&) {
    parsed = value;
  }
  if (j.at(key).is_string() && !parsed.is_string()) parsed = value;
  j[key] = parsed;
  config = config_from(j);
}

// --- Adam ----------------------------------------------------------------------

void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                 std::span<double> v, const AdamHyper& h, std::uint64_t t) {
  if (param.size() != m.size() || param.size() != v.size() || (!grad.empty() && grad.size() != param.size())) {
    throw ContractError("adam_update: buffer sizes disagree (" + std::to_string(param.size()) + " params, " +
                        std::to_string(grad.size()) + " grads, " + std::to_string(m.size()) + " moments)");
  }
  if (t == 0) throw ContractError("adam_update: step number starts at 1");
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad.empty() ? 0.0 : grad[i];
    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
    const double mhat = m[i] / c1, vhat = v[i] / c2;
    param[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
  }
}

void adam_step(EncoderParams& params, AdamState& state, const AdamHyper& hyper) {
  auto named = params.named();
  if (state.m.empty()) {
    for (auto& [name, t] : named) {
      state.m.emplace_back(t.numel(), 0.0);
      state.v.emplace_back(t.numel(), 0.0);
    }
  }
  if (state.m.size() != named.size()) throw ContractError("adam_step: moment count does not match parameters");
  ++state.t;
  for (std::size_t i = 0; i < named.size(); ++i) {
    Tensor& t = named[i].second;
    adam_update(t.mutable_data(), t.grad(), state.m[i], state.v[i], hyper, state.t);
  }
  auto v = params.item_emb.mutable_data();
  std::fill(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(params.item_emb.dim(1)), 0.0);
}

// --- checkpoint ----------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'U', 'O', '1'};

void put_u64(std::ostream& out, std::uint64_t x) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(x >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw IoError("checkpoint: truncated file");
  std::uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return x;
}

void put_f64s(std::ostream& out, std::span<const double> xs) {
  for (double x : xs) put_u64(out, std::bit_cast<std::uint64_t>(x));
}

void get_f64s(std::istream& in, std::span<double> xs) {
  for (double& x : xs) x = std::bit_cast<double>(get_u64(in));
}

EncoderParams empty_params(const EncoderConfig& c) {
  // Shapes only; values are overwritten by the loader.
  return init_params(c, RngStream(0, "shape"));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  auto named = ckpt.params.named();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kMagic, 4);
  put_u64(out, 3 * named.size());
  for (int copy = 0; copy < 3; ++copy) {
    for (auto& [name, t] : named) {
      put_u64(out, t.rank());
      for (std::size_t dim : t.shape()) put_u64(out, dim);
    }
  }
  for (auto& [name, t] : named) put_f64s(out, t.data());
  for (int which = 0; which < 2; ++which) {
    const auto& moments = which == 0 ? ckpt.adam.m : ckpt.adam.v;
    for (std::size_t i = 0; i < named.size(); ++i) {
      if (moments.empty()) put_f64s(out, std::vector<double>(named[i].second.numel(), 0.0));
      else put_f64s(out, moments[i]);
    }
  }
  json names = json::array();
  for (int copy = 0; copy < 3; ++copy)
    for (auto& [name, t] : named) names.push_back((copy == 0 ? "" : copy == 1 ? "adam_m." : "adam_v.") + name);
  json meta{{"config", config_json(ckpt.config)},
            {"state",
             {{"num_items", ckpt.num_items},
              {"epoch", ckpt.epoch},
              {"best_valid_hr5", ckpt.best_valid_hr5},
              {"global_step", ckpt.global_step},
              {"sampler_counter", ckpt.sampler_counter},
              {"adam_t", ckpt.adam.t}}},
            {"tensors", names}};
  const std::string text = meta.dump();
  put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw IoError("checkpoint: bad magic in " + path.string());
  const std::uint64_t count = get_u64(in);
  std::vector<Shape> shapes(count);
  for (auto& s : shapes) {
    const std::uint64_t rank = get_u64(in);
    if (rank > 8) throw IoError("checkpoint: implausible tensor rank");
    s.resize(rank);
    for (auto& dim : s) dim = get_u64(in);
  }
  std::vector<std::vector<double>> buffers(count);
  for (std::size_t i = 0; i < count; ++i) {
    buffers[i].resize(shape_numel(shapes[i]));
    get_f64s(in, buffers[i]);
  }
  const std::uint64_t len = get_u64(in);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("checkpoint: truncated metadata");
  json meta;
  try {
    meta = json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError(std::string("checkpoint: bad metadata: ") + e.what());
  }
  Checkpoint c;
  c.config = config_from(meta.at("config"));
  const json& st = meta.at("state");
  c.num_items = st.at("num_items").get<std::size_t>();
  c.epoch = st.at("epoch").get<std::size_t>();
  c.best_valid_hr5 = st.at("best_valid_hr5").get<double>();
  c.global_step = st.at("global_step").get<std::uint64_t>();
  c.sampler_counter = st.at("sampler_counter").get<std::uint64_t>();
  c.adam.t = st.at("adam_t").get<std::uint64_t>();
  c.params = empty_params(c.config.encoder(c.num_items));
  auto named = c.params.named();
  if (count != 3 * named.size()) throw IoError("checkpoint: tensor count does not match its config");
  for (std::size_t i = 0; i < named.size(); ++i) {
    for (int copy = 0; copy < 3; ++copy) {
      if (shapes[copy * named.size() + i] != named[i].second.shape()) {
        throw IoError("checkpoint: shape mismatch for " + named[i].first);
      }
    }
    auto dst = named[i].second.mutable_data();
    std::copy(buffers[i].begin(), buffers[i].end(), dst.begin());
    c.adam.m.push_back(std::move(buffers[named.size() + i]));
    c.adam.v.push_back(std::move(buffers[2 * named.size() + i]));
  }
  return c;
}

Checkpoint clone(const Checkpoint& ckpt) {
  Checkpoint c = ckpt;
  c.params.item_emb = ckpt.params.item_emb.detach();
  c.params.pos_emb = ckpt.params.pos_emb.detach();
  for (EncoderLayer& L : c.params.layers) {
    for (Tensor* t : {&L.wq, &L.wk, &L.wv, &L.wo, &L.ln1_gain, &L.ln1_bias, &L.w1, &L.b1, &L.w2, &L.b2,
                      &L.ln2_gain, &L.ln2_bias})
      *t = t->detach();
  }
  for (auto& [name, t] : c.params.named()) {
    Tensor handle = t;
    handle.set_requires_grad(true);
  }
  return c;
}

// --- evaluation ----------------------------------------------------------------

SplitName parse_split(const std::string& name) {
  if (name == "valid") return SplitName::valid;
  if (name == "test") return SplitName::test;
  throw ConfigError("unknown split '" + name + "' (expected valid or test)");
}

Tensor represent(const EncoderParams& params, const EncoderConfig& config, const SplitDataset& data,
                 std::span<const Example> examples) {
  NoTapeScope no_tape;
  const std::size_t chunk = 256;
  std::vector<double> rows;
  rows.reserve(examples.size() * config.d);
  for (std::size_t begin = 0; begin < examples.size(); begin += chunk) {
    const auto part = examples.subspan(begin, std::min(chunk, examples.size() - begin));
    IdMatrix ids = input_matrix(data, part, config.max_len);
    Tensor h = encode_ids(ids, params, config, RngStream(0, "eval"), {Mode::eval, false}).h;
    rows.insert(rows.end(), h.data().begin(), h.data().end());
  }
  return Tensor({examples.size(), config.d}, std::move(rows));
}

EvalReport evaluate(const EncoderParams& params, const EncoderConfig& config, const SplitDataset& data,
                    SplitName split, std::span<const std::size_t> ks) {
  const auto& examples = split == SplitName::valid ? data.valid : data.test;
  if (examples.empty()) return make_report({}, ks);
  std::vector<ItemId> targets;
  targets.reserve(examples.size());
  for (const Example& e : examples) targets.push_back(data.target(e));
  Tensor h = represent(params, config, data, examples);
  auto ranks = rank_full_catalog(h, params.item_emb, targets);
  return make_report(ranks, ks);
}

EvalReport evaluate(const Checkpoint& ckpt, const SplitDataset& data, SplitName split,
                    std::span<const std::size_t> ks) {
  if (ckpt.num_items != data.num_items) {
    throw ContractError("evaluate: checkpoint has " + std::to_string(ckpt.num_items) + " items, data has " +
                        std::to_string(data.num_items));
  }
  return evaluate(ckpt.params, ckpt.config.encoder(ckpt.num_items), data, split, ks);
}

// --- training ------------------------------------------------------------------

namespace {

// Activations are freed and reallocated every step. Keeping them on the heap
// instead of fresh mmap pages avoids a page fault per touched page.
void keep_large_blocks_on_heap() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace

TrainResult train(const TrainConfig& config, const SplitDataset& data, const TrainOptions& options) {
  config.validate();
  if (data.train.empty()) throw DegenerateInputError("train: the dataset has no training examples");
  keep_large_blocks_on_heap();
  const EncoderConfig ec = config.encoder(data.num_items);

  Checkpoint cur;
  cur.config = config;
  cur.num_items = data.num_items;
  cur.params = init_params(ec, RngStream(config.seed, "init"));
  const TargetIndex index = build_target_index(data);
  BatchSampler sampler(data, index, config.batch_size, config.max_len, RngStream(config.seed, "sampler"));
  const RngStream step_root(config.seed, "step");
  const AdamHyper hyper{config.lr};
  const std::vector<std::size_t> ks{5};

  TrainResult result;
  result.best = clone(cur);
  double best_hr = -1.0;
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs && !result.diverged; ++epoch) {
    sampler.start_epoch();
    double rec_sum = 0, reg_sum = 0, align_sum = 0, unif_sum = 0;
    std::size_t steps = 0, unif_steps = 0;
    while (auto batch = sampler.next_batch()) {
      ++cur.global_step;
      const RngStream base = step_root.child(std::to_string(cur.global_step));
      cur.params.zero_grad();
      Tape tape;
      StepViews views;
      LossBundle lb;
      {
        TapeScope scope(tape);
        if (config.lambda > 0.0) {
          views = positive_views(config.positive_mode, *batch, cur.params, ec, base);
        } else {
          // The pair views do not reach the loss; build them untracked for
          // logging only.
          views.rec = encode_ids(batch->item_ids, cur.params, ec, base.child(TwinLabels{}.anchor),
                                 {Mode::train, false}).h;
          NoTapeScope no_tape;
          StepViews untracked = positive_views(config.positive_mode, *batch, cur.params, ec, base);
          views.left = untracked.left;
          views.right = untracked.right;
        }
        Tensor rec = recommendation_loss(views.rec, batch->targets, cur.params);
        Tensor reg = nce_regularizer(assemble(views.left, views.right, batch->collision_mask, config.tau),
                                     config.nce_normalize);
        lb = combined_loss(rec, reg, config.lambda);
      }
      const double total = lb.total.item();
      if (options.on_step) options.on_step({cur.global_step, lb.rec.item(), lb.reg.item(), total, lb.lambda});
      if (!std::isfinite(total)) {
        result.diverged = true;
        if (options.log) *options.log << "epoch " << epoch << ": non-finite loss, stopping\n";
        break;
      }
      tape.backward(lb.total);
      adam_step(cur.params, cur.adam, hyper);

      rec_sum += lb.rec.item();
      reg_sum += lb.reg.item();
      align_sum += alignment(views.left.detach(), views.right.detach());
      if (batch->size() >= 2) {
        unif_sum += uniformity(views.rec.detach());
        ++unif_steps;
      }
      ++steps;
    }
    if (result.diverged) break;

    EpochRecord rec;
    rec.epoch = epoch;
    rec.rec_loss = rec_sum / static_cast<double>(steps);
    rec.reg_loss = reg_sum / static_cast<double>(steps);
    rec.align = align_sum / static_cast<double>(steps);
    rec.uniformity = unif_steps ? unif_sum / static_cast<double>(unif_steps) : 0.0;
    rec.valid_hr5 = evaluate(cur.params, ec, data, SplitName::valid, ks).hr.at(5);
    result.curves.push_back(rec);
    if (options.log) {
      *options.log << "epoch " << epoch << " rec " << rec.rec_loss << " reg " << rec.reg_loss << " align "
                   << rec.align << " unif " << rec.uniformity << " valid_hr5 " << rec.valid_hr5 << '\n';
    }
    cur.epoch = epoch;
    cur.sampler_counter = sampler.stream().counter();
    if (rec.valid_hr5 > best_hr) {
      best_hr = rec.valid_hr5;
      cur.best_valid_hr5 = best_hr;
      result.best = clone(cur);
      since_best = 0;
    } else if (++since_best >= config.early_stop_patience) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

// --- artefact files ----------------------------------------------------------

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

std::string fmt(const char* spec, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, x);
  return buf;
}

}  // namespace

void write_curves_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& curves) {
  auto out = open_out(path);
  out << "epoch,rec_loss,reg_loss,align,uniformity,valid_hr5\n";
  for (const auto& r : curves) {
    out << r.epoch << ',' << fmt("%.10g", r.rec_loss) << ',' << fmt("%.10g", r.reg_loss) << ','
        << fmt("%.10g", r.align) << ',' << fmt("%.10g", r.uniformity) << ',' << fmt("%.6f", r.valid_hr5) << '\n';
  }
}

void write_eval_json(const std::filesystem::path& path, const EvalReport& report) {
  auto out = open_out(path);
  out << "{\n";
  for (const auto& [k, v] : report.hr) out << "  \"hr@" << k << "\": " << fmt("%.6f", v) << ",\n";
  for (const auto& [k, v] : report.ndcg) out << "  \"ndcg@" << k << "\": " << fmt("%.6f", v) << ",\n";
  out << "  \"n_users\": " << report.n_users << "\n}\n";
}

void write_spectrum_csv(const std::filesystem::path& path, std::span<const double> normalized) {
  auto out = open_out(path);
  out << "rank,normalized_singular_value\n";
  for (std::size_t i = 0; i < normalized.size(); ++i) out << i + 1 << ',' << fmt("%.10g", normalized[i]) << '\n';
}

void write_diagnostics_csv(const std::filesystem::path& path, const std::vector<ProjectedItem>& points) {
  auto out = open_out(path);
  out << "item_index,x,y,frequency\n";
  for (const auto& p : points) out << p.item << ',' << fmt("%.10g", p.x) << ',' << fmt("%.10g", p.y) << ',' << p.frequency << '\n';
}

}  // namespace duorec
