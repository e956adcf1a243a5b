// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "duorec/errors.hpp"
#include "duorec/synthetic.hpp"
#include "duorec/trainer.hpp"
#include "json.hpp"

namespace duorec::cli {

namespace fs = std::filesystem;

namespace {

struct Usage : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt6(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

SplitDataset load_split(const fs::path& data_dir, ItemVocab* vocab_out = nullptr) {
  Corpus c = read_prepared(data_dir);
  if (c.sequences.empty()) throw DegenerateInputError("no sequences in " + data_dir.string());
  const std::size_t n = c.vocab.size();
  if (vocab_out) *vocab_out = c.vocab;
  return split_leave_one_out(std::move(c.sequences), n);
}

void print_report(std::ostream& out, const EvalReport& r) {
  for (const auto& [k, v] : r.hr) out << "hr@" << k << ' ' << fmt6(v) << '\n';
  for (const auto& [k, v] : r.ndcg) out << "ndcg@" << k << ' ' << fmt6(v) << '\n';
  out << "n_users " << r.n_users << '\n';
}

// Trains one run into `dir`: config.json, checkpoint.duo, curves.csv,
// eval.json (test split of the best-validation checkpoint), spectrum.csv and
// diagnostics.csv.
EvalReport train_into(const TrainConfig& cfg, const SplitDataset& data, std::span<const std::int64_t> frequency,
                      const fs::path& dir, std::ostream* log) {
  ensure_dir(dir);
  {
    std::ofstream c(dir / "config.json");
    if (!c) throw IoError("cannot write " + (dir / "config.json").string());
    c << config_to_json(cfg) << '\n';
  }
  TrainOptions opts;
  opts.log = log;
  TrainResult r = train(cfg, data, opts);
  save_checkpoint(dir / "checkpoint.duo", r.best);
  write_curves_csv(dir / "curves.csv", r.curves);
  const EvalReport rep = evaluate(r.best, data, SplitName::test);
  write_eval_json(dir / "eval.json", rep);
  try {
    write_spectrum_csv(dir / "spectrum.csv", singular_spectrum(r.best.params.item_emb).normalized);
    write_diagnostics_csv(dir / "diagnostics.csv", project_2d(r.best.params.item_emb, frequency));
  } catch (const DegenerateInputError& e) {
    if (log) *log << "no spectrum: " << e.what() << '\n';
  }
  if (log) {
    if (r.diverged) *log << "training diverged; kept the last finite best checkpoint\n";
    if (r.early_stopped) *log << "early stop after epoch " << r.curves.size() << '\n';
  }
  return rep;
}

TrainConfig base_config(const std::string& config_path, const std::vector<std::string>& sets) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_config(config_path);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw Usage("--set expects key=value, got '" + kv + "'");
    set_config_field(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

// --- subcommands ---------------------------------------------------------------

struct PrepArgs {
  std::string format = "tsv-uit", in, out = "data";
  std::size_t min_count = 5, max_len = 50;
};

int do_prep(const PrepArgs& a, std::ostream& out) {
  const EventFormat fmt = parse_event_format(a.format);
  const Corpus c = build_sequences(ingest(fs::path(a.in), fmt), a.min_count, a.max_len);
  ensure_dir(a.out);
  write_prepared(a.out, c);
  out << "users " << c.stats.users << "\nitems " << c.stats.items << "\nactions " << c.stats.actions
      << "\navg_length " << c.stats.avg_length << '\n';
  return 0;
}

int do_synth(const SyntheticSpec& spec, const std::string& path, std::ostream& out) {
  const auto events = synthetic_events(spec);
  const fs::path p(path);
  if (p.has_parent_path()) ensure_dir(p.parent_path());
  std::ofstream f(p);
  if (!f) throw IoError("cannot write " + path);
  for (const auto& e : events) f << e.user_id << '\t' << e.item_id << '\t' << e.timestamp << '\n';
  if (!f) throw IoError("failed writing " + path);
  out << "events " << events.size() << '\n';
  return 0;
}

struct TrainArgs {
  std::string config, data = "data", out = "run";
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

int do_train(const TrainArgs& a, std::ostream& out) {
  TrainConfig cfg = base_config(a.config, a.sets);
  if (a.seed) cfg.seed = *a.seed;
  ItemVocab vocab;
  const SplitDataset data = load_split(a.data, &vocab);
  const EvalReport rep = train_into(cfg, data, vocab.frequency, a.out, a.quiet ? nullptr : &out);
  print_report(out, rep);
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data = "data", split = "test", out;
};

int do_eval(const EvalArgs& a, std::ostream& out) {
  const SplitName split = parse_split(a.split);
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const SplitDataset data = load_split(a.data);
  const EvalReport rep = evaluate(ckpt, data, split);
  if (!a.out.empty()) {
    ensure_dir(a.out);
    write_eval_json(fs::path(a.out) / "eval.json", rep);
  }
  print_report(out, rep);
  return 0;
}

struct DiagnoseArgs {
  std::string checkpoint, data = "data", out = "diagnose";
  std::size_t probes = 5;
  bool no_center = false;
};

int do_diagnose(const DiagnoseArgs& a, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  ItemVocab vocab;
  const SplitDataset data = load_split(a.data, &vocab);
  if (ckpt.num_items != data.num_items) {
    throw ContractError("diagnose: checkpoint has " + std::to_string(ckpt.num_items) + " items, data has " +
                        std::to_string(data.num_items));
  }
  const EncoderConfig ec = ckpt.config.encoder(ckpt.num_items);
  ensure_dir(a.out);
  const fs::path dir(a.out);

  const bool center = !a.no_center;
  const SpectrumResult spec = singular_spectrum(ckpt.params.item_emb, center);
  write_spectrum_csv(dir / "spectrum.csv", spec.normalized);
  write_diagnostics_csv(dir / "diagnostics.csv", project_2d(ckpt.params.item_emb, vocab.frequency, center));

  // Geometry of test representations: uniformity in eval mode, alignment
  // between two dropout views of the same inputs.
  const Tensor reps = represent(ckpt.params, ec, data, data.test);
  double align_sum = 0.0;
  std::size_t rows = 0;
  const RngStream root(ckpt.config.seed, "diagnose");
  {
    NoTapeScope no_tape;
    for (std::size_t lo = 0; lo < data.test.size(); lo += 256) {
      const std::size_t hi = std::min(data.test.size(), lo + 256);
      const IdMatrix ids = input_matrix(data, std::span(data.test).subspan(lo, hi - lo), ec.max_len);
      const RngStream chunk = root.child(std::to_string(lo));
      const Tensor x = encode_ids(ids, ckpt.params, ec, chunk.child("B"), {Mode::train, false}).h;
      const Tensor y = encode_ids(ids, ckpt.params, ec, chunk.child("C"), {Mode::train, false}).h;
      align_sum += alignment(x, y) * static_cast<double>(hi - lo);
      rows += hi - lo;
    }
  }
  nlohmann::json summary{{"tail_mass", spectrum_tail_mass(spec.normalized)},
                         {"alignment", rows ? align_sum / static_cast<double>(rows) : 0.0},
                         {"uniformity", reps.dim(0) >= 2 ? uniformity(reps) : 0.0},
                         {"centered", center}};

  // Gradient probe on a leading slice of the test split, using the rarest
  // items that occur neither in its inputs nor among its targets. The slice
  // shrinks until such items exist.
  IdMatrix inputs;
  std::vector<ItemId> targets, candidates;
  for (std::size_t nb : {256, 64, 16, 4, 1}) {
    const auto batch = std::span(data.test).subspan(0, std::min(nb, data.test.size()));
    inputs = input_matrix(data, batch, ec.max_len);
    targets.clear();
    std::set<ItemId> seen(inputs.ids.begin(), inputs.ids.end());
    for (const Example& e : batch) {
      targets.push_back(data.sequences[e.sequence].items[e.target_pos]);
      seen.insert(targets.back());
    }
    candidates.clear();
    for (ItemId i = 1; i < data.num_items; ++i)
      if (!seen.count(i)) candidates.push_back(i);
    if (!candidates.empty()) break;
  }
  std::stable_sort(candidates.begin(), candidates.end(), [&](ItemId x, ItemId y) {
    return x < vocab.frequency.size() && y < vocab.frequency.size() && vocab.frequency[x] < vocab.frequency[y];
  });
  if (candidates.size() > a.probes) candidates.resize(a.probes);
  std::ofstream probe(dir / "probe.csv");
  if (!probe) throw IoError("cannot write " + (dir / "probe.csv").string());
  probe << "item_index,analytic_norm,predicted_norm,cosine\n";
  if (!candidates.empty()) {
    for (const ProbeResult& p : gradient_degeneration_probe(ckpt.params, ec, inputs, targets, candidates)) {
      auto norm = [](const std::vector<double>& v) {
        return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
      };
      char line[160];
      std::snprintf(line, sizeof line, "%u,%.10g,%.10g,%.10g\n", static_cast<unsigned>(p.item), norm(p.analytic),
                    norm(p.predicted), p.cosine);
      probe << line;
    }
  }
  summary["probe_items"] = candidates.size();
  summary["probe_rows"] = inputs.rows;
  std::ofstream(dir / "summary.json") << summary.dump(2) << '\n';
  out << summary.dump(2) << '\n';
  return 0;
}

struct SweepArgs {
  std::string config, data = "data", out = "sweep";
  std::vector<std::string> grid, sets;
  std::vector<std::uint64_t> seeds;
  bool quiet = false;
};

struct Axis {
  std::string key;
  std::vector<std::string> values;
};

std::vector<Axis> parse_grid(const std::vector<std::string>& grid) {
  std::vector<Axis> axes;
  std::set<std::string> keys;
  for (const auto& g : grid) {
    const auto eq = g.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == g.size()) {
      throw Usage("--grid expects key=v1,v2,..., got '" + g + "'");
    }
    Axis ax{g.substr(0, eq), {}};
    if (!keys.insert(ax.key).second) throw Usage("--grid key '" + ax.key + "' given twice");
    std::stringstream ss(g.substr(eq + 1));
    for (std::string v; std::getline(ss, v, ',');) {
      if (v.empty()) throw Usage("--grid '" + g + "' has an empty value");
      ax.values.push_back(v);
    }
    axes.push_back(std::move(ax));
  }
  return axes;
}

std::pair<double, double> mean_sample_std(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  if (xs.size() < 2) return {mean, NAN};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

int do_sweep(const SweepArgs& a, std::ostream& out) {
  const std::vector<Axis> axes = parse_grid(a.grid);
  const TrainConfig base = base_config(a.config, a.sets);
  // Validate every grid value before any training starts.
  for (const Axis& ax : axes)
    for (const auto& v : ax.values) {
      TrainConfig probe = base;
      set_config_field(probe, ax.key, v);
    }
  const std::vector<std::uint64_t> seeds = a.seeds.empty() ? std::vector<std::uint64_t>{base.seed} : a.seeds;
  ItemVocab vocab;
  const SplitDataset data = load_split(a.data, &vocab);
  ensure_dir(a.out);

  std::size_t combos = 1;
  for (const Axis& ax : axes) combos *= ax.values.size();
  const std::vector<std::string> metrics{"hr@5", "hr@10", "ndcg@5", "ndcg@10"};
  std::ofstream summary(fs::path(a.out) / "summary.csv");
  if (!summary) throw IoError("cannot write summary.csv in " + a.out);
  summary << "run";
  for (const Axis& ax : axes) summary << ',' << ax.key;
  summary << ",n_seeds";
  for (const auto& m : metrics) summary << ',' << m << "_mean," << m << "_std";
  summary << '\n';

  for (std::size_t c = 0; c < combos; ++c) {
    TrainConfig cfg = base;
    std::vector<std::string> chosen;
    std::string name = "run" + std::to_string(c);
    std::size_t rest = c;
    for (auto it = axes.rbegin(); it != axes.rend(); ++it) {
      chosen.insert(chosen.begin(), it->values[rest % it->values.size()]);
      rest /= it->values.size();
    }
    for (std::size_t i = 0; i < axes.size(); ++i) {
      set_config_field(cfg, axes[i].key, chosen[i]);
      name += "_" + axes[i].key + "=" + chosen[i];
    }
    std::map<std::string, std::vector<double>> values;
    for (std::uint64_t seed : seeds) {
      cfg.seed = seed;
      const fs::path dir = fs::path(a.out) / name / ("seed" + std::to_string(seed));
      if (!a.quiet) out << "== " << name << " seed " << seed << '\n';
      const EvalReport rep = train_into(cfg, data, vocab.frequency, dir, a.quiet ? nullptr : &out);
      for (const auto& [k, v] : rep.hr) values["hr@" + std::to_string(k)].push_back(v);
      for (const auto& [k, v] : rep.ndcg) values["ndcg@" + std::to_string(k)].push_back(v);
    }
    summary << name;
    for (const auto& v : chosen) summary << ',' << v;
    summary << ',' << seeds.size();
    for (const auto& m : metrics) {
      const auto [mean, sd] = mean_sample_std(values[m]);
      summary << ',' << fmt6(mean) << ',' << (std::isnan(sd) ? std::string("nan") : fmt6(sd));
    }
    summary << '\n';
  }
  out << "runs " << combos * seeds.size() << "\nsummary " << (fs::path(a.out) / "summary.csv").string() << '\n';
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"DuoRec sequential recommender: data preparation, training, evaluation, diagnostics", "duorec"};
  app.require_subcommand(1);

  PrepArgs prep;
  auto* c_prep = app.add_subcommand("prep", "Ingest an event log, k-core filter, write sequences and vocab");
  c_prep->add_option("--format", prep.format, "tsv-uit or ml-1m")->capture_default_str();
  c_prep->add_option("--in", prep.in, "Raw event file")->required();
  c_prep->add_option("--out", prep.out, "Output directory")->capture_default_str();
  c_prep->add_option("--min-count", prep.min_count, "k of the k-core filter")->capture_default_str();
  c_prep->add_option("--max-len", prep.max_len, "Keep the most recent N items per user")->capture_default_str();

  SyntheticSpec synth;
  std::string synth_out;
  auto* c_synth = app.add_subcommand("synth", "Write a clustered synthetic event log (tsv-uit)");
  c_synth->add_option("--out", synth_out, "Event file to write")->required();
  c_synth->add_option("--items", synth.items)->capture_default_str();
  c_synth->add_option("--clusters", synth.clusters)->capture_default_str();
  c_synth->add_option("--sequences", synth.sequences)->capture_default_str();
  c_synth->add_option("--min-len", synth.min_len)->capture_default_str();
  c_synth->add_option("--max-len", synth.max_len)->capture_default_str();
  c_synth->add_option("--follow", synth.follow_prob, "Probability of following the cluster chain")->capture_default_str();
  c_synth->add_option("--noise", synth.noise_prob, "Probability of a uniform random item")->capture_default_str();
  c_synth->add_option("--zipf", synth.zipf_exponent, "Within-cluster popularity exponent")->capture_default_str();
  c_synth->add_option("--seed", synth.seed)->capture_default_str();

  TrainArgs tr;
  std::uint64_t train_seed = 0;
  auto* c_train = app.add_subcommand("train", "Train and write checkpoint.duo, curves.csv, eval.json");
  c_train->add_option("--config", tr.config, "JSON config mirroring TrainConfig");
  c_train->add_option("--data", tr.data, "Prepared data directory")->capture_default_str();
  c_train->add_option("--out", tr.out, "Run directory")->capture_default_str();
  auto* o_seed = c_train->add_option("--seed", train_seed, "Overrides the config seed");
  c_train->add_option("--set", tr.sets, "Override one config field, key=value (repeatable)");
  c_train->add_flag("--quiet", tr.quiet, "No per-epoch log");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint with full-catalog ranking");
  c_eval->add_option("--checkpoint", ev.checkpoint)->required();
  c_eval->add_option("--data", ev.data)->capture_default_str();
  c_eval->add_option("--split", ev.split, "valid or test")->capture_default_str();
  c_eval->add_option("--out", ev.out, "Directory for eval.json");

  DiagnoseArgs dg;
  auto* c_diag = app.add_subcommand("diagnose", "Spectrum, 2-D projection, geometry and gradient probe exports");
  c_diag->add_option("--checkpoint", dg.checkpoint)->required();
  c_diag->add_option("--data", dg.data)->capture_default_str();
  c_diag->add_option("--out", dg.out)->capture_default_str();
  c_diag->add_option("--probes", dg.probes, "Number of absent items to probe")->capture_default_str();
  c_diag->add_flag("--no-center", dg.no_center, "Do not mean-centre the item table");

  SweepArgs sw;
  auto* c_sweep = app.add_subcommand("sweep", "Grid of training runs; summary.csv with mean and sample std over seeds");
  c_sweep->add_option("--config", sw.config);
  c_sweep->add_option("--data", sw.data)->capture_default_str();
  c_sweep->add_option("--out", sw.out)->capture_default_str();
  c_sweep->add_option("--grid", sw.grid, "key=v1,v2,... (repeatable; cartesian product)")->required();
  c_sweep->add_option("--seeds", sw.seeds, "Seeds, comma separated")->delimiter(',');
  c_sweep->add_option("--set", sw.sets, "Override one base config field, key=value (repeatable)");
  c_sweep->add_flag("--quiet", sw.quiet);
  (void)c_eval;

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return 1;
  }

  try {
    if (*o_seed) tr.seed = train_seed;
    if (c_prep->parsed()) return do_prep(prep, out);
    if (c_synth->parsed()) return do_synth(synth, synth_out, out);
    if (c_train->parsed()) return do_train(tr, out);
    if (c_eval->parsed()) return do_eval(ev, out);
    if (c_diag->parsed()) return do_diagnose(dg, out);
    if (c_sweep->parsed()) return do_sweep(sw, out);
  } catch (const Usage& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace duorec::cli
