// SPDX-License-Identifier: Apache-2.0
//
// Training configuration, Adam, the training loop, evaluation and
// checkpoint / artefact files.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "duorec/contrastive.hpp"
#include "duorec/data.hpp"
#include "duorec/encoder.hpp"
#include "duorec/metrics.hpp"

namespace duorec {

struct TrainConfig {
  std::size_t d = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t max_len = 50;
  std::size_t batch_size = 256;
  double lr = 0.001;
  double lambda = 0.1;
  double tau = 1.0;
  double emb_dropout = 0.1;
  double hidden_dropout = 0.1;
  PositiveMode positive_mode = PositiveMode::duo;
  std::size_t epochs = 100;
  std::uint64_t seed = 2022;
  std::size_t early_stop_patience = 10;
  /// L2-normalize representations inside the regularizer (ablation only).
  bool nce_normalize = false;

  void validate() const;
  EncoderConfig encoder(std::size_t num_items) const;
};

/// Flat JSON object with TrainConfig field names. Missing keys keep their
/// defaults; unknown keys and wrong types are ConfigErrors.
TrainConfig config_from_json(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const TrainConfig& config);
/// Sets one field from its textual value, e.g. ("lambda", "0.3").
void set_config_field(TrainConfig& config, const std::string& key, const std::string& value);

struct AdamHyper {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
};

/// One bias-corrected Adam step at step number `t` (>= 1) on a flat buffer.
void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                 std::span<double> v, const AdamHyper& hyper, std::uint64_t t);

/// Steps every tensor of `params` using its accumulated gradient (missing
/// gradients count as zero), then forces the pad row of the item table back
/// to zero. Moment buffers are created on first use.
void adam_step(EncoderParams& params, AdamState& state, const AdamHyper& hyper);

struct Checkpoint {
  TrainConfig config;
  std::size_t num_items = 0;
  EncoderParams params;
  AdamState adam;
  std::size_t epoch = 0;
  double best_valid_hr5 = 0.0;
  std::uint64_t global_step = 0;
  std::uint64_t sampler_counter = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Deep copy; tensors do not alias the source.
Checkpoint clone(const Checkpoint& ckpt);

struct EpochRecord {
  std::size_t epoch = 0;
  double rec_loss = 0.0;
  double reg_loss = 0.0;
  double align = 0.0;
  double uniformity = 0.0;
  double valid_hr5 = 0.0;
};

struct StepRecord {
  std::uint64_t step = 0;
  double rec = 0.0;
  double reg = 0.0;
  double total = 0.0;
  double lambda = 0.0;
};

struct TrainOptions {
  std::ostream* log = nullptr;
  std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
  /// Best-validation state.
  Checkpoint best;
  std::vector<EpochRecord> curves;
  bool diverged = false;
  bool early_stopped = false;
};

TrainResult train(const TrainConfig& config, const SplitDataset& data, const TrainOptions& options = {});

enum class SplitName { valid, test };
SplitName parse_split(const std::string& name);

/// Eval-mode representations of the given examples, batched.
Tensor represent(const EncoderParams& params, const EncoderConfig& config, const SplitDataset& data,
                 std::span<const Example> examples);

EvalReport evaluate(const EncoderParams& params, const EncoderConfig& config, const SplitDataset& data,
                    SplitName split, std::span<const std::size_t> ks = std::vector<std::size_t>{5, 10});
EvalReport evaluate(const Checkpoint& ckpt, const SplitDataset& data, SplitName split,
                    std::span<const std::size_t> ks = std::vector<std::size_t>{5, 10});

// --- artefact files ----------------------------------------------------------

void write_curves_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& curves);
/// Keys hr@K and ndcg@K with six decimals.
void write_eval_json(const std::filesystem::path& path, const EvalReport& report);
void write_spectrum_csv(const std::filesystem::path& path, std::span<const double> normalized);
void write_diagnostics_csv(const std::filesystem::path& path, const std::vector<ProjectedItem>& points);

}  // namespace duorec
