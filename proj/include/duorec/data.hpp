// SPDX-License-Identifier: Apache-2.0
//
// Interaction-log ingestion, k-core filtering, leave-one-out splitting and
// batch assembly with same-target partner sampling.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "duorec/rng.hpp"

namespace duorec {

using ItemId = std::size_t;
inline constexpr ItemId kPadIndex = 0;

struct RawEvent {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;
};

enum class EventFormat {
  tsv_uit,  // user<TAB>item<TAB>timestamp
  ml_1m,    // user::item::rating::timestamp
};

EventFormat parse_event_format(std::string_view id);

std::vector<RawEvent> ingest(std::istream& in, EventFormat format);
std::vector<RawEvent> ingest(const std::filesystem::path& path, EventFormat format);

struct ItemVocab {
  static constexpr ItemId pad_index = kPadIndex;

  std::unordered_map<std::string, ItemId> id_of;
  /// external[i] is the item string for dense index i; external[0] is the pad.
  std::vector<std::string> external;
  /// Occurrences of each index in the training portion of the sequences.
  std::vector<std::int64_t> frequency;

  /// Number of indices including the pad.
  std::size_t size() const { return external.size(); }
};

enum class SplitRole { train, valid, test };

struct UserSequence {
  std::size_t user = 0;
  std::string user_id;
  /// Time-ascending item indices.
  std::vector<ItemId> items;

  /// Leave-one-out role of the interaction at `pos`.
  SplitRole role_at(std::size_t pos) const;
};

struct CorpusStats {
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t actions = 0;
  /// Mean sequence length before truncation to max_len.
  double avg_length = 0.0;
};

struct Corpus {
  std::vector<UserSequence> sequences;
  ItemVocab vocab;
  CorpusStats stats;
};

/// Iterative k-core filter on users and items, per-user time ordering (ties
/// keep file order), truncation to the most recent `max_len` items.
Corpus build_sequences(const std::vector<RawEvent>& events, std::size_t min_count = 5,
                       std::size_t max_len = 50);

/// One next-item example: the prefix items[0, target_pos) predicts
/// items[target_pos] of sequence `sequence`.
struct Example {
  std::size_t sequence = 0;
  std::size_t target_pos = 0;
};

struct SplitDataset {
  std::vector<UserSequence> sequences;
  /// Vocabulary size including the pad index.
  std::size_t num_items = 0;
  std::vector<Example> train;
  std::vector<Example> valid;
  std::vector<Example> test;
  std::size_t dropped_short = 0;

  std::span<const ItemId> prefix(const Example& e) const;
  ItemId target(const Example& e) const;
};

/// Last item is the test target, second-to-last the validation target, and
/// every next-item pair whose target precedes the validation position is a
/// training example. Sequences shorter than 3 are dropped and counted.
SplitDataset split_leave_one_out(std::vector<UserSequence> sequences, std::size_t num_items);

/// Partition of training examples by target item.
class TargetIndex {
 public:
  TargetIndex() = default;
  explicit TargetIndex(std::size_t num_items) : by_target_(num_items) {}

  void add(ItemId target, std::size_t example);
  std::span<const std::size_t> examples_for(ItemId target) const;
  std::size_t num_keys() const;
  std::size_t num_items() const { return by_target_.size(); }

 private:
  std::vector<std::vector<std::size_t>> by_target_;
};

/// targets[i] is the label of training example i.
TargetIndex build_target_index(std::span<const ItemId> targets, std::size_t num_items);
TargetIndex build_target_index(const SplitDataset& data);

/// Row-major matrix of item ids.
struct IdMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<ItemId> ids;

  ItemId at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
};

/// Left-pads (and left-truncates) each prefix to `width` columns so the
/// newest item sits in the last column.
IdMatrix left_pad(std::span<const std::span<const ItemId>> rows, std::size_t width);

/// Admissible-negative relation over 2B interleaved representation slots.
/// Slot 2i and 2i+1 belong to batch row i. admits(a, b) is false whenever
/// the rows of a and b share a target, which covers the diagonal and the
/// own-pair slot.
class NegativeMask {
 public:
  NegativeMask() = default;
  static NegativeMask from_targets(std::span<const ItemId> row_targets);

  std::size_t slots() const { return slots_; }
  bool admits(std::size_t a, std::size_t b) const { return admit_[a * slots_ + b] != 0; }
  std::size_t admissible_count(std::size_t a) const;
  std::span<const unsigned char> raw() const { return admit_; }

 private:
  std::size_t slots_ = 0;
  std::vector<unsigned char> admit_;
};

struct Batch {
  IdMatrix item_ids;
  std::vector<std::size_t> lengths;
  std::vector<ItemId> targets;
  IdMatrix positive_ids;
  std::vector<ItemId> positive_targets;
  NegativeMask collision_mask;
  std::vector<std::size_t> example_ids;
  std::vector<std::size_t> partner_ids;

  std::size_t size() const { return targets.size(); }
};

/// Batch over explicit training example ids and partner ids.
Batch make_batch(const SplitDataset& data, std::span<const std::size_t> example_ids,
                 std::span<const std::size_t> partner_ids, std::size_t width);

/// Input matrix and targets for arbitrary examples (evaluation).
IdMatrix input_matrix(const SplitDataset& data, std::span<const Example> examples, std::size_t width);

/// Shuffled, without-replacement pass over the training examples. Each row
/// gets a partner drawn uniformly from the other examples that share its
/// target; a row whose target is unique is its own partner.
class BatchSampler {
 public:
  BatchSampler(const SplitDataset& data, const TargetIndex& index, std::size_t batch_size,
               std::size_t width, RngStream stream);

  /// Reshuffles the example order. Called automatically on first use.
  void start_epoch();
  /// Next batch of the current epoch, or nullopt when the epoch is done.
  std::optional<Batch> next_batch();

  std::size_t batches_per_epoch() const;
  const RngStream& stream() const { return stream_; }
  void set_stream_counter(std::uint64_t c) { stream_.set_counter(c); }

 private:
  const SplitDataset* data_;
  const TargetIndex* index_;
  std::size_t batch_size_;
  std::size_t width_;
  RngStream stream_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  bool started_ = false;
};

/// Fisher-Yates shuffle driven by `stream`.
void shuffle_in_place(std::vector<std::size_t>& v, RngStream& stream);

// --- persistence -----------------------------------------------------------

/// CSV `index,item_id,frequency` with header; the pad row is index 0.
void write_vocab_csv(const std::filesystem::path& path, const ItemVocab& vocab);
ItemVocab read_vocab_csv(const std::filesystem::path& path);

/// One line per user: `user_id<TAB>i1 i2 i3 ...` with dense item indices.
void write_sequences_tsv(const std::filesystem::path& path, const std::vector<UserSequence>& sequences);
std::vector<UserSequence> read_sequences_tsv(const std::filesystem::path& path);

/// Writes sequences.tsv, vocab.csv and stats.json into `dir`.
void write_prepared(const std::filesystem::path& dir, const Corpus& corpus);
Corpus read_prepared(const std::filesystem::path& dir);

}  // namespace duorec
