// SPDX-License-Identifier: Apache-2.0
#include "duorec/data.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "duorec/errors.hpp"

namespace duorec {

namespace {

std::vector<std::string_view> split_on(std::string_view line, std::string_view sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + sep.size();
  }
  return out;
}

std::int64_t parse_int64(std::string_view s, std::size_t line, const char* what) {
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw ParseError(std::string("invalid ") + what + " '" + std::string(s) + "'", line);
  }
  return v;
}

std::size_t parse_size(std::string_view s, std::size_t line, const char* what) {
  std::int64_t v = parse_int64(s, line, what);
  if (v < 0) throw ParseError(std::string("negative ") + what, line);
  return static_cast<std::size_t>(v);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::vector<std::string> parse_csv_line(std::string_view line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw ParseError("unterminated quote", line_no);
  fields.push_back(std::move(cur));
  return fields;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace

EventFormat parse_event_format(std::string_view id) {
  if (id == "tsv-uit") return EventFormat::tsv_uit;
  if (id == "ml-1m") return EventFormat::ml_1m;
  throw ConfigError("unknown event-log format '" + std::string(id) + "' (expected tsv-uit or ml-1m)");
}

std::vector<RawEvent> ingest(std::istream& in, EventFormat format) {
  std::vector<RawEvent> events;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    std::vector<std::string_view> f;
    if (format == EventFormat::tsv_uit) {
      f = split_on(line, "\t");
      if (f.size() != 3) {
        throw ParseError("expected user<TAB>item<TAB>timestamp, found " + std::to_string(f.size()) + " field(s)",
                         line_no);
      }
      events.push_back({std::string(f[0]), std::string(f[1]), parse_int64(f[2], line_no, "timestamp")});
    } else {
      f = split_on(line, "::");
      if (f.size() != 4) {
        throw ParseError("expected user::item::rating::timestamp, found " + std::to_string(f.size()) +
                             " field(s)",
                         line_no);
      }
      events.push_back({std::string(f[0]), std::string(f[1]), parse_int64(f[3], line_no, "timestamp")});
    }
    if (events.back().user_id.empty() || events.back().item_id.empty()) {
      throw ParseError("empty user or item id", line_no);
    }
  }
  return events;
}

std::vector<RawEvent> ingest(const std::filesystem::path& path, EventFormat format) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return ingest(in, format);
}

SplitRole UserSequence::role_at(std::size_t pos) const {
  const std::size_t n = items.size();
  if (pos + 1 == n) return SplitRole::test;
  if (pos + 2 == n) return SplitRole::valid;
  return SplitRole::train;
}

Corpus build_sequences(const std::vector<RawEvent>& events, std::size_t min_count, std::size_t max_len) {
  if (min_count < 1) throw ConfigError("build_sequences: min_count must be >= 1");
  if (max_len < 1) throw ConfigError("build_sequences: max_len must be >= 1");

  // Intern ids in file order.
  std::unordered_map<std::string, std::size_t> user_ix, item_ix;
  std::vector<std::size_t> ev_user(events.size()), ev_item(events.size());
  for (std::size_t e = 0; e < events.size(); ++e) {
    ev_user[e] = user_ix.try_emplace(events[e].user_id, user_ix.size()).first->second;
    ev_item[e] = item_ix.try_emplace(events[e].item_id, item_ix.size()).first->second;
  }

  std::vector<unsigned char> alive(events.size(), 1);
  std::vector<std::size_t> ucount(user_ix.size()), icount(item_ix.size());
  bool changed = true;
  while (changed) {
    std::fill(ucount.begin(), ucount.end(), 0);
    std::fill(icount.begin(), icount.end(), 0);
    for (std::size_t e = 0; e < events.size(); ++e) {
      if (!alive[e]) continue;
      ++ucount[ev_user[e]];
      ++icount[ev_item[e]];
    }
    changed = false;
    for (std::size_t e = 0; e < events.size(); ++e) {
      if (alive[e] && (ucount[ev_user[e]] < min_count || icount[ev_item[e]] < min_count)) {
        alive[e] = 0;
        changed = true;
      }
    }
  }

  Corpus corpus;
  ItemVocab& vocab = corpus.vocab;
  vocab.external.push_back("<pad>");
  std::vector<std::size_t> dense_item(item_ix.size(), 0);
  std::vector<std::size_t> dense_user(user_ix.size(), SIZE_MAX);
  std::vector<std::vector<std::size_t>> per_user;
  std::size_t actions = 0;
  for (std::size_t e = 0; e < events.size(); ++e) {
    if (!alive[e]) continue;
    ++actions;
    if (dense_item[ev_item[e]] == 0) {
      dense_item[ev_item[e]] = vocab.external.size();
      vocab.id_of.emplace(events[e].item_id, vocab.external.size());
      vocab.external.push_back(events[e].item_id);
    }
    if (dense_user[ev_user[e]] == SIZE_MAX) {
      dense_user[ev_user[e]] = per_user.size();
      per_user.emplace_back();
    }
    per_user[dense_user[ev_user[e]]].push_back(e);
  }
  if (per_user.empty()) {
    throw DegenerateInputError("build_sequences: every event was filtered out (min_count=" +
                               std::to_string(min_count) + ")");
  }

  corpus.stats.users = per_user.size();
  corpus.stats.items = vocab.size() - 1;
  corpus.stats.actions = actions;
  corpus.stats.avg_length = static_cast<double>(actions) / static_cast<double>(per_user.size());

  vocab.frequency.assign(vocab.size(), 0);
  corpus.sequences.reserve(per_user.size());
  for (std::size_t u = 0; u < per_user.size(); ++u) {
    auto& evs = per_user[u];
    std::stable_sort(evs.begin(), evs.end(),
                     [&](std::size_t a, std::size_t b) { return events[a].timestamp < events[b].timestamp; });
    const std::size_t start = evs.size() > max_len ? evs.size() - max_len : 0;
    UserSequence seq;
    seq.user = u;
    seq.user_id = events[evs.front()].user_id;
    for (std::size_t i = start; i < evs.size(); ++i) seq.items.push_back(dense_item[ev_item[evs[i]]]);
    for (std::size_t p = 0; p < seq.items.size(); ++p) {
      if (seq.role_at(p) == SplitRole::train) ++vocab.frequency[seq.items[p]];
    }
    corpus.sequences.push_back(std::move(seq));
  }
  return corpus;
}

std::span<const ItemId> SplitDataset::prefix(const Example& e) const {
  return std::span<const ItemId>(sequences[e.sequence].items).first(e.target_pos);
}

ItemId SplitDataset::target(const Example& e) const { return sequences[e.sequence].items[e.target_pos]; }

SplitDataset split_leave_one_out(std::vector<UserSequence> sequences, std::size_t num_items) {
  SplitDataset ds;
  ds.num_items = num_items;
  for (auto& s : sequences) {
    if (s.items.size() < 3) {
      ++ds.dropped_short;
      continue;
    }
    for (ItemId it : s.items) {
      if (it == kPadIndex || it >= num_items) {
        throw IndexError("split_leave_one_out: item index " + std::to_string(it) + " outside [1, " +
                         std::to_string(num_items) + ")");
      }
    }
    const std::size_t idx = ds.sequences.size();
    const std::size_t n = s.items.size();
    ds.test.push_back({idx, n - 1});
    ds.valid.push_back({idx, n - 2});
    for (std::size_t p = 1; p + 2 < n; ++p) ds.train.push_back({idx, p});
    ds.sequences.push_back(std::move(s));
  }
  if (ds.dropped_short > 0) {
    std::clog << "split_leave_one_out: dropped " << ds.dropped_short << " sequence(s) shorter than 3\n";
  }
  return ds;
}

void TargetIndex::add(ItemId target, std::size_t example) {
  if (target >= by_target_.size()) {
    throw IndexError("TargetIndex: target " + std::to_string(target) + " out of range");
  }
  by_target_[target].push_back(example);
}

std::span<const std::size_t> TargetIndex::examples_for(ItemId target) const {
  if (target >= by_target_.size()) return {};
  return by_target_[target];
}

std::size_t TargetIndex::num_keys() const {
  return static_cast<std::size_t>(
      std::count_if(by_target_.begin(), by_target_.end(), [](const auto& v) { return !v.empty(); }));
}

TargetIndex build_target_index(std::span<const ItemId> targets, std::size_t num_items) {
  TargetIndex index(num_items);
  for (std::size_t i = 0; i < targets.size(); ++i) index.add(targets[i], i);
  return index;
}

TargetIndex build_target_index(const SplitDataset& data) {
  std::vector<ItemId> targets;
  targets.reserve(data.train.size());
  for (const Example& e : data.train) targets.push_back(data.target(e));
  return build_target_index(targets, data.num_items);
}

IdMatrix left_pad(std::span<const std::span<const ItemId>> rows, std::size_t width) {
  IdMatrix m;
  m.rows = rows.size();
  m.cols = width;
  m.ids.assign(m.rows * width, kPadIndex);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    const std::size_t take = std::min(row.size(), width);
    std::copy(row.end() - static_cast<std::ptrdiff_t>(take), row.end(),
              m.ids.begin() + static_cast<std::ptrdiff_t>(r * width + width - take));
  }
  return m;
}

NegativeMask NegativeMask::from_targets(std::span<const ItemId> row_targets) {
  NegativeMask m;
  m.slots_ = 2 * row_targets.size();
  m.admit_.assign(m.slots_ * m.slots_, 0);
  for (std::size_t a = 0; a < m.slots_; ++a)
    for (std::size_t b = 0; b < m.slots_; ++b)
      m.admit_[a * m.slots_ + b] = row_targets[a / 2] != row_targets[b / 2] ? 1 : 0;
  return m;
}

std::size_t NegativeMask::admissible_count(std::size_t a) const {
  return static_cast<std::size_t>(std::count(admit_.begin() + static_cast<std::ptrdiff_t>(a * slots_),
                                             admit_.begin() + static_cast<std::ptrdiff_t>((a + 1) * slots_), 1));
}

Batch make_batch(const SplitDataset& data, std::span<const std::size_t> example_ids,
                 std::span<const std::size_t> partner_ids, std::size_t width) {
  if (example_ids.size() != partner_ids.size()) throw ContractError("make_batch: partner count mismatch");
  Batch b;
  std::vector<std::span<const ItemId>> rows, partner_rows;
  for (std::size_t i = 0; i < example_ids.size(); ++i) {
    const Example& e = data.train.at(example_ids[i]);
    const Example& p = data.train.at(partner_ids[i]);
    rows.push_back(data.prefix(e));
    partner_rows.push_back(data.prefix(p));
    b.lengths.push_back(std::min(e.target_pos, width));
    b.targets.push_back(data.target(e));
    b.positive_targets.push_back(data.target(p));
  }
  b.item_ids = left_pad(rows, width);
  b.positive_ids = left_pad(partner_rows, width);
  b.collision_mask = NegativeMask::from_targets(b.targets);
  b.example_ids.assign(example_ids.begin(), example_ids.end());
  b.partner_ids.assign(partner_ids.begin(), partner_ids.end());
  return b;
}

IdMatrix input_matrix(const SplitDataset& data, std::span<const Example> examples, std::size_t width) {
  std::vector<std::span<const ItemId>> rows;
  rows.reserve(examples.size());
  for (const Example& e : examples) rows.push_back(data.prefix(e));
  return left_pad(rows, width);
}

void shuffle_in_place(std::vector<std::size_t>& v, RngStream& stream) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(stream.next_below(i));
    std::swap(v[i - 1], v[j]);
  }
}

BatchSampler::BatchSampler(const SplitDataset& data, const TargetIndex& index, std::size_t batch_size,
                           std::size_t width, RngStream stream)
    : data_(&data), index_(&index), batch_size_(batch_size), width_(width), stream_(std::move(stream)) {
  if (batch_size_ < 1) throw ConfigError("BatchSampler: batch_size must be >= 1");
}

void BatchSampler::start_epoch() {
  order_.resize(data_->train.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  shuffle_in_place(order_, stream_);
  cursor_ = 0;
  started_ = true;
}

std::size_t BatchSampler::batches_per_epoch() const {
  return (data_->train.size() + batch_size_ - 1) / batch_size_;
}

std::optional<Batch> BatchSampler::next_batch() {
  if (!started_) start_epoch();
  if (cursor_ >= order_.size()) {
    started_ = false;
    return std::nullopt;
  }
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  std::vector<std::size_t> ids(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                               order_.begin() + static_cast<std::ptrdiff_t>(end));
  cursor_ = end;
  std::vector<std::size_t> partners(ids.size());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const ItemId target = data_->target(data_->train[ids[r]]);
    auto group = index_->examples_for(target);
    if (group.size() <= 1) {
      partners[r] = ids[r];
      continue;
    }
    // Uniform over the group minus the anchor itself.
    std::size_t pick = static_cast<std::size_t>(stream_.next_below(group.size() - 1));
    const auto self = std::find(group.begin(), group.end(), ids[r]);
    const std::size_t self_pos = static_cast<std::size_t>(self - group.begin());
    if (self != group.end() && pick >= self_pos) ++pick;
    partners[r] = group[pick];
  }
  return make_batch(*data_, ids, partners, width_);
}

// --- persistence -----------------------------------------------------------

void write_vocab_csv(const std::filesystem::path& path, const ItemVocab& vocab) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "index,item_id,frequency\n";
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    out << i << ',' << csv_field(vocab.external[i]) << ',' << (i < vocab.frequency.size() ? vocab.frequency[i] : 0)
        << '\n';
  }
}

ItemVocab read_vocab_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw ParseError("missing header", 1);
  strip_cr(line);
  if (line != "index,item_id,frequency") throw ParseError("unexpected vocab header '" + line + "'", 1);
  ItemVocab vocab;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    auto f = parse_csv_line(line, line_no);
    if (f.size() != 3) throw ParseError("expected 3 fields", line_no);
    const std::size_t idx = parse_size(f[0], line_no, "index");
    if (idx != vocab.external.size()) throw ParseError("indices must be contiguous from 0", line_no);
    vocab.external.push_back(f[1]);
    vocab.frequency.push_back(parse_int64(f[2], line_no, "frequency"));
    if (idx != kPadIndex) vocab.id_of.emplace(f[1], idx);
  }
  if (vocab.external.empty()) throw ParseError("vocabulary has no pad row", line_no);
  return vocab;
}

void write_sequences_tsv(const std::filesystem::path& path, const std::vector<UserSequence>& sequences) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& s : sequences) {
    out << s.user_id << '\t';
    for (std::size_t i = 0; i < s.items.size(); ++i) out << (i ? " " : "") << s.items[i];
    out << '\n';
  }
}

std::vector<UserSequence> read_sequences_tsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<UserSequence> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("expected user<TAB>items", line_no);
    UserSequence s;
    s.user = out.size();
    s.user_id = line.substr(0, tab);
    for (std::string_view tok : split_on(std::string_view(line).substr(tab + 1), " ")) {
      if (tok.empty()) continue;
      s.items.push_back(parse_size(tok, line_no, "item index"));
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_prepared(const std::filesystem::path& dir, const Corpus& corpus) {
  std::filesystem::create_directories(dir);
  write_sequences_tsv(dir / "sequences.tsv", corpus.sequences);
  write_vocab_csv(dir / "vocab.csv", corpus.vocab);
  nlohmann::json stats = {{"users", corpus.stats.users},
                          {"items", corpus.stats.items},
                          {"actions", corpus.stats.actions},
                          {"avg_length", corpus.stats.avg_length}};
  std::ofstream out(dir / "stats.json");
  if (!out) throw IoError("cannot write " + (dir / "stats.json").string());
  out << stats.dump(2) << '\n';
}

Corpus read_prepared(const std::filesystem::path& dir) {
  Corpus c;
  c.vocab = read_vocab_csv(dir / "vocab.csv");
  c.sequences = read_sequences_tsv(dir / "sequences.tsv");
  for (const auto& s : c.sequences) {
    for (ItemId it : s.items) {
      if (it == kPadIndex || it >= c.vocab.size()) {
        throw IndexError("read_prepared: item index " + std::to_string(it) + " not in vocabulary");
      }
    }
  }
  std::ifstream in(dir / "stats.json");
  if (in) {
    auto j = nlohmann::json::parse(in);
    c.stats.users = j.value("users", std::size_t{0});
    c.stats.items = j.value("items", std::size_t{0});
    c.stats.actions = j.value("actions", std::size_t{0});
    c.stats.avg_length = j.value("avg_length", 0.0);
  }
  return c;
}

}  // namespace duorec
