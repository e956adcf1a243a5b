// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace duorec {

/// Counter-based random stream. A draw is a pure function of
/// (seed, label, counter), so two streams never share state and a stream
/// can be reproduced from its triple alone.
class RngStream {
 public:
  RngStream() = default;
  RngStream(std::uint64_t seed, std::string label, std::uint64_t counter = 0);

  /// New stream labelled "<label>.<suffix>" with the same seed and a fresh
  /// counter.
  RngStream child(std::string_view suffix) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of precision.
  double next_uniform();
  /// Uniform integer in [0, bound). bound must be > 0.
  std::uint64_t next_below(std::uint64_t bound);
  /// Standard normal via Box-Muller (two draws per call).
  double next_normal();

  std::uint64_t seed() const { return seed_; }
  const std::string& label() const { return label_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

 private:
  std::uint64_t seed_ = 0;
  std::string label_;
  std::uint64_t label_hash_ = 0;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);
/// FNV-1a, finalized with splitmix64.
std::uint64_t hash_label(std::string_view label);

}  // namespace duorec
