// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "duorec/data.hpp"

namespace duorec {

/// Clustered next-item corpus. Every user prefers one cluster. A step
/// follows the cluster's fixed successor chain with `follow_prob`, jumps to
/// a uniformly random catalog item with `noise_prob`, and otherwise draws
/// from the cluster with Zipf(`zipf_exponent`) popularity, so low-frequency
/// items exist alongside popular ones.
struct SyntheticSpec {
  std::size_t items = 200;
  std::size_t clusters = 10;
  std::size_t sequences = 500;
  std::size_t min_len = 8;
  std::size_t max_len = 20;
  double follow_prob = 0.6;
  double noise_prob = 0.05;
  double zipf_exponent = 1.0;
  std::uint64_t seed = 1;
};

/// Events with user ids "u<n>", item ids "i<n>" and per-user increasing
/// timestamps.
std::vector<RawEvent> synthetic_events(const SyntheticSpec& spec);

}  // namespace duorec
