// SPDX-License-Identifier: Apache-2.0
#include "duorec/synthetic.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "duorec/errors.hpp"

namespace duorec {

namespace {

std::size_t draw_weighted(const std::vector<double>& cdf, RngStream& rng) {
  const double u = rng.next_uniform() * cdf.back();
  std::size_t lo = 0, hi = cdf.size() - 1;
  while (lo < hi) {
    const std::size_t mid = (lo + hi) / 2;
    if (cdf[mid] > u) hi = mid;
    else lo = mid + 1;
  }
  return lo;
}

}  // namespace

std::vector<RawEvent> synthetic_events(const SyntheticSpec& spec) {
  if (spec.clusters == 0 || spec.items < spec.clusters) {
    throw ConfigError("synthetic_events: need at least one item per cluster");
  }
  if (spec.min_len < 1 || spec.min_len > spec.max_len) {
    throw ConfigError("synthetic_events: invalid length range");
  }
  RngStream rng(spec.seed, "synthetic");
  const std::size_t per = spec.items / spec.clusters;

  // Cluster c owns items [c*per, (c+1)*per); leftovers join the last cluster.
  std::vector<std::vector<std::size_t>> members(spec.clusters);
  for (std::size_t i = 0; i < spec.items; ++i) members[std::min(i / per, spec.clusters - 1)].push_back(i);

  std::vector<std::vector<double>> popularity_cdf(spec.clusters);
  std::vector<std::vector<std::size_t>> successor(spec.clusters);
  for (std::size_t c = 0; c < spec.clusters; ++c) {
    const std::size_t n = members[c].size();
    std::vector<std::size_t> rank(n);
    std::iota(rank.begin(), rank.end(), std::size_t{0});
    shuffle_in_place(rank, rng);
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      acc += 1.0 / std::pow(static_cast<double>(rank[k] + 1), spec.zipf_exponent);
      popularity_cdf[c].push_back(acc);
    }
    std::vector<std::size_t> cycle(n);
    std::iota(cycle.begin(), cycle.end(), std::size_t{0});
    shuffle_in_place(cycle, rng);
    successor[c].assign(n, 0);
    for (std::size_t k = 0; k < n; ++k) successor[c][cycle[k]] = cycle[(k + 1) % n];
  }

  std::vector<RawEvent> events;
  for (std::size_t u = 0; u < spec.sequences; ++u) {
    const std::size_t c = static_cast<std::size_t>(rng.next_below(spec.clusters));
    const std::size_t len =
        spec.min_len + static_cast<std::size_t>(rng.next_below(spec.max_len - spec.min_len + 1));
    std::size_t local = draw_weighted(popularity_cdf[c], rng);
    std::size_t item = members[c][local];
    bool in_cluster = true;
    for (std::size_t t = 0; t < len; ++t) {
      if (t > 0) {
        const double r = rng.next_uniform();
        if (r < spec.follow_prob && in_cluster) {
          local = successor[c][local];
          item = members[c][local];
        } else if (r < spec.follow_prob + spec.noise_prob) {
          item = static_cast<std::size_t>(rng.next_below(spec.items));
          in_cluster = false;
        } else {
          local = draw_weighted(popularity_cdf[c], rng);
          item = members[c][local];
          in_cluster = true;
        }
      }
      events.push_back({"u" + std::to_string(u), "i" + std::to_string(item), static_cast<std::int64_t>(t)});
    }
  }
  return events;
}

}  // namespace duorec
