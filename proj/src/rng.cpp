// SPDX-License-Identifier: Apache-2.0
#include "duorec/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace duorec {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_label(std::string_view label) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return splitmix64(h);
}

RngStream::RngStream(std::uint64_t seed, std::string label, std::uint64_t counter)
    : seed_(seed), label_(std::move(label)), label_hash_(hash_label(label_)), counter_(counter) {}

RngStream RngStream::child(std::string_view suffix) const {
  std::string l = label_;
  l += '.';
  l += suffix;
  return RngStream(seed_, std::move(l));
}

std::uint64_t RngStream::next_u64() {
  // Two rounds keep nearby counters and nearby seeds decorrelated.
  std::uint64_t key = splitmix64(seed_ ^ label_hash_);
  return splitmix64(key ^ splitmix64(counter_++));
}

double RngStream::next_uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t RngStream::next_below(std::uint64_t bound) {
  if (bound == 0) throw std::invalid_argument("RngStream::next_below: bound must be positive");
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % bound;
}

double RngStream::next_normal() {
  double u1 = next_uniform();
  double u2 = next_uniform();
  if (u1 < 0x1.0p-60) u1 = 0x1.0p-60;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace duorec
