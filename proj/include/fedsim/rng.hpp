#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedsim {

// Stream identifiers for seed derivation. Each consumer of randomness draws
// from its own stream so that adding clients or rounds never shifts the
// draws seen by another consumer.
enum class Stream : std::uint64_t {
  init = 1,
  data = 2,
  partition = 3,
  profiles = 4,
  latency = 5,
  dropout = 6,
  shuffle = 7,
  failure_point = 8,
  split = 9,
  sweep = 10,
  client_train = 11,
};

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Counter-based split: hashes a path of counters under a parent seed.
constexpr std::uint64_t derive_seed(std::uint64_t parent,
                                    std::initializer_list<std::uint64_t> path) noexcept {
  std::uint64_t s = mix64(parent);
  for (std::uint64_t p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

constexpr std::uint64_t derive_seed(std::uint64_t parent, Stream stream,
                                    std::initializer_list<std::uint64_t> path = {}) noexcept {
  std::uint64_t s = derive_seed(parent, {static_cast<std::uint64_t>(stream)});
  for (std::uint64_t p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

using Engine = std::mt19937_64;

inline Engine make_engine(std::uint64_t seed) { return Engine(seed); }

// Uniform in [0, 1) built from the top 53 bits; independent of the standard
// library's distribution implementation.
inline double uniform01(Engine& e) {
  return static_cast<double>(e() >> 11) * 0x1.0p-53;
}

}  // namespace fedsim
