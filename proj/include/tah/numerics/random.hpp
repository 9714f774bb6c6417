#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace tah {

using Rng = std::mt19937_64;

/// splitmix64 finaliser; mixes a seed with a stream tag so independent
/// consumers (weights, adapters, shuffles, noise) draw from unrelated
/// streams of the same run seed.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0) {
  return mix64(mix64(seed ^ fnv1a(stream)) + index);
}

template <class T>
void fill_normal(std::span<T> out, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : out) v = static_cast<T>(dist(rng));
}

}  // namespace tah
