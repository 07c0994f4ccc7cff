#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace rose {

// SplitMix64 finaliser; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seed for child stream `keys...` of `seed`. Identical inputs give identical
// seeds regardless of call order or thread.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = mix64(seed);
  for (std::uint64_t k : keys) h = mix64(h ^ mix64(k + 0x632be59bd9b4e019ULL));
  return h;
}

constexpr std::uint64_t hash_name(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

using Engine = std::mt19937_64;

inline Engine make_engine(std::uint64_t seed) { return Engine(mix64(seed)); }

// Uniform integer in [0, n) without the libstdc++ distribution object, so the
// stream is stable across standard library versions.
inline std::size_t uniform_index(Engine& eng, std::size_t n) {
  // Lemire's nearly-divisionless method.
  std::uint64_t x = eng();
  __uint128_t m = static_cast<__uint128_t>(x) * n;
  auto low = static_cast<std::uint64_t>(m);
  if (low < n) {
    std::uint64_t t = (0 - static_cast<std::uint64_t>(n)) % n;
    while (low < t) {
      x = eng();
      m = static_cast<__uint128_t>(x) * n;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::size_t>(m >> 64);
}

// k indices drawn from [0, n) without replacement (partial Fisher-Yates).
inline std::vector<std::size_t> sample_without_replacement(Engine& eng, std::size_t n,
                                                           std::size_t k) {
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  if (k > n) k = n;
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t j = i + uniform_index(eng, n - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

inline std::vector<std::size_t> sample_with_replacement(Engine& eng, std::size_t n,
                                                        std::size_t k) {
  std::vector<std::size_t> out(k);
  for (auto& v : out) v = uniform_index(eng, n);
  return out;
}

template <typename T>
void shuffle(Engine& eng, std::span<T> v) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = uniform_index(eng, i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace rose
