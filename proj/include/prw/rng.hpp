#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace prw {

using Rng = std::mt19937_64;

// SplitMix64 finalizer; used to derive independent sub-stream seeds.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Named sub-streams of a master seed: "data", "noise", "init", "order", ...
// Further integer coordinates (stage, step, sample index) fork the stream.
inline std::uint64_t stream_seed(std::uint64_t master, std::string_view name,
                                 std::initializer_list<std::uint64_t> coords = {}) {
  std::uint64_t s = mix64(master ^ mix64(hash_name(name)));
  for (auto c : coords) s = mix64(s ^ mix64(c + 0x632be59bd9b4e019ULL));
  return s;
}

inline Rng make_stream(std::uint64_t master, std::string_view name,
                       std::initializer_list<std::uint64_t> coords = {}) {
  return Rng(stream_seed(master, name, coords));
}

inline double standard_normal(Rng& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline int uniform_int(Rng& rng, int lo, int hi_inclusive) {
  return std::uniform_int_distribution<int>(lo, hi_inclusive)(rng);
}

}  // namespace prw
