#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include <Eigen/Dense>

namespace scvm {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

// Seeded random stream. Child streams are derived from the parent key and a
// label only, so the same (seed, label path) always reproduces the same draws
// no matter how much the parent has been consumed.
class Stream {
 public:
  explicit Stream(std::uint64_t seed = 0) : key_(detail::splitmix64(seed)), engine_(make_engine(key_)) {}

  Stream split(std::string_view label) const { return from_key(detail::splitmix64(key_ ^ detail::fnv1a(label))); }

  Stream split(std::string_view label, std::uint64_t index) const {
    return from_key(detail::splitmix64(detail::splitmix64(key_ ^ detail::fnv1a(label)) + index));
  }

  std::uint64_t key() const { return key_; }

  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_(engine_); }
  double normal() { return normal_(engine_); }

  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }

  Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    // Row-major fill so that a prefix of rows does not depend on `cols` ordering quirks.
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = normal();
    return m;
  }

  Eigen::MatrixXd uniform_matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = uniform(lo, hi);
    return m;
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  static Stream from_key(std::uint64_t key) {
    Stream s;
    s.key_ = key;
    s.engine_ = make_engine(key);
    return s;
  }

  static std::mt19937_64 make_engine(std::uint64_t key) {
    std::seed_seq seq{static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)};
    return std::mt19937_64(seq);
  }

  std::uint64_t key_;
  std::mt19937_64 engine_;
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace scvm
