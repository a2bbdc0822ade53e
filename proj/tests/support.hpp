#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "qamret/qamret.hpp"

namespace qamret::testing {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(gen_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(gen_); }
  std::size_t index(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(gen_);
  }
  bool coin(double p) { return uniform() < p; }
  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

/// Nonnegative tensor where each value is zero with probability `sparsity`.
inline CfmTensor random_tensor(Rng& rng, std::size_t h, std::size_t w, std::size_t d, double sparsity = 0.3) {
  std::vector<float> v(h * w * d);
  for (auto& x : v) x = rng.coin(sparsity) ? 0.0f : static_cast<float>(rng.uniform(0.01, 2.0));
  return CfmTensor(h, w, d, std::move(v));
}

inline std::vector<float> random_unit(Rng& rng, std::size_t d) {
  std::vector<float> v(d);
  for (;;) {
    for (auto& x : v) x = static_cast<float>(rng.normal());
    if (normalize_in_place(std::span<float>(v))) return v;
  }
}

inline Matrix random_unit_rows(Rng& rng, std::size_t k, std::size_t d) {
  Matrix m(0, d);
  for (std::size_t i = 0; i < k; ++i) m.append_row(random_unit(rng, d));
  return m;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("qamret_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace qamret::testing
