#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "qamret/error.hpp"
#include "qamret/matrix.hpp"

namespace qamret {

/// Uniform double in [0, 1) from the top 53 bits of a 64-bit engine draw.
/// Unlike std::uniform_real_distribution the result is identical across
/// standard library implementations.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

struct KMeansResult {
  /// Cluster label per point, in [0, clusters).
  std::vector<std::size_t> assignment;
  std::size_t clusters = 0;
  std::size_t iterations = 0;
};

namespace detail {

inline double squared_distance(std::span<const float> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = static_cast<double>(a[i]) - b[i];
    acc += diff * diff;
  }
  return acc;
}

}  // namespace detail

/// Lloyd's k-means with k-means++ seeding. Deterministic given `seed`.
///
/// Clusters that end up empty are discarded and labels are compacted in order
/// of each cluster's lowest member index, so `clusters` may be below `k`.
inline KMeansResult kmeans(const Matrix& points, std::size_t k, std::size_t max_iterations, std::uint64_t seed) {
  const std::size_t n = points.rows();
  const std::size_t dim = points.cols();
  if (k == 0) throw ConfigError("k-means needs k >= 1");
  KMeansResult result;
  if (n == 0) return result;
  k = std::min(k, n);

  std::mt19937_64 rng(seed);
  std::vector<std::vector<double>> centers;
  centers.reserve(k);
  auto as_center = [&](std::size_t i) {
    auto r = points.row(i);
    return std::vector<double>(r.begin(), r.end());
  };

  centers.push_back(as_center(static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n))));
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = detail::squared_distance(points.row(i), centers[0]);
  while (centers.size() < k) {
    double total = 0.0;
    for (double v : d2) total += v;
    if (total <= 0.0) break;  // every point coincides with a center
    const double target = uniform01(rng) * total;
    double acc = 0.0;
    std::size_t pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      acc += d2[i];
      if (acc > target && d2[i] > 0.0) {
        pick = i;
        break;
      }
    }
    while (d2[pick] <= 0.0 && pick > 0) --pick;
    centers.push_back(as_center(pick));
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], detail::squared_distance(points.row(i), centers.back()));
    }
  }

  std::vector<std::size_t> label(n, 0);
  std::size_t iter = 0;
  for (; iter < std::max<std::size_t>(max_iterations, 1); ++iter) {
    bool changed = iter == 0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t c = 0; c < centers.size(); ++c) {
        const double dist = detail::squared_distance(points.row(i), centers[c]);
        if (dist < best) {
          best = dist;
          arg = c;
        }
      }
      if (label[i] != arg) {
        label[i] = arg;
        changed = true;
      }
    }
    if (!changed) break;
    std::vector<std::vector<double>> sums(centers.size(), std::vector<double>(dim, 0.0));
    std::vector<std::size_t> counts(centers.size(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto r = points.row(i);
      for (std::size_t j = 0; j < dim; ++j) sums[label[i]][j] += r[j];
      ++counts[label[i]];
    }
    for (std::size_t c = 0; c < centers.size(); ++c) {
      if (counts[c] == 0) continue;  // keeps its previous position
      for (std::size_t j = 0; j < dim; ++j) centers[c][j] = sums[c][j] / static_cast<double>(counts[c]);
    }
  }

  std::vector<std::size_t> remap(centers.size(), std::numeric_limits<std::size_t>::max());
  result.assignment.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (remap[label[i]] == std::numeric_limits<std::size_t>::max()) remap[label[i]] = result.clusters++;
    result.assignment[i] = remap[label[i]];
  }
  result.iterations = iter;
  return result;
}

}  // namespace qamret
