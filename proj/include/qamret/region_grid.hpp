#pragma once

// Multi-scale square region sampling on the feature-map grid. The same grid
// feeds R-MAC aggregation and overlapped spatial pyramid pooling.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "qamret/error.hpp"
#include "qamret/tensor.hpp"

namespace qamret {

struct RectRegion {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  /// Pyramid level (1-based) that produced the region.
  std::size_t level = 1;

  bool same_extent(const RectRegion& o) const {
    return top == o.top && left == o.left && height == o.height && width == o.width;
  }
  bool operator==(const RectRegion&) const = default;
};

struct OsppConfig {
  std::size_t scales = 3;
  double overlap = 0.4;

  void validate() const {
    if (scales < 1) throw ConfigError("OSPP scales must be >= 1");
    if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("OSPP overlap must lie in [0, 1)");
  }
};

namespace detail {

/// Window offsets along one axis of length `extent` for windows of size `w`.
inline std::vector<std::size_t> axis_offsets(std::size_t extent, std::size_t w, double overlap) {
  if (w >= extent) return {0};
  const double span = static_cast<double>(extent - w);
  const double max_stride = (1.0 - overlap) * static_cast<double>(w);
  std::size_t n = 2;
  // Smallest n >= 2 whose stride respects the overlap target.
  while (span / static_cast<double>(n - 1) > max_stride) ++n;
  const double stride = span / static_cast<double>(n - 1);
  std::vector<std::size_t> offsets;
  offsets.reserve(n);
  for (std::size_t j = 0; j < n; ++j) {
    offsets.push_back(static_cast<std::size_t>(std::lround(static_cast<double>(j) * stride)));
  }
  return offsets;
}

}  // namespace detail

/// Window width at pyramid level `level`: floor(2 min(H,W) / (level+1)),
/// clamped to [1, min(H,W)].
inline std::size_t level_width(std::size_t height, std::size_t width, std::size_t level) {
  const std::size_t m = std::min(height, width);
  const std::size_t w = (2 * m) / (level + 1);
  return std::clamp<std::size_t>(w, 1, m);
}

/// Samples square regions at levels 1..L. Regions are ordered by level, then
/// top, then left; a region identical to an earlier one is dropped.
inline std::vector<RectRegion> sample_grid(std::size_t height, std::size_t width, const OsppConfig& cfg) {
  if (height == 0 || width == 0) throw ValidationError("sample_grid: empty grid");
  cfg.validate();
  std::vector<RectRegion> out;
  for (std::size_t l = 1; l <= cfg.scales; ++l) {
    const std::size_t w = level_width(height, width, l);
    const auto tops = detail::axis_offsets(height, w, cfg.overlap);
    const auto lefts = detail::axis_offsets(width, w, cfg.overlap);
    for (std::size_t t : tops) {
      for (std::size_t le : lefts) {
        RectRegion r{t, le, w, w, l};
        const bool dup = std::any_of(out.begin(), out.end(), [&](const RectRegion& o) { return o.same_extent(r); });
        if (!dup) out.push_back(r);
      }
    }
  }
  return out;
}

/// Channel-wise maximum over a rectangular region.
inline std::vector<float> max_pool(const CfmTensor& t, const RectRegion& r) {
  if (r.height == 0 || r.width == 0 || r.top + r.height > t.height() || r.left + r.width > t.width()) {
    throw RangeError("region outside tensor grid " + t.shape_string());
  }
  std::vector<float> out(t.channels(), 0.0f);
  for (std::size_t h = r.top; h < r.top + r.height; ++h) {
    for (std::size_t w = r.left; w < r.left + r.width; ++w) {
      auto x = t.local(h, w);
      for (std::size_t d = 0; d < out.size(); ++d) out[d] = std::max(out[d], x[d]);
    }
  }
  return out;
}

}  // namespace qamret
