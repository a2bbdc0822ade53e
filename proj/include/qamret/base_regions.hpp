#pragma once

// Base regions for query adaptive matching.
//
// FMP: every channel's positive-activation mask is a region; its descriptor is
// the l2-normalized sum of the local descriptors inside the mask. Masks are
// then merged by k-means over their descriptors, and each merged region is
// re-pooled over the union of its member masks.
//
// OSPP: square windows from the multi-scale grid, described R-MAC style
// (max-pool, l2, whiten, l2).

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "qamret/aggregate.hpp"
#include "qamret/kmeans.hpp"
#include "qamret/matrix.hpp"
#include "qamret/region_grid.hpp"
#include "qamret/tensor.hpp"

namespace qamret {

/// Sorted flat grid locations (h*W + w) that belong to a region.
struct RegionMask {
  std::vector<std::uint32_t> cells;

  bool operator==(const RegionMask&) const = default;
};

enum class RegionProvenance : std::uint8_t { FMP = 1, OSPP = 2 };

/// K x D' region descriptors of one image, one unit-norm row per region.
struct BaseRegionSet {
  Matrix descriptors;
  RegionProvenance provenance = RegionProvenance::FMP;

  std::size_t size() const { return descriptors.rows(); }
  std::size_t dim() const { return descriptors.cols(); }

  bool operator==(const BaseRegionSet&) const = default;
};

struct RawRegion {
  std::size_t channel = 0;
  RegionMask mask;
  std::vector<float> descriptor;
};

struct FmpConfig {
  std::size_t clusters = 25;
  std::size_t max_iterations = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (clusters < 1) throw ConfigError("FMP cluster count must be >= 1");
    if (max_iterations < 1) throw ConfigError("FMP max iterations must be >= 1");
  }
};

namespace detail {

inline std::vector<double> masked_sum(const CfmTensor& t, std::span<const std::uint32_t> cells) {
  std::vector<double> sum(t.channels(), 0.0);
  for (std::uint32_t i : cells) {
    auto x = t.local(i);
    for (std::size_t d = 0; d < sum.size(); ++d) sum[d] += x[d];
  }
  return sum;
}

}  // namespace detail

/// One region per channel that has a strictly positive activation somewhere.
/// An empty result means the tensor has no activation at all.
inline std::vector<RawRegion> fmp_raw(const CfmTensor& t) {
  std::vector<RawRegion> out;
  const std::size_t n = t.locations();
  for (std::size_t d = 0; d < t.channels(); ++d) {
    RegionMask mask;
    for (std::size_t i = 0; i < n; ++i) {
      if (t.local(i)[d] > 0.0f) mask.cells.push_back(static_cast<std::uint32_t>(i));
    }
    if (mask.cells.empty()) continue;
    const auto desc = GlobalDescriptor::normalized(detail::masked_sum(t, mask.cells));
    out.push_back(RawRegion{d, std::move(mask), desc.values});
  }
  return out;
}

struct FmpResult {
  BaseRegionSet regions;
  /// Merged mask per output row.
  std::vector<RegionMask> masks;
  /// Output row for each channel; -1 for channels without activation.
  std::vector<int> channel_cluster;
};

inline std::optional<FmpResult> fmp_detailed(const CfmTensor& t, const FmpConfig& cfg) {
  cfg.validate();
  const auto raw = fmp_raw(t);
  if (raw.empty()) return std::nullopt;

  std::vector<std::size_t> label(raw.size());
  std::size_t clusters = 0;
  if (cfg.clusters >= raw.size()) {
    for (std::size_t i = 0; i < raw.size(); ++i) label[i] = i;
    clusters = raw.size();
  } else {
    Matrix points;
    for (const auto& r : raw) points.append_row(r.descriptor);
    auto km = kmeans(points, cfg.clusters, cfg.max_iterations, cfg.seed);
    label = std::move(km.assignment);
    clusters = km.clusters;
  }

  FmpResult res;
  res.regions.provenance = RegionProvenance::FMP;
  res.regions.descriptors = Matrix(0, t.channels());
  res.channel_cluster.assign(t.channels(), -1);
  std::vector<std::vector<char>> member(clusters, std::vector<char>(t.locations(), 0));
  for (std::size_t i = 0; i < raw.size(); ++i) {
    res.channel_cluster[raw[i].channel] = static_cast<int>(label[i]);
    for (std::uint32_t c : raw[i].mask.cells) member[label[i]][c] = 1;
  }
  for (std::size_t k = 0; k < clusters; ++k) {
    RegionMask mask;
    for (std::size_t c = 0; c < t.locations(); ++c) {
      if (member[k][c]) mask.cells.push_back(static_cast<std::uint32_t>(c));
    }
    const auto desc = GlobalDescriptor::normalized(detail::masked_sum(t, mask.cells));
    res.regions.descriptors.append_row(desc.values);
    res.masks.push_back(std::move(mask));
  }
  return res;
}

/// Merged FMP regions, or nullopt when the tensor has no activation.
inline std::optional<BaseRegionSet> fmp(const CfmTensor& t, const FmpConfig& cfg) {
  auto r = fmp_detailed(t, cfg);
  if (!r) return std::nullopt;
  return std::move(r->regions);
}

/// OSPP descriptors over an explicit region list (duplicates kept).
/// Regions whose descriptor degenerates to zero are skipped; nullopt when all are.
inline std::optional<BaseRegionSet> ospp_over(const CfmTensor& t, std::span<const RectRegion> regions,
                                              const WhiteningModel& wm) {
  if (wm.in_dim() != t.channels()) {
    throw ValidationError("whitening input dim " + std::to_string(wm.in_dim()) + " != tensor channels " +
                          std::to_string(t.channels()));
  }
  BaseRegionSet set;
  set.provenance = RegionProvenance::OSPP;
  set.descriptors = Matrix(0, wm.out_dim());
  for (const auto& r : regions) {
    const auto v = rmac_region_vector(t, r, wm);
    if (!v.degenerate) set.descriptors.append_row(v.values);
  }
  if (set.size() == 0) return std::nullopt;
  return set;
}

inline std::optional<BaseRegionSet> ospp(const CfmTensor& t, const OsppConfig& cfg, const WhiteningModel& wm) {
  const auto regions = sample_grid(t.height(), t.width(), cfg);
  return ospp_over(t, regions, wm);
}

}  // namespace qamret
