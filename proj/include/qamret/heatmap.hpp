#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "qamret/binary_io.hpp"
#include "qamret/error.hpp"
#include "qamret/tensor.hpp"

namespace qamret {

/// H x W map with values in [0, 1], row-major.
struct HeatMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  double at(std::size_t h, std::size_t w) const { return values[h * width + w]; }
};

namespace detail {

/// Min-max rescale to [0, 1]. A constant positive map becomes all ones; a map
/// with no positive value stays zero.
inline void min_max_normalize(std::vector<double>& v) {
  if (v.empty()) return;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double mn = *lo;
  const double mx = *hi;
  if (mx <= 0.0) {
    std::fill(v.begin(), v.end(), 0.0);
  } else if (mx == mn) {
    std::fill(v.begin(), v.end(), 1.0);
  } else {
    for (double& x : v) x = (x - mn) / (mx - mn);
  }
}

}  // namespace detail

/// Weighted merge of feature maps: M(h,w) = sum_d z[cluster(d)] X(h,w,d),
/// min-max normalized. Channels mapped to -1 contribute nothing.
inline HeatMap merged_heatmap(const CfmTensor& t, std::span<const int> channel_cluster, std::span<const double> z) {
  if (channel_cluster.size() != t.channels()) {
    throw ValidationError("cluster map covers " + std::to_string(channel_cluster.size()) + " channels, tensor has " +
                          std::to_string(t.channels()));
  }
  for (int c : channel_cluster) {
    if (c >= 0 && static_cast<std::size_t>(c) >= z.size()) {
      throw ValidationError("cluster " + std::to_string(c) + " has no weight (" + std::to_string(z.size()) +
                            " weights)");
    }
  }
  HeatMap m{t.height(), t.width(), std::vector<double>(t.locations(), 0.0)};
  for (std::size_t i = 0; i < t.locations(); ++i) {
    auto x = t.local(i);
    double acc = 0.0;
    for (std::size_t d = 0; d < x.size(); ++d) {
      if (channel_cluster[d] >= 0) acc += z[static_cast<std::size_t>(channel_cluster[d])] * x[d];
    }
    m.values[i] = acc;
  }
  detail::min_max_normalize(m.values);
  return m;
}

/// Per-location l1 norm of the local descriptors, divided by the maximum norm.
inline HeatMap l1norm_heatmap(const CfmTensor& t) {
  HeatMap m{t.height(), t.width(), std::vector<double>(t.locations(), 0.0)};
  double mx = 0.0;
  for (std::size_t i = 0; i < t.locations(); ++i) {
    double acc = 0.0;
    for (float v : t.local(i)) acc += std::abs(static_cast<double>(v));
    m.values[i] = acc;
    mx = std::max(mx, acc);
  }
  if (mx > 0.0) {
    for (double& v : m.values) v /= mx;
  }
  return m;
}

/// Binary PGM (P5), 8-bit, pixel = round(255 * value).
inline std::string encode_pgm(const HeatMap& m) {
  std::string out = "P5\n" + std::to_string(m.width) + " " + std::to_string(m.height) + "\n255\n";
  out.reserve(out.size() + m.values.size());
  for (double v : m.values) {
    const double c = std::clamp(v, 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * c))));
  }
  return out;
}

inline void write_pgm(const HeatMap& m, const std::filesystem::path& path) { io::write_file(path, encode_pgm(m)); }

}  // namespace qamret
