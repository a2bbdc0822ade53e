#pragma once

// Global descriptors: SPoC sum-pooling, R-MAC regional max aggregation and
// PCA-whitening learned on hold-out descriptors.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "qamret/error.hpp"
#include "qamret/matrix.hpp"
#include "qamret/region_grid.hpp"
#include "qamret/tensor.hpp"

namespace qamret {

/// x -> P (x - mean). Rows of P are eigenvectors of the training covariance,
/// ordered by descending eigenvalue and scaled by 1/sqrt(eigenvalue).
struct WhiteningModel {
  std::vector<float> mean;        // D
  Matrix projection;              // D' x D
  std::vector<float> eigenvalues; // D', descending

  std::size_t in_dim() const { return mean.size(); }
  std::size_t out_dim() const { return projection.rows(); }

  /// Rows whose eigenvalue fell below the relative floor (scaling forced to 0).
  std::size_t clamped_dims() const {
    std::size_t n = 0;
    for (std::size_t r = 0; r < projection.rows(); ++r) {
      auto row = projection.row(r);
      if (std::all_of(row.begin(), row.end(), [](float v) { return v == 0.0f; })) ++n;
    }
    return n;
  }

  static WhiteningModel identity(std::size_t dim) {
    WhiteningModel m;
    m.mean.assign(dim, 0.0f);
    m.projection = Matrix(dim, dim);
    for (std::size_t i = 0; i < dim; ++i) m.projection(i, i) = 1.0f;
    m.eigenvalues.assign(dim, 1.0f);
    return m;
  }

  bool operator==(const WhiteningModel&) const = default;
};

/// Eigenvalues below this fraction of the largest are treated as null.
inline constexpr double kEigenFloor = 1e-10;

inline WhiteningModel fit_whitening(const Matrix& samples, std::size_t out_dim) {
  const std::size_t n = samples.rows();
  const std::size_t dim = samples.cols();
  if (n < 2) throw InsufficientDataError("whitening needs at least 2 samples, got " + std::to_string(n));
  if (out_dim == 0 || out_dim > dim || out_dim > n) {
    throw ValidationError("whitening output dim " + std::to_string(out_dim) + " must lie in [1, min(D=" +
                          std::to_string(dim) + ", N=" + std::to_string(n) + ")]");
  }

  Eigen::MatrixXd x(n, dim);
  for (std::size_t r = 0; r < n; ++r) {
    auto row = samples.row(r);
    for (std::size_t c = 0; c < dim; ++c) x(r, c) = row[c];
  }
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw ValidationError("covariance eigendecomposition failed");
  // Eigen returns ascending eigenvalues.
  const Eigen::VectorXd& evals = eig.eigenvalues();
  const Eigen::MatrixXd& evecs = eig.eigenvectors();
  const double largest = std::max(evals(static_cast<Eigen::Index>(dim) - 1), 0.0);

  WhiteningModel m;
  m.mean.resize(dim);
  for (std::size_t c = 0; c < dim; ++c) m.mean[c] = static_cast<float>(mu(static_cast<Eigen::Index>(c)));
  m.projection = Matrix(out_dim, dim);
  m.eigenvalues.resize(out_dim);
  for (std::size_t r = 0; r < out_dim; ++r) {
    const auto src = static_cast<Eigen::Index>(dim - 1 - r);
    const double lambda = evals(src);
    m.eigenvalues[r] = static_cast<float>(std::max(lambda, 0.0));
    const bool usable = largest > 0.0 && lambda > kEigenFloor * largest;
    const double scale = usable ? 1.0 / std::sqrt(lambda) : 0.0;
    // Fix the sign so the largest-magnitude component is positive; keeps the
    // fit deterministic across eigen-solver sign choices.
    Eigen::Index arg = 0;
    evecs.col(src).cwiseAbs().maxCoeff(&arg);
    const double sign = evecs(arg, src) < 0.0 ? -1.0 : 1.0;
    for (std::size_t c = 0; c < dim; ++c) {
      m.projection(r, c) = static_cast<float>(sign * scale * evecs(static_cast<Eigen::Index>(c), src));
    }
  }
  return m;
}

/// P (v - mean) without the final normalization.
template <typename T>
std::vector<double> project_whitening(const WhiteningModel& m, std::span<const T> v) {
  if (v.size() != m.in_dim()) {
    throw ValidationError("whitening expects dim " + std::to_string(m.in_dim()) + ", got " +
                          std::to_string(v.size()));
  }
  std::vector<double> centered(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) centered[i] = static_cast<double>(v[i]) - m.mean[i];
  std::vector<double> out(m.out_dim());
  for (std::size_t r = 0; r < out.size(); ++r) {
    out[r] = dot(m.projection.row(r), std::span<const double>(centered));
  }
  return out;
}

template <typename T>
GlobalDescriptor apply_whitening(const WhiteningModel& m, std::span<const T> v) {
  const auto p = project_whitening(m, v);
  return GlobalDescriptor::normalized(p);
}

inline GlobalDescriptor apply_whitening(const WhiteningModel& m, const GlobalDescriptor& g) {
  if (g.degenerate) {
    GlobalDescriptor z;
    z.values.assign(m.out_dim(), 0.0f);
    z.degenerate = true;
    return z;
  }
  return apply_whitening(m, g.view());
}

/// Sum of all local descriptors, l2-normalized.
inline GlobalDescriptor spoc(const CfmTensor& t) {
  std::vector<double> sum(t.channels(), 0.0);
  for (std::size_t i = 0; i < t.locations(); ++i) {
    auto x = t.local(i);
    for (std::size_t d = 0; d < sum.size(); ++d) sum[d] += x[d];
  }
  return GlobalDescriptor::normalized(sum);
}

enum class AggregationMethod { SPoC, RMAC };

struct AggregationConfig {
  AggregationMethod method = AggregationMethod::RMAC;
  std::size_t scales = 3;
  std::optional<WhiteningModel> whitening;

  void validate() const {
    if (scales < 1) throw ConfigError("aggregation scales must be >= 1");
  }
};

/// Per-region R-MAC vector: max-pool, l2, whiten, l2. Degenerate when the
/// region has no activation or whitens to zero.
inline GlobalDescriptor rmac_region_vector(const CfmTensor& t, const RectRegion& r, const WhiteningModel& wm) {
  auto pooled = max_pool(t, r);
  if (!normalize_in_place(std::span<float>(pooled))) {
    GlobalDescriptor z;
    z.values.assign(wm.out_dim(), 0.0f);
    z.degenerate = true;
    return z;
  }
  return apply_whitening(wm, std::span<const float>(pooled));
}

/// R-MAC over an explicit region list.
inline GlobalDescriptor rmac_over(const CfmTensor& t, std::span<const RectRegion> regions, const WhiteningModel& wm) {
  if (wm.in_dim() != t.channels()) {
    throw ValidationError("whitening input dim " + std::to_string(wm.in_dim()) + " != tensor channels " +
                          std::to_string(t.channels()));
  }
  std::vector<double> sum(wm.out_dim(), 0.0);
  for (const auto& r : regions) {
    const auto v = rmac_region_vector(t, r, wm);
    if (v.degenerate) continue;
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += v.values[i];
  }
  return GlobalDescriptor::normalized(sum);
}

inline GlobalDescriptor rmac(const CfmTensor& t, const AggregationConfig& cfg) {
  cfg.validate();
  if (!cfg.whitening) throw ConfigError("R-MAC requires a whitening model");
  const auto regions = sample_grid(t.height(), t.width(), OsppConfig{cfg.scales, 0.4});
  return rmac_over(t, regions, *cfg.whitening);
}

/// Global descriptor per config: whitened SPoC (whitening optional) or R-MAC.
inline GlobalDescriptor aggregate(const CfmTensor& t, const AggregationConfig& cfg) {
  if (cfg.method == AggregationMethod::RMAC) return rmac(t, cfg);
  auto g = spoc(t);
  if (!cfg.whitening) return g;
  if (cfg.whitening->in_dim() != t.channels()) throw ValidationError("whitening dim does not match tensor channels");
  return apply_whitening(*cfg.whitening, g);
}

/// Pre-whitening vectors a tensor contributes to a whitening fit: its SPoC
/// vector, or every non-degenerate l2-normalized regional max-pool for R-MAC.
inline Matrix whitening_samples(const CfmTensor& t, AggregationMethod method, std::size_t scales = 3) {
  Matrix out;
  if (method == AggregationMethod::SPoC) {
    const auto g = spoc(t);
    if (!g.degenerate) out.append_row(g.values);
    return out;
  }
  for (const auto& r : sample_grid(t.height(), t.width(), OsppConfig{scales, 0.4})) {
    auto pooled = max_pool(t, r);
    if (normalize_in_place(std::span<float>(pooled))) out.append_row(pooled);
  }
  return out;
}

}  // namespace qamret
