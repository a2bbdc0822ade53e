#pragma once

// Query adaptive matching.
//
// Given a unit query q and region descriptors f_1..f_K (rows of F), find the
// nonnegative merge weights z maximizing cos(q, sum_k z_k f_k). Fixing the
// scale by q^T F^T z = 1 turns this into the convex QP
//
//     min_z  z^T G z    s.t.  b^T z = 1,  z >= 0,
//
// with Gram matrix G = F F^T and b = F q. The optimum of the cosine problem is
// 1 / sqrt(z*^T G z*).
//
// The QP is solved by a primal active-set method. The free set starts at the
// single best region; each iteration solves the equality-constrained problem
// on the free set in closed form (y = G_FF^{-1} b_F, z_F = y / b_F^T y), steps
// back to the feasible boundary when a weight would turn negative, and
// otherwise releases the bound with the most negative multiplier
// mu_k = 2 (G z)_k - lambda b_k.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "qamret/error.hpp"
#include "qamret/matrix.hpp"

namespace qamret {

enum class QamStatus { Optimal, Infeasible, MaxIterations };

inline const char* to_string(QamStatus s) {
  switch (s) {
    case QamStatus::Optimal: return "optimal";
    case QamStatus::Infeasible: return "infeasible";
    case QamStatus::MaxIterations: return "max-iterations";
  }
  return "?";
}

struct SolverConfig {
  /// Release threshold on multipliers, relative to lambda.
  double objective_tolerance = 1e-10;
  /// Weights at or below this are treated as sitting on their bound.
  double constraint_tolerance = 1e-9;
  /// 0 selects 10 K + 100.
  std::size_t max_iterations = 0;

  void validate() const {
    if (!(objective_tolerance > 0.0) || !(constraint_tolerance > 0.0)) {
      throw ConfigError("solver tolerances must be positive");
    }
  }
};

struct QamSolution {
  std::vector<double> z;
  double similarity = 0.0;
  /// Multiplier of the equality constraint, 2 z^T G z at the optimum.
  double lambda = 0.0;
  QamStatus status = QamStatus::Infeasible;
  std::size_t iterations = 0;
};

/// Ridge added to the working-set system when it is numerically singular.
inline constexpr double kWorkingSetRidge = 1e-12;

namespace detail {

/// Solves G_FF y = b_F on the free index set.
inline Eigen::VectorXd solve_working_set(const Eigen::MatrixXd& gram, const Eigen::VectorXd& b,
                                         const std::vector<Eigen::Index>& free) {
  const auto m = static_cast<Eigen::Index>(free.size());
  Eigen::MatrixXd sub(m, m);
  Eigen::VectorXd rhs(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    rhs(i) = b(free[i]);
    for (Eigen::Index j = 0; j < m; ++j) sub(i, j) = gram(free[i], free[j]);
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(sub);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.rcond() < 1e-13) {
    const double scale = std::max(1.0, sub.diagonal().maxCoeff());
    sub.diagonal().array() += kWorkingSetRidge * scale;
    ldlt.compute(sub);
  }
  return ldlt.solve(rhs);
}

}  // namespace detail

/// Solves the QAM problem for query `q` against region rows `regions`.
template <typename Q, typename R>
QamSolution solve_qam(std::span<const Q> q, const RowMatrix<R>& regions, const SolverConfig& cfg = {}) {
  cfg.validate();
  const auto k = static_cast<Eigen::Index>(regions.rows());
  if (k == 0) throw ValidationError("QAM needs at least one region");
  if (regions.cols() != q.size()) {
    throw ValidationError("QAM dimension mismatch: query " + std::to_string(q.size()) + ", regions " +
                          std::to_string(regions.cols()));
  }
  for (const auto& v : regions.data()) {
    if (!std::isfinite(static_cast<double>(v))) throw ValidationError("QAM region matrix has a non-finite entry");
  }

  Eigen::MatrixXd f(k, static_cast<Eigen::Index>(q.size()));
  for (Eigen::Index r = 0; r < k; ++r) {
    auto row = regions.row(static_cast<std::size_t>(r));
    for (std::size_t c = 0; c < row.size(); ++c) f(r, static_cast<Eigen::Index>(c)) = row[c];
  }
  Eigen::VectorXd qv(static_cast<Eigen::Index>(q.size()));
  for (std::size_t c = 0; c < q.size(); ++c) qv(static_cast<Eigen::Index>(c)) = q[c];

  const Eigen::MatrixXd gram = f * f.transpose();
  const Eigen::VectorXd b = f * qv;

  QamSolution sol;
  sol.z.assign(static_cast<std::size_t>(k), 0.0);

  // Start from the best single region (largest positive cosine).
  Eigen::Index start = -1;
  double best_cos = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) {
    if (b(i) <= 0.0 || gram(i, i) <= 0.0) continue;
    const double c = b(i) / std::sqrt(gram(i, i));
    if (start < 0 || c > best_cos) {
      start = i;
      best_cos = c;
    }
  }
  if (start < 0) {
    sol.status = QamStatus::Infeasible;
    return sol;
  }

  const std::size_t max_iter = cfg.max_iterations > 0 ? cfg.max_iterations : 10 * static_cast<std::size_t>(k) + 100;
  Eigen::VectorXd z = Eigen::VectorXd::Zero(k);
  z(start) = 1.0 / b(start);
  std::vector<Eigen::Index> free{start};
  std::vector<char> is_free(static_cast<std::size_t>(k), 0);
  is_free[static_cast<std::size_t>(start)] = 1;

  sol.status = QamStatus::MaxIterations;
  std::size_t iter = 0;
  for (; iter < max_iter; ++iter) {
    const Eigen::VectorXd y = detail::solve_working_set(gram, b, free);
    double by = 0.0;
    for (std::size_t i = 0; i < free.size(); ++i) by += b(free[i]) * y(static_cast<Eigen::Index>(i));
    if (!(by > 0.0) || !std::isfinite(by)) break;  // numerical breakdown; keep current iterate
    const Eigen::VectorXd target = y / by;
    const double tiny = cfg.constraint_tolerance * target.cwiseAbs().maxCoeff();

    bool interior = true;
    for (Eigen::Index i = 0; i < target.size(); ++i) {
      if (target(i) <= tiny) {
        interior = false;
        break;
      }
    }

    if (interior) {
      for (std::size_t i = 0; i < free.size(); ++i) z(free[i]) = target(static_cast<Eigen::Index>(i));
      const Eigen::VectorXd gz = gram * z;
      const double lambda = 2.0 * z.dot(gz);
      Eigen::Index enter = -1;
      double most_negative = -cfg.objective_tolerance * std::max(1.0, lambda);
      for (Eigen::Index i = 0; i < k; ++i) {
        if (is_free[static_cast<std::size_t>(i)]) continue;
        const double mu = 2.0 * gz(i) - lambda * b(i);
        if (mu < most_negative) {
          most_negative = mu;
          enter = i;
        }
      }
      if (enter < 0) {
        sol.status = QamStatus::Optimal;
        break;
      }
      free.push_back(enter);
      is_free[static_cast<std::size_t>(enter)] = 1;
      continue;
    }

    // Move toward the target until the first free weight reaches zero.
    double alpha = 1.0;
    for (std::size_t i = 0; i < free.size(); ++i) {
      const double cur = z(free[i]);
      const double tgt = target(static_cast<Eigen::Index>(i));
      if (tgt < cur && tgt <= tiny) {
        alpha = std::min(alpha, cur / (cur - tgt));
      }
    }
    alpha = std::clamp(alpha, 0.0, 1.0);
    for (std::size_t i = 0; i < free.size(); ++i) {
      const double cur = z(free[i]);
      z(free[i]) = cur + alpha * (target(static_cast<Eigen::Index>(i)) - cur);
    }
    const double zmax = z.maxCoeff();
    std::vector<Eigen::Index> kept;
    for (Eigen::Index idx : free) {
      if (z(idx) <= cfg.constraint_tolerance * zmax) {
        z(idx) = 0.0;
        is_free[static_cast<std::size_t>(idx)] = 0;
      } else {
        kept.push_back(idx);
      }
    }
    if (kept.empty()) break;  // cannot happen in exact arithmetic
    free = std::move(kept);
  }
  sol.iterations = iter;

  // Re-impose b^T z = 1 exactly on the final iterate.
  const double bz = b.dot(z);
  if (bz > 0.0) z /= bz;
  const double energy = z.dot(gram * z);
  sol.lambda = 2.0 * energy;
  // 1 / sqrt(z^T G z) for unit q; dividing by ||q|| keeps it an exact cosine.
  const double qn = qv.norm();
  sol.similarity = energy > 0.0 && qn > 0.0 ? 1.0 / (qn * std::sqrt(energy)) : 0.0;
  for (Eigen::Index i = 0; i < k; ++i) sol.z[static_cast<std::size_t>(i)] = z(i);
  return sol;
}

/// QAM similarity between a global query descriptor and a region set.
/// Infeasible problems score 0.
template <typename R>
double qam_similarity(std::span<const float> q, const RowMatrix<R>& regions, const SolverConfig& cfg = {}) {
  if (q.size() != regions.cols()) {
    throw ValidationError("query dim " + std::to_string(q.size()) + " != region dim " +
                          std::to_string(regions.cols()));
  }
  const double n = l2_norm(q);
  if (std::abs(n - 1.0) > 1e-5) throw ValidationError("QAM query must be unit-norm (norm " + std::to_string(n) + ")");
  const auto sol = solve_qam(q, regions, cfg);
  return sol.status == QamStatus::Infeasible ? 0.0 : sol.similarity;
}

}  // namespace qamret
