#pragma once

// Thin-plate-spline warps parameterized by control-point targets.
//
// For base controls c_k the warp is
//   T(x) = Σ_k w_k U(|x − c_k|) + a_0 + A·x,
// with (w, a, A) solving the TPS system for targets θ. Because the base
// controls are fixed, the solve folds into a basis row b(x) with
// T(x) = Σ_k b_k(x) θ_k, so the warp is linear in θ and differentiable
// without differentiating a solver.

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "prnet/ops.hpp"
#include "prnet/pointset.hpp"

namespace prnet {

/// The fixed {−1,0,1}^dim lattice of base control points, lexicographic order.
struct ControlGrid {
  int dim = 2;
  PointSet points;

  std::size_t count() const { return points.size(); }
};

inline ControlGrid make_control_grid(int dim) {
  if (dim != 2 && dim != 3) throw DimensionError("control grid: unsupported dimension " + std::to_string(dim));
  std::vector<double> coords;
  const double ticks[3] = {-1.0, 0.0, 1.0};
  if (dim == 2) {
    for (double x : ticks)
      for (double y : ticks) coords.insert(coords.end(), {x, y});
  } else {
    for (double x : ticks)
      for (double y : ticks)
        for (double z : ticks) coords.insert(coords.end(), {x, y, z});
  }
  return {dim, PointSet(dim, std::move(coords))};
}

/// Radial kernel: r² log r in 2D, −r in 3D. Takes r².
inline double tps_kernel(int dim, double r2) {
  if (dim == 2) return r2 > 0.0 ? 0.5 * r2 * std::log(r2) : 0.0;
  return -std::sqrt(r2);
}

/// Row-major [queries × controls] matrix B with warp(query_q) = Σ_k B[q,k] θ_k.
struct TpsBasis {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  double operator()(std::size_t q, std::size_t k) const { return values[q * cols + k]; }
};

/// Basis for arbitrary base controls. `regularization` is added to the kernel
/// diagonal; zero gives exact interpolation.
inline TpsBasis tps_basis(const PointSet& controls, const PointSet& queries, double regularization) {
  const int dim = controls.dim();
  if (queries.dim() != dim) {
    throw DimensionError("tps_basis: " + std::to_string(queries.dim()) + "D queries for " + std::to_string(dim) +
                         "D controls");
  }
  if (regularization < 0.0) throw ContractError("tps_basis: regularization must be non-negative");
  for (double c : queries.coords())
    if (!std::isfinite(c)) throw ContractError("tps_basis: non-finite query coordinate");
  const std::size_t k = controls.size();
  const std::size_t n = k + static_cast<std::size_t>(dim) + 1;
  if (k < static_cast<std::size_t>(dim) + 1) throw SingularSystemError("tps_basis: too few control points");

  auto dist2 = [&](std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (int i = 0; i < dim; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
  };

  Eigen::MatrixXd system = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) system(i, j) = tps_kernel(dim, dist2(controls.point(i), controls.point(j)));
    system(i, i) += regularization;
    system(i, k) = system(k, i) = 1.0;
    for (int a = 0; a < dim; ++a) system(i, k + 1 + a) = system(k + 1 + a, i) = controls(i, a);
  }

  Eigen::FullPivLU<Eigen::MatrixXd> lu(system);
  if (!lu.isInvertible() || lu.rcond() < 1e-13) {
    throw SingularSystemError("tps_basis: TPS system is singular (degenerate control points)");
  }
  // Columns of the inverse that multiply θ; the zero block of the
  // right-hand side drops the rest.
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
  rhs.topRows(static_cast<Eigen::Index>(k)).setIdentity();
  const Eigen::MatrixXd coeff = lu.solve(rhs);  // n × k

  TpsBasis basis;
  basis.rows = queries.size();
  basis.cols = k;
  basis.values.assign(basis.rows * k, 0.0);
  std::vector<double> row(n);
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto x = queries.point(q);
    for (std::size_t j = 0; j < k; ++j) row[j] = tps_kernel(dim, dist2(x, controls.point(j)));
    row[k] = 1.0;
    for (int a = 0; a < dim; ++a) row[k + 1 + a] = x[a];
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += row[j] * coeff(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(c));
      basis.values[q * k + c] = s;
    }
  }
  return basis;
}

inline TpsBasis tps_basis(const ControlGrid& grid, const PointSet& queries, double regularization) {
  return tps_basis(grid.points, queries, regularization);
}

inline constexpr double kDefaultTpsRegularization = 1e-6;

/// A TPS warp: fixed base controls and their predicted positions.
struct TpsWarp {
  PointSet base;     // θ₀
  PointSet targets;  // θ
  double regularization = kDefaultTpsRegularization;

  static TpsWarp identity(const ControlGrid& grid) { return {grid.points, grid.points, kDefaultTpsRegularization}; }

  int dim() const { return base.dim(); }
};

/// T_θ(points) for a precomputed basis of those points.
inline PointSet apply_basis(const TpsBasis& basis, const PointSet& targets) {
  if (basis.cols != targets.size()) {
    throw DimensionError("apply_warp: basis has " + std::to_string(basis.cols) + " controls, warp has " +
                         std::to_string(targets.size()));
  }
  const int dim = targets.dim();
  std::vector<double> out(basis.rows * static_cast<std::size_t>(dim), 0.0);
  for (std::size_t q = 0; q < basis.rows; ++q)
    for (std::size_t k = 0; k < basis.cols; ++k) {
      const double b = basis(q, k);
      for (int a = 0; a < dim; ++a) out[q * dim + a] += b * targets(k, a);
    }
  return PointSet(dim, std::move(out));
}

inline PointSet apply_warp(const TpsWarp& warp, const PointSet& points) {
  if (points.dim() != warp.dim()) {
    throw DimensionError("apply_warp: " + std::to_string(points.dim()) + "D points for a " +
                         std::to_string(warp.dim()) + "D warp");
  }
  return apply_basis(tps_basis(warp.base, points, warp.regularization), warp.targets);
}

/// Differentiable T_θ(points): basis[Q×K] (constant) · θ[K×dim].
template <typename T>
Tensor<T> apply_warp(const TpsBasis& basis, const Tensor<T>& theta) {
  if (theta.rank() != 2 || theta.dim(0) != basis.cols) {
    throw DimensionError("apply_warp: θ of shape " + detail::shape_string(theta.shape()) + " for a basis over " +
                         std::to_string(basis.cols) + " controls");
  }
  std::vector<T> b(basis.values.begin(), basis.values.end());
  return matmul(Tensor<T>::constant({basis.rows, basis.cols}, std::move(b)), theta);
}

}  // namespace prnet
