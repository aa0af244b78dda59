#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include "prnet/ops.hpp"
#include "prnet/pointset.hpp"

namespace prnet {

struct ChamferDistance {
  double sum = 0.0;         // Σ_a min_b ‖a−b‖² + Σ_b min_a ‖a−b‖²
  double normalized = 0.0;  // sum / (|a| + |b|)
};

inline ChamferDistance chamfer(const PointSet& a, const PointSet& b) {
  if (a.empty() || b.empty()) throw EmptyInputError("chamfer: empty point set");
  if (a.dim() != b.dim()) throw DimensionError("chamfer: point sets differ in dimension");
  const int dim = a.dim();
  std::vector<double> best_b(b.size(), std::numeric_limits<double>::infinity());
  double sum_a = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    const auto p = a.point(i);
    for (std::size_t j = 0; j < b.size(); ++j) {
      const auto q = b.point(j);
      double d = 0.0;
      for (int k = 0; k < dim; ++k) d += (p[k] - q[k]) * (p[k] - q[k]);
      best = std::min(best, d);
      best_b[j] = std::min(best_b[j], d);
    }
    sum_a += best;
  }
  double sum_b = 0.0;
  for (double d : best_b) sum_b += d;
  ChamferDistance cd;
  cd.sum = sum_a + sum_b;
  cd.normalized = cd.sum / static_cast<double>(a.size() + b.size());
  return cd;
}

/// Negative log-likelihood of `transformed` under an equal-weight isotropic
/// Gaussian mixture centred on `target`:
///   −Σ_x log Σ_y exp(−½‖(x − y)/σ‖²).
/// The constant mixture weight and normalizer are omitted.
template <typename T>
Tensor<T> gmm_loss(const Tensor<T>& transformed, const PointSet& target, double sigma) {
  if (!(sigma > 0.0)) throw ContractError("gmm_loss: sigma must be positive");
  if (target.empty()) throw EmptyInputError("gmm_loss: empty target set");
  if (transformed.rank() != 2 || transformed.dim(1) != static_cast<std::size_t>(target.dim())) {
    throw DimensionError("gmm_loss: transformed points " + detail::shape_string(transformed.shape()) +
                         " do not match " + std::to_string(target.dim()) + "D targets");
  }
  std::vector<T> y(target.coords().begin(), target.coords().end());
  auto centres = Tensor<T>::constant({target.size(), static_cast<std::size_t>(target.dim())}, std::move(y));
  auto logits = scale(squared_distances(transformed, centres), static_cast<T>(-0.5 / (sigma * sigma)));
  return scale(sum(log_sum_exp(logits, 1)), T{-1});
}

inline double gmm_loss(const PointSet& transformed, const PointSet& target, double sigma) {
  NoGradGuard no_grad;
  std::vector<double> x(transformed.coords());
  auto t = Tensor<double>::constant({transformed.size(), static_cast<std::size_t>(transformed.dim())}, std::move(x));
  return gmm_loss(t, target, sigma).item();
}

/// σ(n) = max(initial · sqrt(1/n), floor) for annealing step n ≥ 1.
struct AnnealingSchedule {
  double initial_sigma = 1.0;
  double floor = 0.1;

  double sigma_at(long long step) const {
    if (step < 1) throw ContractError("sigma_at: annealing step must be >= 1, got " + std::to_string(step));
    return std::max(initial_sigma * std::sqrt(1.0 / static_cast<double>(step)), floor);
  }
};

inline constexpr double kSigmaFloor = 0.1;
inline constexpr double kSigmaFloorNoisy = 0.12;

}  // namespace prnet
