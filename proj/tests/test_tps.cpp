#include <gtest/gtest.h>

#include <random>

#include "prnet/tps.hpp"
#include "test_support.hpp"

using namespace prnet;
using prnet::testing::random_points;

namespace {

// Direct TPS: solve [K+λI P; Pᵀ 0][w; a] = [θ; 0] with Gaussian elimination
// per output axis, then evaluate Σ w_j U(‖x − c_j‖) + a₀ + aᵀx.
PointSet direct_tps(const PointSet& c, const PointSet& theta, const PointSet& x, double lambda) {
  const int d = c.dim();
  const std::size_t k = c.size(), n = k + d + 1;
  auto U = [&](std::span<const double> p, std::span<const double> q) {
    double r2 = 0;
    for (int a = 0; a < d; ++a) r2 += (p[a] - q[a]) * (p[a] - q[a]);
    if (d == 3) return -std::sqrt(r2);
    return r2 > 0 ? r2 * std::log(std::sqrt(r2)) : 0.0;
  };
  std::vector<double> out(x.size() * d);
  for (int axis = 0; axis < d; ++axis) {
    std::vector<std::vector<double>> m(n, std::vector<double>(n + 1, 0.0));
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < k; ++j) m[i][j] = U(c.point(i), c.point(j)) + (i == j ? lambda : 0.0);
      m[i][k] = m[k][i] = 1;
      for (int a = 0; a < d; ++a) m[i][k + 1 + a] = m[k + 1 + a][i] = c(i, a);
      m[i][n] = theta(i, axis);
    }
    for (std::size_t col = 0; col < n; ++col) {
      std::size_t piv = col;
      for (std::size_t r = col + 1; r < n; ++r)
        if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
      std::swap(m[col], m[piv]);
      for (std::size_t r = 0; r < n; ++r) {
        if (r == col) continue;
        const double f = m[r][col] / m[col][col];
        for (std::size_t q = col; q <= n; ++q) m[r][q] -= f * m[col][q];
      }
    }
    for (std::size_t q = 0; q < x.size(); ++q) {
      double v = m[k][n] / m[k][k];
      for (int a = 0; a < d; ++a) v += m[k + 1 + a][n] / m[k + 1 + a][k + 1 + a] * x(q, a);
      for (std::size_t j = 0; j < k; ++j) v += m[j][n] / m[j][j] * U(x.point(q), c.point(j));
      out[q * d + axis] = v;
    }
  }
  return PointSet(d, std::move(out));
}

PointSet drift(const PointSet& p, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, scale);
  PointSet out = p;
  for (auto& v : out.coords()) v += n(rng);
  return out;
}

}  // namespace

TEST(Tps, ControlGridIsLexicographicLattice) {
  auto g = make_control_grid(2);
  ASSERT_EQ(g.count(), 9u);
  EXPECT_EQ(g.points(0, 0), -1.0);
  EXPECT_EQ(g.points(0, 1), -1.0);
  EXPECT_EQ(g.points(1, 1), 0.0);
  EXPECT_EQ(g.points(8, 0), 1.0);
  EXPECT_EQ(make_control_grid(3).count(), 27u);
  EXPECT_THROW(make_control_grid(4), DimensionError);
}

TEST(Tps, IdentityDisplacesNothing) {
  std::mt19937_64 rng(1);
  for (int dim : {2, 3}) {
    auto g = make_control_grid(dim);
    auto x = random_points(200, dim, rng, 1.5);
    auto y = apply_warp(TpsWarp::identity(g), x);
    for (std::size_t i = 0; i < x.coords().size(); ++i) EXPECT_NEAR(y.coords()[i], x.coords()[i], 1e-9);
  }
}

TEST(Tps, ZeroRegularizationInterpolatesControls) {
  std::mt19937_64 rng(2);
  for (int dim : {2, 3}) {
    auto g = make_control_grid(dim);
    TpsWarp w{g.points, drift(g.points, 0.3, rng), 0.0};
    auto y = apply_warp(w, g.points);
    for (std::size_t i = 0; i < y.coords().size(); ++i) EXPECT_NEAR(y.coords()[i], w.targets.coords()[i], 1e-6);
  }
}

TEST(Tps, MatchesDirectSolve) {
  std::mt19937_64 rng(3);
  for (int dim : {2, 3}) {
    auto c = random_points(12, dim, rng);
    auto theta = drift(c, 0.2, rng);
    auto x = random_points(50, dim, rng);
    for (double lambda : {0.0, 1e-6, 0.5}) {
      auto expect = direct_tps(c, theta, x, lambda);
      auto got = apply_warp(TpsWarp{c, theta, lambda}, x);
      for (std::size_t i = 0; i < got.coords().size(); ++i) EXPECT_NEAR(got.coords()[i], expect.coords()[i], 1e-9);
    }
  }
}

TEST(Tps, TranslationOfControlsTranslatesPoints) {
  std::mt19937_64 rng(4);
  for (int dim : {2, 3}) {
    auto g = make_control_grid(dim);
    auto theta = drift(g.points, 0.25, rng);
    auto x = random_points(100, dim, rng);
    std::vector<double> t = {0.3, -0.7, 0.45};
    PointSet shifted = theta;
    for (std::size_t i = 0; i < shifted.size(); ++i)
      for (int a = 0; a < dim; ++a) shifted.point(i)[a] += t[a];
    for (double lambda : {0.0, kDefaultTpsRegularization, 1.0}) {
      auto y0 = apply_warp(TpsWarp{g.points, theta, lambda}, x);
      auto y1 = apply_warp(TpsWarp{g.points, shifted, lambda}, x);
      for (std::size_t i = 0; i < x.size(); ++i)
        for (int a = 0; a < dim; ++a) EXPECT_NEAR(y1(i, a), y0(i, a) + t[a], 1e-6);
    }
  }
}

TEST(Tps, AffineControlsGiveAffineWarp) {
  auto g = make_control_grid(2);
  PointSet theta = g.points;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double x = g.points(i, 0), y = g.points(i, 1);
    theta.point(i)[0] = 1.2 * x - 0.3 * y + 0.1;
    theta.point(i)[1] = 0.2 * x + 0.9 * y - 0.4;
  }
  std::mt19937_64 rng(5);
  auto pts = random_points(40, 2, rng);
  auto y = apply_warp(TpsWarp{g.points, theta, 0.3}, pts);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    EXPECT_NEAR(y(i, 0), 1.2 * pts(i, 0) - 0.3 * pts(i, 1) + 0.1, 1e-9);
    EXPECT_NEAR(y(i, 1), 0.2 * pts(i, 0) + 0.9 * pts(i, 1) - 0.4, 1e-9);
  }
}

TEST(Tps, DifferentiableWarpMatchesPointWarp) {
  std::mt19937_64 rng(6);
  auto g = make_control_grid(2);
  auto theta = drift(g.points, 0.2, rng);
  auto x = random_points(30, 2, rng);
  auto basis = tps_basis(g, x, kDefaultTpsRegularization);
  auto t = Tensor<double>::parameter({9, 2}, theta.coords());
  auto y = apply_warp(basis, t);
  auto expect = apply_warp(TpsWarp{g.points, theta, kDefaultTpsRegularization}, x);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], expect.coords()[i], 1e-12);
  // Each basis row sums to one: a warp that moves all controls by v moves every point by v.
  for (std::size_t q = 0; q < basis.rows; ++q) {
    double s = 0;
    for (std::size_t k = 0; k < basis.cols; ++k) s += basis(q, k);
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Tps, DegenerateControlsAreSingular) {
  PointSet collinear(2, {0, 0, 1, 1, 2, 2, 3, 3});
  PointSet q(2, {0.5, 0.5});
  EXPECT_THROW(tps_basis(collinear, q, 0.0), SingularSystemError);
  PointSet two(2, {0, 0, 1, 0});
  EXPECT_THROW(tps_basis(two, q, 0.0), SingularSystemError);
}

TEST(Tps, RejectsBadInputs) {
  auto g = make_control_grid(2);
  PointSet q3(3, {0, 0, 0});
  EXPECT_THROW(tps_basis(g, q3, 0.0), DimensionError);
  PointSet q(2, {0.0, std::nan("")});
  EXPECT_THROW(tps_basis(g, q, 0.0), ContractError);
  EXPECT_THROW(tps_basis(g, PointSet(2, {0, 0}), -1.0), ContractError);
  EXPECT_THROW(apply_warp(TpsWarp::identity(g), q3), DimensionError);
}

TEST(Tps, KernelValues) {
  EXPECT_EQ(tps_kernel(2, 0.0), 0.0);
  EXPECT_NEAR(tps_kernel(2, 4.0), 4.0 * std::log(2.0), 1e-15);
  EXPECT_NEAR(tps_kernel(3, 4.0), -2.0, 1e-15);
}
