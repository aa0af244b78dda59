#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "prnet/losses.hpp"
#include "test_support.hpp"

using namespace prnet;
using prnet::testing::max_gradient_error;
using prnet::testing::random_points;

namespace {

long double naive_gmm(const PointSet& x, const PointSet& y, long double sigma) {
  long double total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    long double s = 0;
    for (std::size_t j = 0; j < y.size(); ++j) {
      long double d = 0;
      for (int a = 0; a < x.dim(); ++a) {
        const long double t = (static_cast<long double>(x(i, a)) - y(j, a)) / sigma;
        d += t * t;
      }
      s += std::exp(-0.5L * d);
    }
    total -= std::log(s);
  }
  return total;
}

}  // namespace

TEST(Chamfer, MatchesHandComputedValue) {
  PointSet a(2, {0, 0, 1, 0});
  PointSet b(2, {0, 1});
  // a→b: 1 + 2; b→a: 1
  auto cd = chamfer(a, b);
  EXPECT_DOUBLE_EQ(cd.sum, 4.0);
  EXPECT_DOUBLE_EQ(cd.normalized, 4.0 / 3.0);
}

TEST(Chamfer, ZeroForIdenticalAndSymmetric) {
  std::mt19937_64 rng(1);
  auto a = random_points(40, 3, rng), b = random_points(25, 3, rng);
  EXPECT_EQ(chamfer(a, a).sum, 0.0);
  EXPECT_EQ(chamfer(a, b).sum, chamfer(b, a).sum);
}

TEST(Chamfer, RejectsEmptyAndMixedDimensions) {
  PointSet empty(2, {});
  PointSet a(2, {0, 0});
  PointSet c(3, {0, 0, 0});
  EXPECT_THROW(chamfer(empty, a), EmptyInputError);
  EXPECT_THROW(chamfer(a, c), DimensionError);
}

TEST(Gmm, MatchesExtendedPrecisionAtSmallSigma) {
  std::mt19937_64 rng(2);
  for (double sigma : {1.0, 0.3, 0.1, 0.02}) {
    auto x = random_points(30, 2, rng), y = random_points(35, 2, rng);
    const long double expect = naive_gmm(x, y, sigma);
    EXPECT_NEAR(gmm_loss(x, y, sigma) / static_cast<double>(expect), 1.0, 1e-10) << sigma;
  }
}

TEST(Gmm, FarPointsStayFinite) {
  PointSet x(2, {0, 0});
  PointSet y(2, {5, 5});
  // Naive evaluation underflows to log(0); the shifted form gives ½‖50‖².
  EXPECT_NEAR(gmm_loss(x, y, 0.1), 0.5 * 5000.0, 1e-9);
}

TEST(Gmm, GradientMatchesFiniteDifference) {
  std::mt19937_64 rng(3);
  auto y = random_points(12, 3, rng);
  auto xs = random_points(10, 3, rng);
  auto x = Tensor<double>::parameter({10, 3}, xs.coords());
  for (double sigma : {1.0, 0.1}) {
    EXPECT_LT(max_gradient_error([&] { return gmm_loss(x, y, sigma); }, {&x}), 1e-5) << sigma;
  }
}

TEST(Gmm, RejectsBadArguments) {
  PointSet y(2, {0, 0});
  auto x = Tensor<double>::constant({1, 2}, {0, 0});
  auto x3 = Tensor<double>::constant({1, 3}, {0, 0, 0});
  EXPECT_THROW(gmm_loss(x, y, 0.0), ContractError);
  EXPECT_THROW(gmm_loss(x3, y, 1.0), DimensionError);
  EXPECT_THROW(gmm_loss(x, PointSet(2, {}), 1.0), EmptyInputError);
}

TEST(Annealing, SquareRootScheduleWithFloor) {
  AnnealingSchedule s{1.0, kSigmaFloor};
  EXPECT_EQ(s.sigma_at(1), 1.0);
  EXPECT_DOUBLE_EQ(s.sigma_at(4), 0.5);
  EXPECT_DOUBLE_EQ(s.sigma_at(25), 0.2);
  EXPECT_DOUBLE_EQ(s.sigma_at(100), 0.1);
  EXPECT_DOUBLE_EQ(s.sigma_at(10000), 0.1);
  EXPECT_THROW(s.sigma_at(0), ContractError);
  AnnealingSchedule noisy{1.0, kSigmaFloorNoisy};
  EXPECT_DOUBLE_EQ(noisy.sigma_at(1000), 0.12);
}

TEST(PointSets, NormalizeCentersAndScales) {
  PointSet p(2, {1, 1, 3, 1, 2, 5});
  auto q = normalize(p);
  double cx = 0, cy = 0, m = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    cx += q(i, 0);
    cy += q(i, 1);
    m = std::max({m, std::abs(q(i, 0)), std::abs(q(i, 1))});
  }
  EXPECT_NEAR(cx, 0, 1e-15);
  EXPECT_NEAR(cy, 0, 1e-15);
  EXPECT_DOUBLE_EQ(m, 0.9);
  auto s = normalizing_similarity(p);
  auto back = s.invert(s.apply(p));
  for (std::size_t i = 0; i < p.coords().size(); ++i) EXPECT_NEAR(back.coords()[i], p.coords()[i], 1e-14);
}

TEST(PointSets, ParseWriteRoundTrip) {
  std::istringstream in("# comment\n1.5, 2\n  -3 4e-1\n\n");
  auto p = parse_points(in, "mem");
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p(1, 1), 0.4);
  std::ostringstream out;
  write_points(p, out);
  std::istringstream again(out.str());
  EXPECT_EQ(parse_points(again, "mem2"), p);
}

TEST(PointSets, ParsesObjVerticesAndRejectsGarbage) {
  std::istringstream obj("v 1 2 3\nvn 0 0 1\nv 4 5 6\nf 1 2 3\n");
  auto p = parse_points(obj, "mesh.obj");
  EXPECT_EQ(p.dim(), 3);
  EXPECT_EQ(p.size(), 2u);
  std::istringstream bad("1 2\n3 4x\n");
  EXPECT_THROW(parse_points(bad, "bad"), ParseError);
  std::istringstream mixed("1 2\n1 2 3\n");
  EXPECT_THROW(parse_points(mixed, "mixed"), ParseError);
  EXPECT_THROW(read_points("/nonexistent/points.txt"), IoError);
}

TEST(PointSets, ShortestRoundTripFormatting) {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-17, 123456789.125}) EXPECT_EQ(std::stod(format_double(v)), v);
}
