#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "prnet/losses.hpp"
#include "prnet/model.hpp"
#include "test_support.hpp"

using namespace prnet;
using prnet::testing::max_gradient_error;
using prnet::testing::random_points;

namespace {

ModelConfig narrow_config() {
  ModelConfig c;
  c.grid_resolution = {5, 5};
  c.mlp_widths = {4, 6};
  c.conv_channels = {5, 6, 7};
  c.conv_kernels = {3, 2, 2};
  c.fc_widths = {8, 18};
  return c;
}

// Random values everywhere, including the zero-initialized output layer.
template <typename T>
PrNetWeights<T> random_weights(const ModelConfig& c, std::uint64_t seed) {
  auto w = init_weights<T>(c, seed);
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (auto& v : w.fc.back().weight.mutable_data()) v = static_cast<T>(u(rng));
  for (auto& v : w.fc.back().bias.mutable_data()) v = static_cast<T>(u(rng));
  return w;
}

PointSet permuted(const PointSet& p, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(p.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  PointSet out(p.dim(), {});
  for (auto i : idx) out.push_back(p.point(i));
  return out;
}

}  // namespace

TEST(Model, ConfigDefaults) {
  auto c2 = ModelConfig::for_dimension(2);
  EXPECT_EQ(c2.grid_points(), 121u);
  EXPECT_EQ(c2.theta_count(), 18u);
  EXPECT_EQ(c2.flattened_width(), 512u * 2 * 2);
  EXPECT_NO_THROW(c2.validate());
  auto c3 = ModelConfig::for_dimension(3);
  EXPECT_EQ(c3.grid_points(), 125u);
  EXPECT_EQ(c3.theta_count(), 81u);
  EXPECT_EQ(c3.flattened_width(), 512u);
  EXPECT_NO_THROW(c3.validate());
  EXPECT_THROW(ModelConfig::for_dimension(4), DimensionError);
  auto bad = c2;
  bad.fc_widths = {64, 17};
  EXPECT_THROW(bad.validate(), DimensionError);
  bad = c2;
  bad.conv_kernels = {3, 4, 9};
  EXPECT_THROW(bad.validate(), DimensionError);
}

TEST(Model, ReferenceGridSpansUnitBox) {
  auto g = build_reference_grid(2, {3, 4});
  ASSERT_EQ(g.size(), 12u);
  EXPECT_EQ(g(0, 0), -1.0);
  EXPECT_EQ(g(0, 1), -1.0);
  EXPECT_EQ(g(11, 0), 1.0);
  EXPECT_EQ(g(11, 1), 1.0);
}

TEST(Model, ParameterManifest) {
  auto w = init_weights<float>(ModelConfig::for_dimension(2), 7);
  auto names = w.parameter_names();
  EXPECT_EQ(names.size(), w.parameters().size());
  EXPECT_EQ(names.front(), "mlp0.weight");
  EXPECT_EQ(names.back(), "fc1.bias");
  EXPECT_TRUE(std::all_of(w.fc.back().weight.data().begin(), w.fc.back().weight.data().end(),
                          [](float v) { return v == 0.0f; }));
  auto d = w.cast<double>();
  EXPECT_EQ(d.parameter_count(), w.parameter_count());
  EXPECT_EQ(static_cast<float>(d.conv[1].kernel[17]), w.conv[1].kernel[17]);
  auto again = init_weights<float>(ModelConfig::for_dimension(2), 7);
  EXPECT_TRUE(std::equal(again.conv[2].kernel.data().begin(), again.conv[2].kernel.data().end(),
                         w.conv[2].kernel.data().begin()));
}

TEST(Model, DescriptorShapeUnitNormAndPermutationInvariance) {
  std::mt19937_64 rng(1);
  auto w = init_weights<float>(ModelConfig::for_dimension(2), 3);
  auto p = random_points(128, 2, rng, 0.9);
  auto sdt = compute_sdt<float>(p, w);
  ASSERT_EQ(sdt.shape(), (Shape{121, 128}));
  for (std::size_t g = 0; g < 121; g += 30) {
    double n = 0;
    for (std::size_t c = 0; c < 128; ++c) n += double(sdt[g * 128 + c]) * sdt[g * 128 + c];
    EXPECT_NEAR(n, 1.0, 1e-5);
  }
  for (int i = 0; i < 5; ++i) {
    auto q = compute_sdt<float>(permuted(p, rng), w);
    EXPECT_TRUE(std::equal(q.data().begin(), q.data().end(), sdt.data().begin()));
  }
}

TEST(Model, FreshModelIsIdentity) {
  std::mt19937_64 rng(2);
  for (int dim : {2, 3}) {
    auto w = init_weights<float>(ModelConfig::for_dimension(dim), 5);
    auto s = random_points(40, dim, rng, 0.9), t = random_points(50, dim, rng, 0.9);
    auto [warp, moved] = forward(s, t, w);
    auto base = make_control_grid(dim);
    EXPECT_EQ(warp.targets, base.points);
    for (std::size_t i = 0; i < s.coords().size(); ++i) EXPECT_NEAR(moved.coords()[i], s.coords()[i], 1e-5);
  }
}

TEST(Model, CorrelationShapeAndNormalization) {
  std::mt19937_64 rng(3);
  auto a = Tensor<double>::constant({2, 6, 4}, prnet::testing::uniform_values(48, rng));
  auto b = Tensor<double>::constant({2, 6, 4}, prnet::testing::uniform_values(48, rng));
  auto c = compute_correlation(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 6, 6}));
  for (std::size_t i = 0; i < 6; ++i) {
    double n = 0;
    for (std::size_t j = 0; j < 6; ++j) n += c[(1 * 6 + j) * 6 + i] * c[(1 * 6 + j) * 6 + i];
    EXPECT_NEAR(n, 1.0, 1e-12);
  }
  EXPECT_THROW(compute_correlation(a, Tensor<double>::zeros({2, 6, 5})), DimensionError);
}

TEST(Model, BatchedEvalMatchesSinglePairs) {
  std::mt19937_64 rng(4);
  auto w = random_weights<double>(narrow_config(), 9);
  std::vector<PointSet> s, t;
  for (int i = 0; i < 3; ++i) {
    s.push_back(random_points(20 + i, 2, rng, 0.9));
    t.push_back(random_points(25 - i, 2, rng, 0.9));
  }
  s[2] = s[0];  // shared source exercises descriptor reuse
  NoGradGuard guard;
  auto batched = forward_batch<double>(w, std::span<const PointSet>(s), std::span<const PointSet>(t), NormMode::eval);
  for (std::size_t i = 0; i < 3; ++i) {
    auto [warp, moved] = forward(s[i], t[i], w);
    for (std::size_t k = 0; k < moved.coords().size(); ++k)
      EXPECT_NEAR(batched.transformed[i][k], moved.coords()[k], 1e-12);
  }
}

TEST(Model, ThreeDimensionalForwardShapes) {
  std::mt19937_64 rng(5);
  auto w = random_weights<float>(ModelConfig::for_dimension(3), 1);
  std::vector<PointSet> s{random_points(30, 3, rng, 0.9), random_points(30, 3, rng, 0.9)};
  std::vector<PointSet> t{random_points(35, 3, rng, 0.9), random_points(35, 3, rng, 0.9)};
  auto out = forward_batch<float>(w, std::span<const PointSet>(s), std::span<const PointSet>(t), NormMode::train);
  EXPECT_EQ(out.theta.shape(), (Shape{2, 81}));
  EXPECT_EQ(out.transformed[1].shape(), (Shape{30, 3}));
}

TEST(Model, RejectsMismatchedInputs) {
  auto w = init_weights<float>(ModelConfig::for_dimension(2), 1);
  PointSet s3(3, {0, 0, 0, 1, 1, 1});
  PointSet s2(2, {0, 0, 1, 1});
  EXPECT_THROW(forward(s3, s3, w), DimensionError);
  EXPECT_THROW(forward(s2, PointSet(2, {}), w), EmptyInputError);
}

class ModelGradient : public ::testing::TestWithParam<bool> {};

// Every scalar of a narrow network against central differences, in train
// mode, with and without a source shared across the batch.
TEST_P(ModelGradient, MatchesFiniteDifferences) {
  const bool shared = GetParam();
  std::mt19937_64 rng(6);
  auto w = random_weights<double>(narrow_config(), 11);
  std::vector<PointSet> s{random_points(12, 2, rng, 0.9), random_points(12, 2, rng, 0.9),
                          random_points(12, 2, rng, 0.9)};
  std::vector<PointSet> t{random_points(14, 2, rng, 0.9), random_points(14, 2, rng, 0.9),
                          random_points(14, 2, rng, 0.9)};
  if (shared) s[1] = s[2] = s[0];
  auto loss = [&] {
    auto out = forward_batch<double>(w, std::span<const PointSet>(s), std::span<const PointSet>(t), NormMode::train);
    std::vector<Tensor<double>> terms;
    for (std::size_t b = 0; b < s.size(); ++b) terms.push_back(gmm_loss(out.transformed[b], t[b], 0.3));
    return add_scalars(terms);
  };
  EXPECT_LT(max_gradient_error(loss, w.parameters()), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Sources, ModelGradient, ::testing::Values(false, true));
