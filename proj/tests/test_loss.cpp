#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace emae;
using emae::testing::check_gradients;
using emae::testing::random_tensor;

namespace {

// Gather the masked entries of every sample, then 1 - cosine.
double gather_oracle(const Tensor& x_hat, const Tensor& x, const Mask& m) {
  const std::size_t plane = m.rows * m.cols;
  double dot = 0, na = 0, nb = 0;
  for (std::size_t b = 0; b < x.numel() / plane; ++b)
    for (std::size_t i : m.flat_indices) {
      const double a = x_hat[b * plane + i], t = x[b * plane + i];
      dot += a * t;
      na += a * a;
      nb += t * t;
    }
  return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
}

// 1x1x4 signal with the first two positions masked.
const Mask kFirstTwo{{0, 1}, 1, 4};

}  // namespace

TEST(SimilarityLoss, PerfectReconstructionIsZero) {
  const Tensor x(Shape{1, 1, 4}, {1, 2, 9, 9});
  const Tensor x_hat(Shape{1, 1, 4}, {1, 2, -5, 100});
  EXPECT_NEAR(similarity_loss(x_hat, x, kFirstTwo).value, 0.0, 1e-12);
}

TEST(SimilarityLoss, AntiparallelIsTwo) {
  const Tensor x(Shape{1, 1, 4}, {1, 2, 9, 9});
  const Tensor x_hat(Shape{1, 1, 4}, {-1, -2, 3, 3});
  EXPECT_NEAR(similarity_loss(x_hat, x, kFirstTwo).value, 2.0, 1e-12);
}

TEST(SimilarityLoss, HandValue) {
  const Tensor x(Shape{1, 1, 4}, {1, 2, 0, 0});
  const Tensor x_hat(Shape{1, 1, 4}, {2, 1, 7, 7});
  EXPECT_NEAR(similarity_loss(x_hat, x, kFirstTwo).value, 0.2, 1e-12);
}

TEST(SimilarityLoss, DegenerateCases) {
  const Tensor x(Shape{1, 1, 4}, {0, 0, 1, 1});
  EXPECT_THROW(similarity_loss(x, x, kFirstTwo), DegenerateLossError);
  EXPECT_THROW(similarity_loss(x, x, Mask{{}, 1, 4}), DegenerateLossError);
  EXPECT_THROW(similarity_loss(Tensor::ones({1, 1, 3}), Tensor::ones({1, 1, 4}), kFirstTwo), ShapeError);
}

TEST(SimilarityLoss, ZeroReconstructionIsOne) {
  const Tensor x(Shape{1, 1, 4}, {1, 2, 0, 0});
  EXPECT_EQ(similarity_loss(Tensor::zeros({1, 1, 4}), x, kFirstTwo).value, 1.0);
}

TEST(SimilarityLoss, InvariantsOnRandomInputs) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Mask m = generate_mask({5, 6, 0.4, s, 0});
    const Tensor x = random_tensor({3, 5, 6}, s), x_hat = random_tensor({3, 5, 6}, s + 1000);
    const double l = similarity_loss(x_hat, x, m).value;
    EXPECT_GE(l, 0.0);
    EXPECT_LE(l, 2.0);
    EXPECT_NEAR(l, gather_oracle(x_hat, x, m), 1e-12);
    Tensor perturbed = x_hat;
    const auto bits = m.indicator();
    CounterRng rng(s, 5);
    for (std::size_t i = 0; i < perturbed.numel(); ++i)
      if (!bits[i % 30]) perturbed[i] += 50.0 * rng.normal();
    EXPECT_NEAR(similarity_loss(perturbed, x, m).value, l, 1e-12);
    Tensor scaled = x_hat;
    for (auto& v : scaled.data()) v *= 3.7;
    EXPECT_NEAR(similarity_loss(scaled, x, m).value, l, 1e-12);
  }
}

TEST(SimilarityLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Mask m = generate_mask({3, 4, 0.5, s, 0});
    const Tensor x = random_tensor({2, 3, 4}, s + 50);
    auto r = check_gradients({random_tensor({2, 3, 4}, s)},
                             [&](Graph&, const std::vector<Var>& v) { return ad::similarity_loss(v[0], x, m); });
    EXPECT_LE(r.worst, 1e-4) << r.where;
  }
}

TEST(MseLoss, Values) {
  const Tensor x(Shape{1, 1, 4}, {1, 2, 3, 4});
  EXPECT_EQ(mse_loss(x, x, kFirstTwo).value, 0.0);
  const Tensor x_hat(Shape{1, 1, 4}, {2, 1, 30, 40});
  EXPECT_EQ(mse_loss(x_hat, x, kFirstTwo).value, 1.0);
  EXPECT_THROW(mse_loss(x, x, Mask{{}, 1, 4}), DegenerateLossError);
}

TEST(MseLoss, MatchesBruteForceLoop) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Mask m = generate_mask({4, 5, 0.3, s, 0});
    const Tensor x = random_tensor({2, 4, 5}, s), x_hat = random_tensor({2, 4, 5}, s + 7);
    double acc = 0;
    int count = 0;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 5; ++c)
          if (std::find(m.flat_indices.begin(), m.flat_indices.end(), r * 5 + c) != m.flat_indices.end()) {
            const double d = x_hat.at({b, r, c}) - x.at({b, r, c});
            acc += d * d;
            ++count;
          }
    EXPECT_NEAR(mse_loss(x_hat, x, m).value, acc / count, 1e-12);
  }
}

TEST(MseLoss, GradientMatchesFiniteDifferences) {
  const Mask m = generate_mask({3, 4, 0.5, 2, 0});
  const Tensor x = random_tensor({2, 3, 4}, 9);
  auto r = check_gradients({random_tensor({2, 3, 4}, 1)},
                           [&](Graph&, const std::vector<Var>& v) { return ad::mse_loss(v[0], x, m); });
  EXPECT_LE(r.worst, 1e-4) << r.where;
}

TEST(RmseMm, HandValues) {
  const Tensor z = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_EQ(rmse_mm(z, z).value, 0.0);
  EXPECT_EQ(rmse_mm(Tensor::matrix({{3, 4}}), Tensor::matrix({{0, 0}})).value, 5.0);
  EXPECT_NEAR(rmse_mm(Tensor::matrix({{3, 4}, {1, 1}}), Tensor::matrix({{0, 0}, {1, 1}})).value, std::sqrt(12.5),
              1e-15);
  EXPECT_NEAR(std::sqrt(12.5), 3.5355, 1e-4);
}

TEST(RmseMm, PermutationInvariant) {
  const Tensor p = random_tensor({6, 2}, 1), t = random_tensor({6, 2}, 2);
  Tensor pr(Shape{6, 2}), tr(Shape{6, 2});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t k = 0; k < 2; ++k) {
      pr.at({i, k}) = p.at({5 - i, k});
      tr.at({i, k}) = t.at({5 - i, k});
    }
  EXPECT_NEAR(rmse_mm(p, t).value, rmse_mm(pr, tr).value, 1e-14);
  EXPECT_GT(rmse_mm(p, t).value, 0.0);
}

TEST(RmseMm, EmptyIsContractError) {
  EXPECT_THROW(rmse_mm(std::span<const double>{}, std::span<const double>{}), ContractError);
}

TEST(MeanSquaredDistance, IsSquareOfRmse) {
  const Tensor p = random_tensor({5, 2}, 3), t = random_tensor({5, 2}, 4);
  Graph g;
  Var v = ad::mean_squared_distance(g.constant(p), t);
  EXPECT_NEAR(std::sqrt(v.value().item()), rmse_mm(p, t).value, 1e-14);
  auto r = check_gradients({p}, [&](Graph&, const std::vector<Var>& x) { return ad::mean_squared_distance(x[0], t); });
  EXPECT_LE(r.worst, 1e-4) << r.where;
}
