#include <cmath>
#include <map>
#include <queue>
#include <vector>

#include <gtest/gtest.h>

#include "msrl/core.hpp"
#include "msrl/random.hpp"
#include "oracles.hpp"

using namespace msrl;

TEST(EditDistance, SpecExamples) {
  EXPECT_EQ(edit_distance(TokenSeq{}, TokenSeq{}), 0);
  EXPECT_EQ(edit_distance(TokenSeq{3, 1, 4}, TokenSeq{3, 1, 4}), 0);
  EXPECT_EQ(edit_distance(TokenSeq{3, 1, 4}, TokenSeq{3, 4}), 1);
  EXPECT_EQ(edit_distance(TokenSeq{1, 2, 3, 3, 4, 5}, TokenSeq{2, 2, 3, 3, 2, 5, 6}), 3);
  EXPECT_EQ(edit_distance(TokenSeq{}, TokenSeq{1, 2, 3}), 3);
}

TEST(EditDistance, SpecExamplesAgreeWithOracle) {
  EXPECT_EQ(oracle::edit_distance_bfs({3, 1, 4}, {3, 4}), 1);
  EXPECT_EQ(oracle::edit_distance_bfs({1, 2, 3, 3, 4, 5}, {2, 2, 3, 3, 2, 5, 6}), 3);
}

// Every pair of strings of length <= 3 over {0,1,2}; the acceptance suite
// extends this to length 4.
TEST(EditDistance, ExhaustiveAgainstEditGraphSearch) {
  const auto strings = oracle::all_strings(3, 3);
  for (const auto& a : strings) {
    const auto dist = oracle::edit_distances_from(a, 3, 3);
    for (const auto& b : strings) {
      ASSERT_EQ(edit_distance(a, b), dist.at(b));
      ASSERT_EQ(edit_distance(a, b), edit_distance(b, a));
    }
  }
}

TEST(EditDistance, TriangleInequalityAndBounds) {
  Rng rng(11);
  auto random_seq = [&rng] {
    TokenSeq s(rng.below(7));
    for (auto& t : s) t = static_cast<TokenId>(rng.below(4));
    return s;
  };
  for (int k = 0; k < 1000; ++k) {
    const auto a = random_seq(), b = random_seq(), c = random_seq();
    EXPECT_LE(edit_distance(a, c), edit_distance(a, b) + edit_distance(b, c));
    const int la = static_cast<int>(a.size()), lb = static_cast<int>(b.size());
    EXPECT_GE(edit_distance(a, b), std::abs(la - lb));
    EXPECT_LE(edit_distance(a, b), std::max(la, lb));
  }
}

TEST(Kl, SpecExamples) {
  const Distribution p{0.2, 0.3, 0.5};
  EXPECT_EQ(kl_divergence(p, p), 0.0);
  EXPECT_NEAR(kl_divergence({1.0, 0.0}, {0.5, 0.5}), 0.693147180559945, 1e-12);
  EXPECT_NEAR(kl_divergence({0.5, 0.5}, {0.25, 0.75}), 0.143841036225890, 1e-12);
}

TEST(Kl, RefusesZeroSupportAndSizeMismatch) {
  EXPECT_THROW(kl_divergence({0.5, 0.5}, {1.0, 0.0}), DomainError);
  EXPECT_THROW(kl_divergence({0.5, 0.5}, {1.0, 1e-301}), DomainError);
  EXPECT_NO_THROW(kl_divergence({1.0, 0.0}, {1.0, 0.0}));
  EXPECT_THROW(kl_divergence({0.5, 0.5}, {0.2, 0.3, 0.5}), DimensionError);
}

TEST(Kl, NonnegativeOnRandomPairs) {
  Rng rng(5);
  for (int k = 0; k < 1000; ++k) {
    Eigen::VectorXd a(6), b(6);
    for (int i = 0; i < 6; ++i) {
      a[i] = 3.0 * rng.normal();
      b[i] = 3.0 * rng.normal();
    }
    const auto p = Distribution::softmax(a), q = Distribution::softmax(b);
    EXPECT_GE(kl_divergence(p, q), 0.0);
    EXPECT_NEAR(kl_divergence(p, p), 0.0, 1e-12);
  }
}

TEST(Renormalize, SpecExamples) {
  const std::vector<double> one{-2.3};
  EXPECT_DOUBLE_EQ(renormalize_nbest(one)[0], 1.0);
  const std::vector<double> same{-7.0, -7.0};
  const auto s = renormalize_nbest(same);
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
  const std::vector<double> lp{std::log(0.2), std::log(0.6)};
  const auto r = renormalize_nbest(lp);
  EXPECT_NEAR(r[0], 0.25, 1e-15);
  EXPECT_NEAR(r[1], 0.75, 1e-15);
  EXPECT_THROW(renormalize_nbest(std::vector<double>{}), EmptyInput);
}

TEST(Renormalize, StableAndShiftInvariant) {
  const std::vector<double> deep{-1e4, -1e4 - 1.0, -1e4 - 2.0};
  const auto d = renormalize_nbest(deep);
  double sum = 0.0;
  for (double x : d) {
    EXPECT_TRUE(std::isfinite(x));
    sum += x;
  }
  EXPECT_NEAR(sum, 1.0, 1e-12);

  Rng rng(3);
  for (int k = 0; k < 200; ++k) {
    std::vector<double> lp(4);
    for (auto& x : lp) x = -10.0 * rng.uniform();
    const double c = rng.uniform(-100.0, 100.0);
    std::vector<double> shifted = lp;
    for (auto& x : shifted) x += c;
    const auto a = renormalize_nbest(lp), b = renormalize_nbest(shifted);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(Distribution, ValidityChecks) {
  EXPECT_TRUE(Distribution::uniform(5).is_valid());
  EXPECT_TRUE(Distribution({0.5, 0.5}).is_strictly_positive());
  EXPECT_FALSE(Distribution({0.5, 0.6}).is_valid());
  EXPECT_FALSE(Distribution({1.5, -0.5}).is_valid());
  EXPECT_FALSE(Distribution({1.0, 0.0}).is_strictly_positive());
  EXPECT_FALSE(Distribution().is_valid());
  Eigen::VectorXd big(3);
  big << 1000.0, 0.0, -1000.0;
  const auto p = Distribution::softmax(big);
  EXPECT_TRUE(p.is_valid());
  EXPECT_EQ(p.argmax(), 0);
}

TEST(Vocab, ReservedIds) {
  const Vocab v{20};
  EXPECT_EQ(v.bos(), 20);
  EXPECT_EQ(v.eos(), 21);
  EXPECT_EQ(v.full_size(), 22);
  EXPECT_TRUE(v.is_content(19));
  EXPECT_FALSE(v.is_content(20));
}

TEST(Random, DerivedSeedsAreStableAndDistinct) {
  EXPECT_EQ(derive_seed(1, "world"), derive_seed(1, "world"));
  EXPECT_NE(derive_seed(1, "world"), derive_seed(1, "corpus"));
  EXPECT_NE(derive_seed(1, "world"), derive_seed(2, "world"));
  EXPECT_NE(derive_seed(1, std::uint64_t{0}), derive_seed(1, std::uint64_t{1}));
  Rng a(9), b(9);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.normal(), b.normal());
}

TEST(Random, UniformMoments) {
  Rng rng(1);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    sum += z;
    sq += z * z;
  }
  EXPECT_NEAR(sum / n, 0.0, 0.01);
  EXPECT_NEAR(sq / n, 1.0, 0.02);
  int counts[5] = {0, 0, 0, 0, 0};
  for (int i = 0; i < 50000; ++i) ++counts[rng.below(5)];
  for (int c : counts) EXPECT_NEAR(c / 50000.0, 0.2, 0.01);
}
