#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>

#include "scmis/errors.hpp"
#include "scmis/metrics.hpp"
#include "support.hpp"

using namespace scmis;
using namespace scmis::metrics;

namespace {

FeatureStats gaussian(std::vector<double> mu, std::vector<std::vector<double>> cov) {
  FeatureStats s;
  const auto d = static_cast<Eigen::Index>(mu.size());
  s.mu = Eigen::Map<Eigen::VectorXd>(mu.data(), d);
  s.cov.resize(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) s.cov(i, j) = cov[i][j];
  }
  s.n = 100;
  return s;
}

Eigen::MatrixXd random_spd(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Eigen::MatrixXd a(d, d);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) a(i, j) = n(rng);
  }
  return a * a.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d);
}

// tr((S1 S2)^(1/2)) through the symmetric form S1^(1/2) S2 S1^(1/2).
double brute_frechet(const FeatureStats& a, const FeatureStats& b) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e1(a.cov);
  Eigen::MatrixXd root = e1.eigenvectors() *
                         e1.eigenvalues().cwiseMax(0).cwiseSqrt().asDiagonal() *
                         e1.eigenvectors().transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e2(root * b.cov * root);
  const double tr_sqrt = e2.eigenvalues().cwiseMax(0).cwiseSqrt().sum();
  return (a.mu - b.mu).squaredNorm() + a.cov.trace() + b.cov.trace() - 2 * tr_sqrt;
}

// Per-channel means: a 3-dimensional toy feature.
class ChannelMeanExtractor final : public FeatureExtractor {
 public:
  Eigen::VectorXd extract(const torch::Tensor& rgb) override {
    auto m = rgb.to(torch::kFloat64).mean({1, 2}).contiguous();
    return Eigen::Map<const Eigen::VectorXd>(m.data_ptr<double>(), m.numel());
  }
};

DepthMetrics depth_of(std::vector<double> p, std::vector<double> g) {
  auto pt = torch::tensor(p, torch::kFloat64);
  auto gt = torch::tensor(g, torch::kFloat64);
  return depth_metrics(pt, gt, torch::ones_like(gt, torch::kBool));
}

ConfusionMatrix conf_of(std::vector<std::vector<int64_t>> rows) {
  const auto n = static_cast<Eigen::Index>(rows.size());
  ConfusionMatrix c(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) c(i, j) = rows[i][j];
  }
  return c;
}

}  // namespace

TEST(Frechet, IdenticalStatsGiveZero) {
  std::mt19937_64 rng(3);
  FeatureStats s;
  s.mu = Eigen::VectorXd::Random(5);
  s.cov = random_spd(5, rng);
  EXPECT_NEAR(frechet_distance(s, s), 0.0, 1e-9);
}

TEST(Frechet, UnivariateHandValues) {
  // N(0, 1) vs N(1, 1): the means differ by 1.
  EXPECT_NEAR(frechet_distance(gaussian({0}, {{1}}), gaussian({1}, {{1}})), 1.0, 1e-12);
  // N(0, 1) vs N(0, 4): 1 + 4 - 2 * 2.
  EXPECT_NEAR(frechet_distance(gaussian({0}, {{1}}), gaussian({0}, {{4}})), 1.0, 1e-12);
  // Diagonal case splits per dimension.
  EXPECT_NEAR(frechet_distance(gaussian({0, 0}, {{1, 0}, {0, 9}}),
                               gaussian({3, 0}, {{4, 0}, {0, 1}})),
              9.0 + 1.0 + 4.0, 1e-12);
}

TEST(Frechet, MatchesSymmetricSquareRootOracle) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 2 + trial % 6;
    FeatureStats a, b;
    a.mu = Eigen::VectorXd::Random(d);
    b.mu = Eigen::VectorXd::Random(d);
    a.cov = random_spd(d, rng);
    b.cov = random_spd(d, rng);
    const double f = frechet_distance(a, b);
    EXPECT_NEAR(f, brute_frechet(a, b), 1e-8 * (1 + f)) << "trial " << trial;
    EXPECT_NEAR(f, frechet_distance(b, a), 1e-8 * (1 + f));
    EXPECT_GE(f, 0.0);
  }
}

TEST(Frechet, RejectsBadInputs) {
  auto sym = gaussian({0, 0}, {{1, 0}, {0, 1}});
  auto skew = gaussian({0, 0}, {{1, 0.5}, {0, 1}});
  EXPECT_THROW(frechet_distance(sym, skew), ContractViolation);
  EXPECT_THROW(frechet_distance(sym, gaussian({0}, {{1}})), ContractViolation);
}

TEST(FeatureStats, UnbiasedCovariance) {
  Eigen::MatrixXd x(3, 1);
  x << 1, 2, 3;
  auto s = feature_stats(x);
  EXPECT_DOUBLE_EQ(s.mu(0), 2.0);
  EXPECT_DOUBLE_EQ(s.cov(0, 0), 1.0);
  EXPECT_EQ(s.n, 3);
  EXPECT_THROW(feature_stats(Eigen::MatrixXd(1, 2)), ContractViolation);
}

TEST(Fid, IdenticalSetsGiveZero) {
  std::vector<torch::Tensor> set;
  for (int i = 0; i < 6; ++i) set.push_back(torch::rand({3, 8, 8}) * 2 - 1);
  ChannelMeanExtractor ex;
  EXPECT_NEAR(fid(set, set, ex), 0.0, 1e-9);
}

TEST(Fid, ShiftedSetsGiveSquaredShift) {
  // Two images per set with the same spread; only the mean moves.
  std::vector<torch::Tensor> a{torch::full({3, 4, 4}, 0.1), torch::full({3, 4, 4}, 0.3)};
  std::vector<torch::Tensor> b{torch::full({3, 4, 4}, -0.5), torch::full({3, 4, 4}, -0.3)};
  MeanPixelExtractor ex;
  EXPECT_NEAR(fid(a, b, ex), 0.36, 1e-6);
}

TEST(Fid, MatchesBruteForceStatistics) {
  torch::manual_seed(5);
  std::vector<torch::Tensor> a, b;
  for (int i = 0; i < 12; ++i) {
    a.push_back(torch::rand({3, 6, 6}) * 2 - 1);
    b.push_back(torch::rand({3, 6, 6}) * 1.5 - 0.5);
  }
  ChannelMeanExtractor ex;
  auto stack = [&](const std::vector<torch::Tensor>& set) {
    Eigen::MatrixXd rows(static_cast<Eigen::Index>(set.size()), 3);
    for (size_t i = 0; i < set.size(); ++i) {
      rows.row(static_cast<Eigen::Index>(i)) = ex.extract(set[i]).transpose();
    }
    FeatureStats s;
    s.mu = rows.colwise().mean().transpose();
    Eigen::MatrixXd c = rows.rowwise() - s.mu.transpose();
    s.cov = c.transpose() * c / static_cast<double>(rows.rows() - 1);
    return s;
  };
  const double expect = brute_frechet(stack(a), stack(b));
  EXPECT_NEAR(fid(a, b, ex), expect, 1e-9 * (1 + expect));

  std::reverse(a.begin(), a.end());
  EXPECT_NEAR(fid(a, b, ex), expect, 1e-9 * (1 + expect));
}

TEST(Fid, TooFewImagesIsRejected) {
  MeanPixelExtractor ex;
  std::vector<torch::Tensor> one{torch::zeros({3, 2, 2})};
  EXPECT_THROW(fid(one, one, ex), ContractViolation);
}

TEST(Fid, MissingWeightsAreReported) {
  fixtures::TempDir dir("cache");
  ::setenv("SCMIS_CACHE", dir.path().c_str(), 1);
  EXPECT_THROW(resolve_weights("no_such_extractor.pt"), DataError);
  std::ofstream(dir / "cached.pt") << "x";
  EXPECT_EQ(resolve_weights("cached.pt"), dir / "cached.pt");
  EXPECT_THROW(TorchScriptExtractor(dir / "cached.pt"), DataError);
  ::unsetenv("SCMIS_CACHE");
}

TEST(DepthMetrics, HandValues) {
  auto one = depth_of({1}, {2});
  EXPECT_DOUBLE_EQ(one.abs_rel, 0.5);
  EXPECT_DOUBLE_EQ(one.rmse, 1.0);
  EXPECT_DOUBLE_EQ(one.sq_rel, 0.5);

  auto two = depth_of({2, 4}, {1, 2});
  EXPECT_DOUBLE_EQ(two.abs_rel, 1.0);
  EXPECT_DOUBLE_EQ(two.rmse, std::sqrt(2.5));
  EXPECT_DOUBLE_EQ(two.sq_rel, 1.5);
}

TEST(DepthMetrics, ScalingBehaviour) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.5, 9.5), scale(0.1, 10.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> p(7), g(7);
    for (int i = 0; i < 7; ++i) {
      p[i] = u(rng);
      g[i] = u(rng);
    }
    const double lambda = scale(rng);
    auto base = depth_of(p, g);
    for (auto& v : p) v *= lambda;
    for (auto& v : g) v *= lambda;
    auto scaled = depth_of(p, g);
    EXPECT_NEAR(scaled.abs_rel, base.abs_rel, 1e-12 * (1 + base.abs_rel));
    EXPECT_NEAR(scaled.rmse, lambda * base.rmse, 1e-12 * (1 + scaled.rmse));
    EXPECT_NEAR(scaled.sq_rel, lambda * base.sq_rel, 1e-12 * (1 + scaled.sq_rel));
  }
}

TEST(DepthMetrics, OnlyJointlyValidPixelsCount) {
  auto values = [](std::vector<float> v) { return torch::tensor(v).view({1, 1, 3}); };
  auto mask = [](std::vector<bool> v) {
    auto t = torch::zeros({1, 3}, torch::kBool);
    for (int i = 0; i < 3; ++i) t[0][i] = static_cast<bool>(v[i]);
    return t;
  };
  // With max depth 10 m, value 0 is 5 m and value -0.8 is 1 m.
  DepthMap gt(values({0.0f, 0.0f, -1.0f}), mask({true, true, false}), 10.0);
  DepthMap pred(values({0.0f, -0.8f, 0.0f}), mask({true, false, true}), 10.0);
  auto m = depth_metrics(pred, gt);
  EXPECT_NEAR(m.abs_rel, 0.0, 1e-12);

  DepthMap none(values({-1.0f, -1.0f, -1.0f}), mask({false, false, false}), 10.0);
  EXPECT_THROW(depth_metrics(pred, none), DataError);
}

TEST(DepthMetrics, AccumulatorPoolsPixels) {
  DepthAccumulator acc;
  auto ones = [](int64_t n) { return torch::ones({n}, torch::kBool); };
  acc.add(torch::tensor({1.0}), torch::tensor({2.0}), ones(1));
  acc.add(torch::tensor({2.0, 4.0}), torch::tensor({1.0, 2.0}), ones(2));
  EXPECT_EQ(acc.pixels(), 3);
  auto pooled = depth_of({1, 2, 4}, {2, 1, 2});
  auto r = acc.result();
  EXPECT_DOUBLE_EQ(r.abs_rel, pooled.abs_rel);
  EXPECT_DOUBLE_EQ(r.rmse, pooled.rmse);
  EXPECT_DOUBLE_EQ(r.sq_rel, pooled.sq_rel);
}

TEST(Miou, HandValues) {
  EXPECT_DOUBLE_EQ(miou(conf_of({{5, 0}, {0, 3}})), 1.0);
  EXPECT_DOUBLE_EQ(miou(conf_of({{1, 1}, {1, 1}})), 1.0 / 3.0);
  // Class 2 never occurs in either map and is excluded.
  EXPECT_DOUBLE_EQ(miou(conf_of({{2, 0, 0}, {0, 2, 0}, {0, 0, 0}})), 1.0);
  EXPECT_THROW(miou(conf_of({{0, 0}, {0, 0}})), ContractViolation);
}

TEST(Miou, InvariantUnderClassRelabeling) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int64_t> count(0, 20);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 5;
    ConfusionMatrix c(n, n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) c(i, j) = count(rng);
    }
    std::vector<int> perm{0, 1, 2, 3, 4};
    std::shuffle(perm.begin(), perm.end(), rng);
    ConfusionMatrix p(n, n);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) p(perm[i], perm[j]) = c(i, j);
    }
    EXPECT_NEAR(miou(c), miou(p), 1e-12);
    EXPECT_GE(miou(c), 0.0);
    EXPECT_LE(miou(c), 1.0);
  }
}

TEST(Miou, ConfusionCountsMatchPixelPairs) {
  auto gt = LabelMap(torch::tensor(std::vector<int64_t>{0, 1, 1, kVoidLabel}).view({2, 2}), 3);
  auto pred = LabelMap(torch::tensor(std::vector<int64_t>{0, 2, 1, 1}).view({2, 2}), 3);
  ConfusionMatrix conf = ConfusionMatrix::Zero(3, 3);
  accumulate_confusion(conf, pred, gt);
  EXPECT_EQ(conf.sum(), 3);
  EXPECT_EQ(conf(0, 0), 1);
  EXPECT_EQ(conf(1, 2), 1);
  EXPECT_EQ(conf(1, 1), 1);
  ConfusionMatrix wrong = ConfusionMatrix::Zero(2, 2);
  EXPECT_THROW(accumulate_confusion(wrong, pred, gt), ContractViolation);
}
