#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "sitn/ssl_losses.hpp"

using namespace sitn;
using ag::Var;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

ssl::InterestSpace random_space(int k, int d, int k_top, std::mt19937_64& rng, ssl::Activation act = ssl::Activation::tanh) {
  auto s = ssl::init_space(k, d, k_top, rng, act);
  // Larger prototypes than the default init so the soft assignments are not
  // nearly uniform.
  s.source_clusters->value = random_matrix(k, d, rng);
  s.target_clusters->value = random_matrix(k, d, rng);
  return s;
}

double value(const Var& v) { return ag::scalar(v); }

}  // namespace

TEST(I2I, SingleInstanceIsZero) {
  std::mt19937_64 rng(1);
  EXPECT_NEAR(ssl::i2i_loss(random_matrix(1, 3, rng), random_matrix(1, 3, rng), 0.1), 0.0, 1e-12);
}

TEST(I2I, IdenticalRepresentationsGiveTwoNLogN) {
  std::mt19937_64 rng(2);
  for (int n = 1; n <= 6; ++n) {
    const Matrix row = random_matrix(1, 4, rng);
    const Matrix p = row.replicate(n, 1);
    EXPECT_NEAR(ssl::i2i_loss(p, p, 0.5), 2.0 * n * std::log(static_cast<double>(n)), 1e-6);
  }
}

TEST(I2I, HandCaseTwoByTwo) {
  Matrix p(2, 2);
  p << 1, 0, 0, 1;
  EXPECT_NEAR(ssl::i2i_loss(p, p, 1.0), 4.0 * std::log(1.0 + std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(ssl::i2i_loss(p, p, 1.0), 1.2530, 1e-4);
}

TEST(I2I, RejectsBadTemperatureAndNonFinite) {
  Matrix p = Matrix::Ones(2, 2);
  EXPECT_THROW(ssl::i2i_loss(p, p, 0.0), ConfigError);
  EXPECT_THROW(ssl::i2i_loss(p, p, -1.0), ConfigError);
  Matrix bad = p;
  bad(0, 0) = std::nan("");
  EXPECT_THROW(ssl::i2i_loss(bad, p, 1.0), NumericError);
}

TEST(NewClusters, SingleClusterIsSumOfInstances) {
  std::mt19937_64 rng(3);
  const Matrix p = random_matrix(4, 3, rng);
  const Matrix u = ssl::compute_new_clusters(random_matrix(1, 3, rng), p);
  EXPECT_TRUE(u.row(0).isApprox(p.colwise().sum(), 1e-12));
}

TEST(NewClusters, EqualSimilaritiesGiveUniformWeights) {
  std::mt19937_64 rng(4);
  const Matrix p = random_matrix(5, 3, rng);
  const Matrix c = random_matrix(1, 3, rng).replicate(4, 1);
  const Matrix u = ssl::compute_new_clusters(c, p);
  for (Eigen::Index k = 0; k < 4; ++k) EXPECT_TRUE(u.row(k).isApprox(p.colwise().sum() / 4.0, 1e-12));
}

TEST(NewClusters, HandCaseMatchesOracle) {
  Matrix c(2, 2), p(2, 2);
  c << 1, 0, 0, 1;
  p << 2, 0, 1, 1;
  // p1 weights: softmax(2, 0); p2 weights: softmax(1, 1)
  const double a = std::exp(2.0) / (std::exp(2.0) + 1.0);
  const Matrix u = ssl::compute_new_clusters(c, p);
  EXPECT_NEAR(u(0, 0), a * 2 + 0.5, 1e-12);
  EXPECT_NEAR(u(0, 1), 0.5, 1e-12);
  EXPECT_NEAR(u(1, 0), (1 - a) * 2 + 0.5, 1e-12);
  EXPECT_NEAR(u(1, 1), 0.5, 1e-12);
}

TEST(NewClusters, AssignmentRowsSumToOne) {
  std::mt19937_64 rng(5);
  auto nc = ssl::compute_new_clusters(ag::constant(random_matrix(6, 4, rng, 3.0)), ag::constant(random_matrix(9, 4, rng)));
  for (Eigen::Index i = 0; i < nc.assignments->rows(); ++i) EXPECT_NEAR(nc.assignments->value.row(i).sum(), 1.0, 1e-12);
}

TEST(TopK, AllIndicesSortedWhenKEqualsK) {
  Matrix u(4, 2);
  u << 0, 1, 3, 0, 1, 0, 2, 0;
  RowVector p(2);
  p << 1, 0;
  EXPECT_EQ(ssl::top_k_interests(p, u, 4), (std::vector<int>{1, 3, 2, 0}));
}

TEST(TopK, ParallelClusterSelected) {
  Matrix u(3, 3);
  u << 1, 0, 0, 0, 1, 0, 0, 0, 1;
  RowVector p(3);
  p << 0, 2, 0;
  EXPECT_EQ(ssl::top_k_interests(p, u, 1), (std::vector<int>{1}));
}

TEST(TopK, TiesGoToLowerIndexAndMatchOracle) {
  Matrix u(4, 2);
  u << 1, 0, 1, 0, 0, 1, 2, 0;
  RowVector p(2);
  p << 1, 0;
  EXPECT_EQ(ssl::top_k_interests(p, u, 2), (std::vector<int>{3, 0}));
  std::mt19937_64 rng(6);
  for (int t = 0; t < 50; ++t) {
    Matrix uu = random_matrix(4, 3, rng);
    RowVector pp = random_matrix(1, 3, rng);
    EXPECT_EQ(ssl::top_k_interests(pp, uu, 2), oracle::top_k(oracle::from_eigen(pp)[0], oracle::from_eigen(uu), 2));
  }
  EXPECT_THROW(ssl::top_k_interests(p, u, 0), ConfigError);
  EXPECT_THROW(ssl::top_k_interests(p, u, 5), ConfigError);
}

TEST(MvCluster, IdentityFusionWithOneViewReturnsNearestCluster) {
  std::mt19937_64 rng(7);
  const Matrix u = random_matrix(3, 4, rng);
  const Matrix p = random_matrix(5, 4, rng);
  const auto fusion = ssl::identity_fusion(1, 4);
  const Matrix q = ssl::mv_cluster(ag::constant(p), ag::constant(u), 1, &fusion)->value;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const int j = ssl::top_k_interests(p.row(i), u, 1)[0];
    EXPECT_TRUE(q.row(i).isApprox(u.row(j), 1e-12));
  }
}

TEST(MvCluster, HandSetAffineFusion) {
  Matrix u(3, 2), p(1, 2);
  u << 1, 0, 0, 2, -1, 0;
  p << 0.5, 1;  // similarities 0.5, 2, -0.5 -> order 1, 0
  ssl::FusionMlp f;
  f.activation = ssl::Activation::linear;
  Matrix w1(4, 2), w2(2, 2), b1(1, 2), b2(1, 2);
  w1 << 1, 2, 3, 4, 5, 6, 7, 8;
  w2 << 1, 0, 1, 1;
  b1 << 0.5, -0.5;
  b2 << 1, 1;
  f.w1 = ag::parameter(w1);
  f.w2 = ag::parameter(w2);
  f.b1 = ag::parameter(b1);
  f.b2 = ag::parameter(b2);
  // concat = (0, 2, 1, 0); h = concat*w1 + b1 = (6+5+0.5, 8+6-0.5) = (11.5, 13.5)
  // q = h*w2 + b2 = (11.5+13.5+1, 13.5+1) = (26, 14.5)
  const Matrix q = ssl::mv_cluster(ag::constant(p), ag::constant(u), 2, &f)->value;
  EXPECT_NEAR(q(0, 0), 26.0, 1e-12);
  EXPECT_NEAR(q(0, 1), 14.5, 1e-12);
}

TEST(MvCluster, IdenticalSelectionsGiveIdenticalOutputs) {
  std::mt19937_64 rng(8);
  const Matrix u = random_matrix(4, 3, rng);
  Matrix p(2, 3);
  p.row(0) = random_matrix(1, 3, rng);
  p.row(1) = p.row(0) * 2.0;
  const auto f = ssl::init_fusion(2, 3, rng);
  const Matrix q = ssl::mv_cluster(ag::constant(p), ag::constant(u), 2, &f)->value;
  EXPECT_TRUE(q.row(0) == q.row(1));
}

TEST(MvCluster, FusionWidthMismatchIsConfigError) {
  std::mt19937_64 rng(9);
  const auto f = ssl::init_fusion(3, 4, rng);
  EXPECT_THROW(ssl::mv_cluster(ag::constant(random_matrix(2, 4, rng)), ag::constant(random_matrix(4, 4, rng)), 2, &f),
               ConfigError);
}

TEST(I2C, SingleInstanceSingleClusterIsLogTwoPerDirection) {
  std::mt19937_64 rng(10);
  auto space = ssl::init_space(1, 3, 1, rng);
  space.source_fusion = ssl::identity_fusion(1, 3);
  space.target_fusion = ssl::identity_fusion(1, 3);
  const Matrix ps = random_matrix(1, 3, rng), pt = random_matrix(1, 3, rng);
  ssl::ContrastOptions opt;
  opt.temperature = 0.7;
  // q = u for both directions, so each direction contributes ln 2.
  EXPECT_NEAR(value(ssl::i2c_space_loss(ag::constant(ps), ag::constant(pt), space, opt)), 2.0 * std::log(2.0), 1e-9);
  opt.use_mv = false;
  EXPECT_NEAR(value(ssl::i2c_space_loss(ag::constant(ps), ag::constant(pt), space, opt)), 2.0 * std::log(2.0), 1e-9);
}

TEST(I2C, HandCaseMatchesOracle) {
  std::mt19937_64 rng(11);
  auto space = random_space(2, 2, 1, rng, ssl::Activation::linear);
  Matrix ps(2, 2), pt(2, 2);
  ps << 1, 0, 0.5, -1;
  pt << 0, 1, 1, 1;
  ssl::ContrastOptions opt;
  opt.temperature = 0.5;
  const double got = value(ssl::i2c_space_loss(ag::constant(ps), ag::constant(pt), space, opt));
  const double want = oracle::i2c_space(oracle::from_eigen(ps), oracle::from_eigen(pt), oracle::space_of(space), 0.5, true);
  EXPECT_NEAR(got, want, 1e-9);
}

TEST(I2C, EmptyGranularitySetIsConfigError) {
  Matrix p = Matrix::Ones(2, 2);
  EXPECT_THROW(ssl::i2c_loss(ag::constant(p), ag::constant(p), {}, {}), ConfigError);
}

TEST(I2C, SumsOverSpaces) {
  std::mt19937_64 rng(12);
  const Matrix ps = random_matrix(3, 4, rng), pt = random_matrix(3, 4, rng);
  auto a = random_space(3, 4, 2, rng);
  ssl::ContrastOptions opt;
  const double one = value(ssl::i2c_loss(ag::constant(ps), ag::constant(pt), {a}, opt));
  EXPECT_NEAR(one, value(ssl::i2c_space_loss(ag::constant(ps), ag::constant(pt), a, opt)), 1e-12);
  EXPECT_NEAR(value(ssl::i2c_loss(ag::constant(ps), ag::constant(pt), {a, a}, opt)), 2.0 * one, 1e-9);
  auto b = random_space(2, 4, 1, rng), c = random_space(4, 4, 3, rng);
  double parts = 0.0;
  for (const auto* s : {&a, &b, &c}) parts += value(ssl::i2c_space_loss(ag::constant(ps), ag::constant(pt), *s, opt));
  EXPECT_NEAR(value(ssl::i2c_loss(ag::constant(ps), ag::constant(pt), {a, b, c}, opt)), parts, 1e-9);
}

TEST(Ssl, SwitchesSelectTerms) {
  std::mt19937_64 rng(13);
  const Var ps = ag::constant(random_matrix(4, 3, rng)), pt = ag::constant(random_matrix(4, 3, rng));
  ssl::GranularitySet spaces{random_space(3, 3, 2, rng)};
  ssl::ContrastOptions opt;
  const auto both = ssl::ssl_loss(ps, pt, spaces, opt);
  EXPECT_NEAR(value(both.total), both.i2i + both.i2c, 1e-9);
  EXPECT_NEAR(value(ssl::ssl_loss(ps, pt, spaces, opt, true, false).total), value(ssl::i2i_loss(ps, pt, opt.temperature)), 1e-12);
  EXPECT_NEAR(value(ssl::ssl_loss(ps, pt, spaces, opt, false, true).total), value(ssl::i2c_loss(ps, pt, spaces, opt)), 1e-12);
  EXPECT_THROW(ssl::ssl_loss(ps, pt, spaces, opt, false, false), ConfigError);
}

TEST(Ssl, RandomConfigurationsMatchOracle) {
  std::mt19937_64 rng(14);
  for (int t = 0; t < 120; ++t) {
    const int n = 1 + static_cast<int>(rng() % 4), k = 1 + static_cast<int>(rng() % 3), d = 1 + static_cast<int>(rng() % 4);
    const int l = 1 + static_cast<int>(rng() % 2);
    const double tau = 0.2 + 0.8 * std::uniform_real_distribution<double>(0, 1)(rng);
    const bool use_mv = (rng() % 4) != 0;
    const Matrix ps = random_matrix(n, d, rng), pt = random_matrix(n, d, rng);
    ssl::GranularitySet spaces;
    std::vector<oracle::Space> os;
    for (int s = 0; s < l; ++s) {
      const int kk = s == 0 ? k : 1 + static_cast<int>(rng() % 3);
      spaces.push_back(random_space(kk, d, 1 + static_cast<int>(rng() % kk), rng));
      os.push_back(oracle::space_of(spaces.back()));
    }
    ssl::ContrastOptions opt;
    opt.temperature = tau;
    opt.use_mv = use_mv;
    const auto ops = oracle::from_eigen(ps), opt_ = oracle::from_eigen(pt);
    const auto got = ssl::ssl_loss(ag::constant(ps), ag::constant(pt), spaces, opt);
    EXPECT_NEAR(value(got.total), oracle::ssl(ops, opt_, os, tau, use_mv), 1e-6);
    EXPECT_NEAR(got.i2i, oracle::i2i(ops, opt_, tau), 1e-6);
    EXPECT_NEAR(got.i2c, oracle::i2c(ops, opt_, os, tau, use_mv), 1e-6);
    EXPECT_GE(got.i2i, -1e-12);
    EXPECT_GE(got.i2c, -1e-12);
  }
}

TEST(Ssl, BatchPermutationLeavesLossUnchanged) {
  std::mt19937_64 rng(15);
  const Matrix ps = random_matrix(4, 3, rng), pt = random_matrix(4, 3, rng);
  ssl::GranularitySet spaces{random_space(3, 3, 2, rng), random_space(2, 3, 1, rng)};
  ssl::ContrastOptions opt;
  const double base = value(ssl::ssl_loss(ag::constant(ps), ag::constant(pt), spaces, opt).total);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(4);
  perm.indices() << 2, 0, 3, 1;
  const Matrix qs = perm * ps, qt = perm * pt;
  EXPECT_NEAR(value(ssl::ssl_loss(ag::constant(qs), ag::constant(qt), spaces, opt).total), base, 1e-9);
}

TEST(Ssl, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(16);
  Var ps = ag::parameter(random_matrix(4, 3, rng, 0.5));
  Var pt = ag::parameter(random_matrix(4, 3, rng, 0.5));
  ssl::GranularitySet spaces{random_space(3, 3, 2, rng), random_space(2, 3, 1, rng)};
  std::vector<std::pair<std::string, Var>> params{{"ps", ps}, {"pt", pt}};
  for (std::size_t s = 0; s < spaces.size(); ++s)
    for (auto& kv : spaces[s].named_parameters("space" + std::to_string(s))) params.push_back(kv);
  ssl::ContrastOptions opt;
  opt.temperature = 0.5;
  for (const auto& [name, r] : oracle::gradient_check(params, [&] { return ssl::ssl_loss(ps, pt, spaces, opt).total; }, 20, 3))
    EXPECT_LE(r.max_rel_error, 1e-4) << name << ": " << r.worst;
}
