#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "eqan/solvers.hpp"

using namespace eqan;

namespace {

AffinityMatrix<double> random_affinity(std::size_t n, std::size_t k, std::uint64_t seed, double sigma = 1.0) {
  Rng rng(seed);
  Graph g1, g2;
  g1.points = Matrix<double>(n, 2);
  for (double& x : g1.points.flat()) x = rng.uniform(-1, 1);
  g2.points = g1.points;
  for (double& x : g2.points.flat()) x += rng.normal(0, 0.1);
  g1.edges = knn_edges_clamped(g1.points, k);
  g2.edges = knn_edges_clamped(g2.points, k);
  return build_affinity<double>(g1.points, g2.points, g1, g2, sigma, UnaryMode::Gaussian);
}

Eigen::MatrixXd dense(const AffinityMatrix<double>& m) {
  Eigen::MatrixXd d(m.nodes(), m.nodes());
  for (std::size_t a = 0; a < m.nodes(); ++a)
    for (std::size_t b = 0; b < m.nodes(); ++b) d(a, b) = m.dense(a, b);
  return d;
}

// Reference Sinkhorn on an Eigen matrix.
Eigen::MatrixXd eigen_sinkhorn(Eigen::MatrixXd x, int rounds) {
  for (int t = 0; t < rounds; ++t) {
    x = x.array().colwise() / x.rowwise().sum().array();
    x = x.array().rowwise() / x.colwise().sum().array();
  }
  return x;
}

// Row-major n x n matrix view of an association vector.
Eigen::MatrixXd as_matrix(const std::vector<double>& z, std::size_t n) {
  Eigen::MatrixXd m(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m(i, j) = z[i * n + j];
  return m;
}

}  // namespace

TEST(Sinkhorn, TwoByTwoClosedForm) {
  Matrix<double> x(2, 2, std::vector<double>{2, 1, 1, 2});
  const auto s = sinkhorn(x, 200);
  EXPECT_NEAR(s(0, 0), 2.0 / 3.0, 1e-14);
  EXPECT_NEAR(s(0, 1), 1.0 / 3.0, 1e-14);
  EXPECT_NEAR(s(1, 1), 2.0 / 3.0, 1e-14);
}

TEST(Sinkhorn, ConvergesOnRandomPositive) {
  Rng rng(1);
  for (int r = 0; r < 50; ++r) {
    Matrix<double> x(20, 20);
    for (double& v : x.flat()) v = rng.uniform(0.01, 1.0);
    EXPECT_LT(max_stochastic_deviation(sinkhorn(x, 50)), 1e-8);
  }
}

TEST(Sinkhorn, MatchesReferenceLoop) {
  Rng rng(2);
  Matrix<double> x(6, 6);
  for (double& v : x.flat()) v = rng.uniform(0.1, 2.0);
  Eigen::MatrixXd e(6, 6);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) e(i, j) = x(i, j);
  const auto got = sinkhorn(x, 3);
  const auto want = eigen_sinkhorn(e, 3);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(got(i, j), want(i, j), 1e-15);
}

TEST(Sinkhorn, FromLogMatchesExp) {
  Rng rng(3);
  std::vector<double> s(25);
  for (double& v : s) v = rng.uniform(-30, 30);
  std::vector<double> out(25);
  kernels::sinkhorn_from_log<double>(s, out, 5, 5, 4);
  // Shift per row first so exp stays finite; scaling rows commutes with Sinkhorn.
  Matrix<double> e(5, 5);
  for (std::size_t i = 0; i < 5; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < 5; ++j) mx = std::max(mx, s[i * 5 + j]);
    for (std::size_t j = 0; j < 5; ++j) e(i, j) = std::exp(s[i * 5 + j] - mx);
  }
  const auto want = sinkhorn(e, 4);
  for (std::size_t k = 0; k < 25; ++k) EXPECT_NEAR(out[k], want.flat()[k], 1e-12);
}

TEST(Sinkhorn, RejectsNonPositive) {
  Matrix<double> x(2, 2, std::vector<double>{1, 0, 1, 1});
  EXPECT_THROW(sinkhorn(x, 5), DomainError);
  x(0, 1) = -1;
  EXPECT_THROW(sinkhorn(x, 5), DomainError);
  EXPECT_THROW(sinkhorn(Matrix<double>(2, 2, 1.0), 0), ConfigError);
}

TEST(Sinkhorn, RectangularHasUnitRows) {
  Rng rng(4);
  Matrix<double> x(3, 5);
  for (double& v : x.flat()) v = rng.uniform(0.1, 1);
  const auto s = sinkhorn(x, 1);
  for (std::size_t i = 0; i < 3; ++i) {
    double r = 0;
    for (std::size_t j = 0; j < 5; ++j) r += s(i, j);
    EXPECT_GT(r, 0.0);
  }
  for (std::size_t j = 0; j < 5; ++j) {
    double c = 0;
    for (std::size_t i = 0; i < 3; ++i) c += s(i, j);
    EXPECT_NEAR(c, 1.0, 1e-14);
  }
}

TEST(Dpgm, StepMatchesDenseOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto m = random_affinity(6, 2, seed);
    Rng rng(seed + 100);
    std::vector<double> z(36);
    for (double& v : z) v = rng.uniform(0.01, 1);
    SolverParams p;
    p.w_p = 0.7;
    p.w_z = 0.3;
    p.sinkhorn_T = 7;
    const auto got = dpgm_step<double>(z, m, p);
    const Eigen::VectorXd zv = Eigen::Map<const Eigen::VectorXd>(z.data(), 36);
    const Eigen::VectorXd s = 0.7 * (dense(m) * zv).array() + 0.3 * zv.array().log();
    std::vector<double> sv(s.data(), s.data() + 36);
    const auto want = eigen_sinkhorn(as_matrix(sv, 6).array().exp(), 7);
    for (std::size_t k = 0; k < 36; ++k) EXPECT_NEAR(got[k], want(k / 6, k % 6), 1e-13);
  }
}

TEST(Dpgm, ProximalWeights) {
  const auto p = SolverParams::from_beta_lambda(0.2, 3.0);
  EXPECT_DOUBLE_EQ(p.w_p, 0.2 / 1.6);
  EXPECT_DOUBLE_EQ(p.w_z, 1.0 / 1.6);
  EXPECT_THROW(SolverParams::from_beta_lambda(0, 1), ConfigError);
  SolverParams bad;
  bad.w_p = -1;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Dpgm, SolveStaysStochasticAndRejectsZeroStart) {
  const auto m = random_affinity(8, 3, 5);
  SolverParams p;
  p.sinkhorn_T = 50;
  const auto z = dpgm_solve<double>(m, p);
  EXPECT_LT(max_stochastic_deviation(Matrix<double>(8, 8, z)), 1e-8);
  std::vector<double> zero(64, 0.0);
  EXPECT_THROW(dpgm_step<double>(zero, m, p), DomainError);
}

TEST(Dpgm, ObjectiveMonotoneBelowStabilityBound) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto m = random_affinity(10, 3, 200 + seed, 0.5);
    const double lam_max = dense(m).selfadjointView<Eigen::Lower>().eigenvalues().cwiseAbs().maxCoeff();
    EXPECT_NEAR(spectral_radius(m), lam_max, 1e-6 * lam_max);
    const double beta = 0.9 / lam_max;
    const auto rows = convergence_trace(m, beta, 1.0 / beta, 200, 100);
    for (std::size_t t = 1; t < rows.size(); ++t) {
      EXPECT_LE(rows[t].objective, rows[t - 1].objective + 1e-10);
      EXPECT_GE(rows[t].lemma_lhs, rows[t].lemma_rhs - 1e-10);
    }
  }
}

TEST(Dpgm, RelaxedObjectiveFormula) {
  const auto m = random_affinity(5, 2, 8);
  Rng rng(8);
  std::vector<double> z(25);
  for (double& v : z) v = rng.uniform(0.01, 1);
  const Eigen::VectorXd zv = Eigen::Map<const Eigen::VectorXd>(z.data(), 25);
  const double want = -0.5 * zv.dot(dense(m) * zv) + 2.0 * (zv.array() * zv.array().log()).sum();
  EXPECT_NEAR(relaxed_objective<double>(m, z, 2.0), want, 1e-12);
}

TEST(Dpgm, RunningMean) {
  std::vector<ConvergenceRow> rows{{0, 0, 0, 0, 0}, {1, 4, 0, 0, 0}, {2, 2, 0, 0, 0}, {3, 1, 0, 0, 0}};
  EXPECT_DOUBLE_EQ(running_mean_step(rows, 2), 3.0);
  EXPECT_DOUBLE_EQ(running_mean_step(rows, 3), 7.0 / 3.0);
}

TEST(Gagm, Schedule) {
  const auto b = gagm_schedule(3);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_DOUBLE_EQ(b[0], 0.5);
  EXPECT_DOUBLE_EQ(b[1], 0.5 * 1.075);
  EXPECT_DOUBLE_EQ(b[2], 0.5 * 1.075 * 1.075);
}

TEST(Gagm, StepMatchesOracle) {
  const auto m = random_affinity(6, 2, 31);
  Rng rng(31);
  std::vector<double> x(36);
  for (double& v : x) v = rng.uniform(0, 1);
  const auto got = gagm_step<double>(x, m, 1.7, 6);
  const Eigen::VectorXd s = 1.7 * dense(m) * Eigen::Map<const Eigen::VectorXd>(x.data(), 36);
  std::vector<double> sv(s.data(), s.data() + 36);
  const auto want = eigen_sinkhorn(as_matrix(sv, 6).array().exp(), 6);
  for (std::size_t k = 0; k < 36; ++k) EXPECT_NEAR(got[k], want(k / 6, k % 6), 1e-13);
  EXPECT_THROW(gagm_solve<double>(m, 2, gagm_schedule(3)), ConfigError);
}

TEST(Sm, ConvergesToLeadingEigenvector) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto m = random_affinity(5, 2, 60 + seed);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(dense(m));
    Eigen::VectorXd v = es.eigenvectors().col(24);
    if (v.sum() < 0) v = -v;
    const double gap = es.eigenvalues()(24) - std::abs(es.eigenvalues()(23));
    ASSERT_GT(gap, 1e-3);
    const auto x = sm_solve<double>(m, 20000);
    for (std::size_t a = 0; a < 25; ++a) EXPECT_NEAR(x[a], v(static_cast<Eigen::Index>(a)), 1e-8);
  }
}

TEST(Sm, DegenerateAffinity) {
  Graph g;
  g.points = Matrix<double>(3, 2);
  const auto pat = AssociationPattern::from_edges(3, 3, g.edges, g.edges);
  AffinityMatrix<double> zero(pat, Matrix<double>(3, 3), {});
  EXPECT_THROW(sm_solve<double>(zero, 1), DegenerateError);
}

TEST(QapLayer, EpsShiftedDpgmStep) {
  const auto m = random_affinity(4, 2, 12);
  Matrix<double> zc(4, 4, 0.0);
  zc(0, 0) = 1;
  SolverParams p;
  const auto out = qap_layer(zc, m, p);
  std::vector<double> shifted(16);
  for (std::size_t k = 0; k < 16; ++k) shifted[k] = zc.flat()[k] + kLogEps;
  const auto want = dpgm_step<double>(shifted, m, p);
  for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(out.flat()[k], want[k]);
  EXPECT_THROW(qap_layer(Matrix<double>(3, 4, 1.0), m, p), InputError);
}
