#include "mnarci/pel.hpp"

#include <gtest/gtest.h>

using namespace mnarci;

namespace {

// Independent pseudo-log, threshold 1/n.
double log_star(double x, double n) {
  const double eps = 1.0 / n;
  if (x >= eps) return std::log(x);
  const double r = x / eps;
  return std::log(eps) - 1.5 + 2.0 * r - 0.5 * r * r;
}

MomentModel linear_model(const Matrix& x, const Vector& y) {
  MomentModel m;
  m.instruments = x;
  m.design = x;
  m.response = y;
  return m;
}

}  // namespace

TEST(SoftThreshold, ClosedForm) {
  const Vector got = soft_threshold(Eigen::Vector3d(3, -1, 0.5), 1.0);
  EXPECT_EQ(got, Eigen::Vector3d(2, 0, 0));
  const Vector v = Eigen::Vector4d(-2.5, 0.1, 7, -0.3);
  EXPECT_EQ(soft_threshold(v, 0.0), v);
  EXPECT_EQ(soft_threshold(v, 7.0), Vector::Zero(4));
  EXPECT_EQ(soft_threshold(Eigen::Vector2d(-3, 4), 1.5), Eigen::Vector2d(-1.5, 2.5));
  EXPECT_THROW(soft_threshold(v, -1.0), Error);
}

TEST(RobustLoss, Huber) {
  const double c = 1.3;
  const LossValue in = robust_loss(0.7, RobustKind::huber, c);
  EXPECT_DOUBLE_EQ(in.value, 0.5 * 0.49);
  EXPECT_DOUBLE_EQ(in.psi, 0.7);
  const LossValue out = robust_loss(2 * c, RobustKind::huber, c);
  EXPECT_NEAR(out.value, 1.5 * c * c, 1e-15);
  EXPECT_DOUBLE_EQ(out.psi, c);
  EXPECT_DOUBLE_EQ(robust_loss(-2 * c, RobustKind::huber, c).psi, -c);
}

TEST(RobustLoss, TukeyBoundary) {
  const double c = 2.0;
  const LossValue at = robust_loss(c, RobustKind::tukey, c);
  EXPECT_NEAR(at.value, c * c / 6, 1e-15);
  EXPECT_EQ(at.psi, 0.0);
  const LossValue near = robust_loss(c * (1 - 1e-7), RobustKind::tukey, c);
  EXPECT_NEAR(near.value, c * c / 6, 1e-12);
  EXPECT_EQ(robust_loss(5 * c, RobustKind::tukey, c).value, c * c / 6);
}

TEST(RobustLoss, PsiIsDerivative) {
  for (RobustKind k : {RobustKind::none, RobustKind::huber, RobustKind::tukey}) {
    for (double r : {-2.7, -0.9, -0.1, 0.4, 1.1, 3.3}) {
      const double h = 1e-6, c = 1.5;
      const double fd = (robust_loss(r + h, k, c).value - robust_loss(r - h, k, c).value) / (2 * h);
      EXPECT_NEAR(robust_loss(r, k, c).psi, fd, 1e-6);
      const double fd2 = (robust_loss(r + h, k, c).psi - robust_loss(r - h, k, c).psi) / (2 * h);
      EXPECT_NEAR(robust_psi_prime(r, k, c), fd2, 1e-5);
    }
  }
  EXPECT_THROW(robust_loss(1.0, RobustKind::huber, 0.0), Error);
}

TEST(LambdaDefault, Arithmetic) {
  EXPECT_NEAR(lambda_default(100, 100, 1.0), 0.2146, 1e-4);
  EXPECT_NEAR(lambda_default(400, 100, 1.0), 0.5 * lambda_default(100, 100, 1.0), 1e-15);
  EXPECT_EQ(lambda_default(100, 100, 0.0), 0.0);
  EXPECT_THROW(lambda_default(1, 100), Error);
}

TEST(ElDual, SymmetricMomentsGiveUniformWeights) {
  Rng rng = make_stream(41, 0);
  const Matrix half = normal_matrix(25, 3, 1.0, rng);
  Matrix g(50, 3);
  g << half, -half;
  const ElDual d = el_dual_solve(g);
  EXPECT_LT(d.nu.norm(), 1e-12);
  EXPECT_LT((d.p_weights.array() - 1.0 / 50).abs().maxCoeff(), 1e-15);
  EXPECT_NEAR(d.log_el, -50 * std::log(50.0), 1e-9);
}

TEST(ElDual, MatchesGridOracleN4) {
  Matrix g(4, 1);
  g << -2, -1, 1, 3;
  const ElDual d = el_dual_solve(g);
  double best = 1e300, arg = 0;
  for (long k = 0; k <= 1000000; ++k) {
    const double nu = -0.4 + 1e-6 * k;
    double v = 0;
    for (int i = 0; i < 4; ++i) v -= log_star(1 + nu * g(i, 0), 4.0);
    if (v < best) best = v, arg = nu;
  }
  EXPECT_NEAR(d.nu[0], arg, 1e-5);
  EXPECT_NEAR(d.p_weights.dot(g.col(0)), 0.0, 1e-9);
  EXPECT_NEAR(d.p_weights.sum(), 1.0, 1e-15);
}

TEST(ElDual, InfeasibleMomentsReported) {
  Matrix g(6, 1);
  g << 1, 2, 0.5, 3, 1, 4;
  try {
    el_dual_solve(g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DegenerateMoments);
  }
}

TEST(ElDual, ZeroColumnAndBadInput) {
  Rng rng = make_stream(42, 0);
  Matrix g = normal_matrix(10, 2, 1.0, rng);
  g.col(1).setZero();
  try {
    el_dual_solve(g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DegenerateMoments);
  }
  EXPECT_THROW(el_dual_solve(Matrix(0, 2)), Error);
  Matrix bad = normal_matrix(10, 2, 1.0, rng);
  bad(3, 0) = INFINITY;
  EXPECT_THROW(el_dual_solve(bad), Error);
}

TEST(ElDual, WeightsAndMonotoneTrace) {
  Rng rng = make_stream(43, 0);
  for (int rep = 0; rep < 50; ++rep) {
    Matrix g = normal_matrix(80, 3, 1.0, rng);
    g.rowwise() += Eigen::RowVector3d(0.2, -0.1, 0.15);
    const ElDual d = el_dual_solve(g);
    EXPECT_NEAR(d.p_weights.sum(), 1.0, 1e-12);
    EXPECT_GE(d.p_weights.minCoeff(), 0.0);
    EXPECT_LT((g.transpose() * d.p_weights).cwiseAbs().maxCoeff(), 1e-6);
    for (std::size_t k = 1; k < d.dual_trace.size(); ++k) EXPECT_LE(d.dual_trace[k], d.dual_trace[k - 1]);
    EXPECT_LE(d.log_el, -80 * std::log(80.0));
  }
}

TEST(ElDual, RidgeHandlesWideMoments) {
  Rng rng = make_stream(44, 0);
  const Matrix g = normal_matrix(30, 60, 1.0, rng).array() + 0.05;
  ElDualOptions opt;
  opt.ridge = 0.5;
  const ElDual d = el_dual_solve(g, opt);
  EXPECT_NEAR(d.p_weights.sum(), 1.0, 1e-12);
  EXPECT_GE(d.p_weights.minCoeff(), 0.0);
}

TEST(PelFit, JustIdentifiedMatchesInstrumentedLeastSquares) {
  Rng rng = make_stream(45, 0);
  const Eigen::Index n = 300;
  const Matrix z = normal_matrix(n, 3, 1.0, rng);
  Matrix design(n, 3), inst(n, 3);
  design << Vector::Ones(n), z.col(0), z.col(0).cwiseProduct(z.col(1));
  inst << Vector::Ones(n), z.col(0) + 0.3 * z.col(2), z.col(1).cwiseProduct(z.col(0)) + 0.2 * z.col(2);
  const Vector y = design * Eigen::Vector3d(0.5, -1.0, 2.0) + normal_vector(n, 0.5, rng);
  MomentModel m;
  m.instruments = inst;
  m.design = design;
  m.response = y;
  const PelSolution s = pel_fit(m, 0.0, Vector::Zero(3));
  const Vector gmm = (inst.transpose() * design).lu().solve(inst.transpose() * y);
  EXPECT_TRUE(s.converged);
  EXPECT_LT((s.beta_hat - gmm).cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_NEAR(s.p_weights.sum(), 1.0, 1e-10);
}

TEST(PelFit, HugeLambdaAnnihilates) {
  Rng rng = make_stream(46, 0);
  const Matrix x = normal_matrix(100, 4, 1.0, rng);
  const Vector y = x * Eigen::Vector4d(1, -1, 0, 2) + normal_vector(100, 1.0, rng);
  const PelSolution s = pel_fit(linear_model(x, y), 1e6, Eigen::Vector4d(0.5, 0.5, 0.5, 0.5));
  EXPECT_EQ(s.beta_hat, Vector::Zero(4));
}

TEST(PelFit, ObjectiveNonIncreasingAndSparse) {
  Rng rng = make_stream(47, 0);
  const Eigen::Index n = 200, p = 20;
  const Matrix x = normal_matrix(n, p, 1.0, rng);
  Vector beta = Vector::Zero(p);
  beta.head(3) << 1.5, -1.0, 1.0;
  const Vector y = x * beta + normal_vector(n, 1.0, rng);
  PelOptions opt;
  opt.trace = true;
  const PelSolution s = pel_fit(linear_model(x, y), lambda_default(n, p, 0.5), Vector::Zero(p), opt);
  for (std::size_t k = 1; k < s.objective_trace.size(); ++k)
    EXPECT_LE(s.objective_trace[k], s.objective_trace[k - 1] + 1e-15);
  EXPECT_EQ(s.beta_path.size(), s.objective_trace.size());
  EXPECT_LT((s.beta_hat - beta).norm(), 0.6);
  EXPECT_NEAR(s.p_weights.sum(), 1.0, 1e-10);
  EXPECT_GE(s.p_weights.minCoeff(), 0.0);
  const std::string csv = pel_to_csv(s, true);
  EXPECT_NE(csv.find("converged,0,"), std::string::npos);
  EXPECT_NE(csv.find("path_0,0,"), std::string::npos);
}

TEST(PelFit, InnerFailureCarriesOuterIndex) {
  MomentModel m;
  m.instruments = Matrix::Ones(10, 1);
  m.design = Matrix::Ones(10, 1);
  m.response = Vector::LinSpaced(10, 1, 10);
  try {
    pel_fit(m, 0.1, Vector::Constant(1, -50.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InnerSolveFailure);
    EXPECT_NE(std::string(e.what()).find("outer iteration 0"), std::string::npos);
  }
}

TEST(PelFit, Preconditions) {
  Rng rng = make_stream(48, 0);
  MomentModel m = linear_model(normal_matrix(20, 3, 1.0, rng), normal_vector(20, 1.0, rng));
  EXPECT_THROW(pel_fit(m, -1.0, Vector::Zero(3)), Error);
  EXPECT_THROW(pel_fit(m, 0.1, Vector::Zero(2)), Error);
  m.instruments = m.instruments.leftCols(2);
  EXPECT_THROW(pel_fit(m, 0.1, Vector::Zero(3)), Error);
}

TEST(MomentModelBuild, FromMaps) {
  Rng rng = make_stream(49, 0);
  const Matrix z = normal_matrix(15, 2, 1.0, rng);
  const Vector o = normal_vector(15, 1.0, rng);
  const MomentModel m = make_moment_model(
      [](const Vector& zi) { return Vector(Eigen::Vector3d(1, zi[0], zi[1])); },
      [](const Vector& zi) { return Vector(Eigen::Vector2d(1, zi[0])); }, o, z);
  EXPECT_EQ(m.q(), 3);
  EXPECT_EQ(m.k(), 2);
  EXPECT_DOUBLE_EQ(m.instruments(4, 2), z(4, 1));
  const Vector beta = Eigen::Vector2d(0.3, -0.2);
  const Matrix g = m.moments(beta);
  EXPECT_NEAR(g(7, 1), z(7, 0) * (o[7] - 0.3 + 0.2 * z(7, 0)), 1e-14);
  EXPECT_THROW(make_moment_model([](const Vector& zi) { return zi; }, [](const Vector& zi) { return zi; },
                                 Vector::Zero(3), z),
               Error);
}
