#include "mnarci/direction.hpp"

#include <gtest/gtest.h>

using namespace mnarci;

namespace {

Vector normals(Eigen::Index n, Rng& rng) { return normal_matrix(n, 1, 1.0, rng); }

Vector uniforms(Eigen::Index n, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

double corr(const Vector& a, const Vector& b) {
  const Vector ac = a.array() - a.mean(), bc = b.array() - b.mean();
  return ac.dot(bc) / std::sqrt(ac.squaredNorm() * bc.squaredNorm());
}

struct Pair {
  Vector x, y, w;
};

// Cubic ANM observed through selection on y; w holds 1/p of the kept units.
Pair mnar_cubic(int n, Rng& rng) {
  std::uniform_real_distribution<double> u(-1, 1), flip(0, 1);
  Pair p{Vector(n), Vector(n), Vector(n)};
  for (int k = 0; k < n;) {
    const double x = u(rng), y = x * x * x + u(rng);
    const double sel = sigmoid(0.5 + 1.5 * y);
    if (flip(rng) < sel) p.x[k] = x, p.y[k] = y, p.w[k] = 1 / sel, ++k;
  }
  return p;
}

}  // namespace

TEST(Hsic, SelfDependenceIsMaximal) {
  Rng rng = make_stream(80, 0);
  const Vector u = normals(200, rng);
  EXPECT_GE(weighted_hsic(u, u), 0.999);
}

TEST(Hsic, IndependenceNull) {
  Rng rng = make_stream(81, 0);
  int small = 0;
  for (int rep = 0; rep < 500; ++rep) small += weighted_hsic(normals(500, rng), normals(500, rng)) < 0.05;
  EXPECT_GE(small, 475);
}

TEST(Hsic, WeightsActAsReplication) {
  Rng rng = make_stream(82, 0);
  const Vector u = normals(30, rng), v = (u.array().square() + normals(30, rng).array()).matrix();
  Vector w = Vector::Ones(30);
  w[0] = w[1] = 2;
  Vector ud(32), vd(32);
  ud << u, u.head(2);
  vd << v, v.head(2);
  EXPECT_NEAR(weighted_hsic(u, v, w), weighted_hsic(ud, vd), 1e-10);
}

TEST(Hsic, SymmetricAndScaleInvariant) {
  Rng rng = make_stream(83, 0);
  const Vector u = normals(100, rng), v = (u.array().sin() + 0.5 * normals(100, rng).array()).matrix();
  const Vector w = uniforms(100, 0.2, 3.0, rng);
  const double a = weighted_hsic(u, v, w);
  EXPECT_NEAR(a, weighted_hsic(v, u, w), 1e-12);
  EXPECT_NEAR(a, weighted_hsic(u, v, Vector(7.5 * w)), 1e-12);
  EXPECT_GE(a, 0.0);
  EXPECT_LE(a, 1.0);
}

TEST(Hsic, DegenerateAndErrors) {
  Rng rng = make_stream(84, 0);
  const HsicResult r = weighted_hsic_ex(Vector::Constant(20, 3.0), normals(20, rng));
  EXPECT_EQ(r.value, 0.0);
  EXPECT_TRUE(r.degenerate);
  EXPECT_THROW(weighted_hsic(normals(5, rng), normals(5, rng)), Error);
  EXPECT_THROW(weighted_hsic(normals(10, rng), normals(11, rng)), Error);
  Vector w = Vector::Ones(10);
  w[3] = -1;
  EXPECT_THROW(weighted_hsic(normals(10, rng), normals(10, rng), w), Error);
}

TEST(Anm, ForwardResidualOrthogonalToCause) {
  Rng rng = make_stream(85, 0);
  const Vector x = uniforms(2000, -1, 1, rng);
  const Vector y = (x.array().cube() + uniforms(2000, -1, 1, rng).array()).matrix();
  const AnmResiduals r = fit_anm_pair(x, y, Matrix());
  EXPECT_LT(std::abs(corr(r.eps_y, x)), 0.05);
}

TEST(Anm, ExactLinearFit) {
  Rng rng = make_stream(86, 0);
  const Vector x = normals(100, rng);
  const AnmResiduals r = fit_anm_pair(x, Vector(2 * x), Matrix());
  EXPECT_LT(r.eps_y.cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Anm, WeightScaleInvariance) {
  Rng rng = make_stream(87, 0);
  const Vector x = normals(80, rng), y = (x.array().cube() + normals(80, rng).array()).matrix();
  const Matrix z = normal_matrix(80, 3, 1.0, rng);
  const Vector w = uniforms(80, 0.5, 2.0, rng);
  const AnmResiduals a = fit_anm_pair(x, y, z, w), b = fit_anm_pair(x, y, z, Vector(2 * w));
  EXPECT_LT((a.eps_y - b.eps_y).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((a.eps_x - b.eps_x).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Anm, SingularDesign) {
  Rng rng = make_stream(88, 0);
  try {
    fit_anm_pair(normals(6, rng), normals(6, rng), normal_matrix(6, 3, 1.0, rng));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::SingularDesign);
  }
}

TEST(Direction, SwapEquivariance) {
  Rng rng = make_stream(89, 0);
  const Pair p = mnar_cubic(200, rng);
  const DirectionVerdict a = decide_direction(p.x, p.y, Matrix(), p.w);
  const DirectionVerdict b = decide_direction(p.y, p.x, Matrix(), p.w);
  EXPECT_EQ(a.margin, -b.margin);
  EXPECT_EQ(a.i_forward, b.i_reverse);
  ASSERT_NE(a.decision, Decision::undecided);
  EXPECT_EQ(b.decision, a.decision == Decision::XtoY ? Decision::YtoX : Decision::XtoY);
}

TEST(Direction, MarginRule) {
  EXPECT_EQ(decide_from_margin(0.1), Decision::XtoY);
  EXPECT_EQ(decide_from_margin(-0.1), Decision::YtoX);
  EXPECT_EQ(decide_from_margin(1e-13), Decision::undecided);
  EXPECT_STREQ(decision_name(Decision::YtoX), "YtoX");
}

TEST(Direction, PermutationPValue) {
  Rng rng = make_stream(90, 0);
  const Pair p = mnar_cubic(150, rng);
  DirectionOptions opt;
  opt.permutations = 50;
  opt.seed = 3;
  const DirectionVerdict v = decide_direction(p.x, p.y, Matrix(), p.w, opt);
  ASSERT_TRUE(v.permutation_p.has_value());
  EXPECT_GT(*v.permutation_p, 0.0);
  EXPECT_LE(*v.permutation_p, 1.0);
  EXPECT_EQ(*decide_direction(p.x, p.y, Matrix(), p.w, opt).permutation_p, *v.permutation_p);
}

// Selection on y leaves the cubic asymmetry intact, so 1/p weights cost a
// little variance rather than buy accuracy here.
TEST(Direction, WeightingCostsLittleUnderMnar) {
  int weighted = 0, unweighted = 0;
  for (int rep = 0; rep < 200; ++rep) {
    Rng rng = make_stream(91 + rep, 1);
    const Pair p = mnar_cubic(300, rng);
    weighted += decide_direction(p.x, p.y, Matrix(), p.w).decision == Decision::XtoY;
    unweighted += decide_direction(p.x, p.y, Matrix()).decision == Decision::XtoY;
  }
  EXPECT_GE(weighted, unweighted - 10);
  EXPECT_GE(weighted, 180);
}

TEST(Cp, IndependentIsHalf) {
  Rng rng = make_stream(92, 0);
  EXPECT_NEAR(cp_metric(normals(2000, rng), normals(2000, rng), Matrix()), 0.5, 0.05);
}

TEST(Cp, ForwardFitsBetterAndSwapComplements) {
  Rng rng = make_stream(93, 0);
  const Vector x = uniforms(500, -1.5, 1.5, rng);
  const Vector y = (x.array().cube() + 0.05 * normals(500, rng).array()).matrix();
  const double cp = cp_metric(x, y, Matrix());
  EXPECT_GT(cp, 0.5);
  EXPECT_NEAR(cp_metric(y, x, Matrix()), 1 - cp, 1e-15);
}

TEST(Csr, Arithmetic) {
  Rng rng = make_stream(94, 0);
  const Vector e = normals(50, rng);
  EXPECT_EQ(csr_metric(e, e), 0.5);
  Vector f(2), r(2);
  f << -1, 1;
  r << -std::sqrt(3.0), std::sqrt(3.0);
  EXPECT_NEAR(csr_metric(f, r), 0.75, 1e-15);
  EXPECT_NEAR(csr_metric(r, f), 0.25, 1e-15);
  bool flag = false;
  EXPECT_EQ(csr_metric(Vector::Zero(4), Vector::Zero(4), Vector(), &flag), 0.5);
  EXPECT_TRUE(flag);
}

TEST(Csr, BoundedForFiniteInputs) {
  Rng rng = make_stream(95, 0);
  for (int rep = 0; rep < 100; ++rep) {
    const Vector a = normals(20, rng) * std::exp(normals(1, rng)[0] * 3);
    const Vector b = normals(20, rng) * std::exp(normals(1, rng)[0] * 3);
    const double v = csr_metric(a, b, uniforms(20, 0.1, 5, rng));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Hrjsd, LaggedCopyIsAsymmetric) {
  Rng rng = make_stream(96, 0);
  const Vector x = normals(5000, rng);
  Vector y(5000);
  y[0] = 0;
  y.tail(4999) = x.head(4999);
  EXPECT_GT(hrjsd_metric(x, y), 0.1);
  const SymbolicHistograms h = symbolic_histograms(x, y, Vector(), 3);
  EXPECT_LT(entropy(h.forward), entropy(h.reverse));
}

TEST(Hrjsd, NullAndSymmetricCopy) {
  Rng rng = make_stream(97, 0);
  const Vector x = normals(5000, rng);
  EXPECT_LT(hrjsd_metric(x, normals(5000, rng)), 0.02);
  EXPECT_LT(hrjsd_metric(x, x), 1e-3);
}

TEST(Hrjsd, PatternsAndLength) {
  Vector v(3);
  v << 1, 2, 3;
  EXPECT_EQ(ordinal_pattern(v, 0, 3), 0);
  v << 3, 2, 1;
  EXPECT_EQ(ordinal_pattern(v, 0, 3), 5);
  Rng rng = make_stream(98, 0);
  try {
    hrjsd_metric(normals(300, rng), normals(300, rng));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InsufficientLength);
  }
  EXPECT_NO_THROW(hrjsd_metric(normals(360, rng), normals(360, rng)));
}
