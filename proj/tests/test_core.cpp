#include "mnarci/core.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace mnarci;

namespace {

Matrix random_symmetric(Eigen::Index d, Rng& rng) {
  const Matrix a = normal_matrix(d, d, 1.0, rng);
  return 0.5 * (a + a.transpose());
}

// Brute force over rho = l uu' + (1-l) vv', u = (cos t, sin t), v = u rotated.
Matrix grid_density_2x2(const Matrix& s, double step) {
  double best = 1e300;
  Matrix arg(2, 2);
  for (double t = 0; t < M_PI; t += step) {
    const Eigen::Vector2d u(std::cos(t), std::sin(t)), v(-std::sin(t), std::cos(t));
    const Matrix uu = u * u.transpose(), vv = v * v.transpose();
    for (double l = 0; l <= 1.0 + 1e-12; l += step) {
      const Matrix rho = l * uu + (1 - l) * vv;
      const double dist = (rho - s).squaredNorm();
      if (dist < best) {
        best = dist;
        arg = rho;
      }
    }
  }
  return arg;
}

ChannelSpec identity_channel(int d, double noise) {
  ChannelSpec c;
  c.h = Matrix::Identity(d, d);
  c.b = Vector::Zero(d);
  c.noise_scale = noise;
  return c;
}

}  // namespace

TEST(Projection, ScaledIdentityIsFixed) {
  for (int d : {1, 2, 5, 8}) {
    const Matrix m = Matrix::Identity(d, d) / d;
    EXPECT_LT((project_to_density_matrix(m).entries() - m).norm(), 1e-14);
  }
}

TEST(Projection, Diag20ToDiag10) {
  Matrix s = Matrix::Zero(2, 2);
  s(0, 0) = 2;
  Matrix want = Matrix::Zero(2, 2);
  want(0, 0) = 1;
  EXPECT_LT((project_to_density_matrix(s).entries() - want).norm(), 1e-14);
  EXPECT_LT((grid_density_2x2(s, 1e-3) - want).norm(), 2e-3);
}

TEST(Projection, IdempotentAndValid) {
  Rng rng = make_stream(11, 0);
  for (int rep = 0; rep < 1000; ++rep) {
    const Eigen::Index d = 2 + rep % 6;
    const DensityMatrix once = project_to_density_matrix(random_symmetric(d, rng));
    const DensityMatrix twice = project_to_density_matrix(once.entries());
    ASSERT_LT((once.entries() - twice.entries()).norm(), 1e-10);
    const auto& e = once.entries();
    ASSERT_LT((e - e.transpose()).cwiseAbs().maxCoeff(), 1e-12);
    ASSERT_NEAR(e.trace(), 1.0, 1e-10);
    ASSERT_GT(Eigen::SelfAdjointEigenSolver<Matrix>(e).eigenvalues().minCoeff(), -1e-10);
  }
}

TEST(Projection, MatchesGridOracle2x2) {
  Rng rng = make_stream(12, 0);
  for (int rep = 0; rep < 8; ++rep) {
    const Matrix s = random_symmetric(2, rng);
    const Matrix got = project_to_density_matrix(s).entries();
    EXPECT_LT((got - grid_density_2x2(s, 1e-3)).norm(), 2e-3) << s;
  }
}

TEST(Projection, SymmetrizesSmallAsymmetry) {
  Matrix s = Matrix::Identity(3, 3);
  s(0, 1) += 1e-9;
  EXPECT_NO_THROW(project_to_density_matrix(s));
}

TEST(Projection, Errors) {
  Matrix s = Matrix::Identity(3, 3);
  s(0, 1) = 1e-6;
  try {
    project_to_density_matrix(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NonSymmetric);
  }
  try {
    project_to_density_matrix(Matrix::Zero(2, 3));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DimensionMismatch);
  }
  Matrix bad = Matrix::Identity(2, 2);
  bad(1, 1) = std::nan("");
  try {
    project_to_density_matrix(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NonFinite);
  }
}

TEST(DensityMatrixType, RejectsInvalid) {
  EXPECT_THROW(DensityMatrix(Matrix::Identity(2, 2)), Error);
  Matrix neg(2, 2);
  neg << 1.5, 0, 0, -0.5;
  EXPECT_THROW(DensityMatrix{neg}, Error);
  EXPECT_NO_THROW(DensityMatrix(Matrix::Identity(2, 2) / 2));
}

TEST(Simplex, ProjectsOntoSimplex) {
  Rng rng = make_stream(13, 0);
  for (int rep = 0; rep < 200; ++rep) {
    const Vector v = normal_vector(6, 2.0, rng);
    const Vector p = project_to_simplex(v);
    EXPECT_NEAR(p.sum(), 1.0, 1e-12);
    EXPECT_GE(p.minCoeff(), 0.0);
    // KKT: support entries share the same shift.
    double shift = std::nan("");
    for (Eigen::Index j = 0; j < 6; ++j) {
      if (p[j] <= 0) continue;
      if (std::isnan(shift)) shift = v[j] - p[j];
      EXPECT_NEAR(v[j] - p[j], shift, 1e-12);
    }
    for (Eigen::Index j = 0; j < 6; ++j) {
      if (p[j] == 0) EXPECT_LE(v[j], shift + 1e-12);
    }
  }
}

TEST(SortedEigen, Convention) {
  Rng rng = make_stream(14, 0);
  const Matrix s = random_symmetric(5, rng);
  const SortedEigen e = sorted_eigen(s);
  for (Eigen::Index j = 0; j + 1 < 5; ++j) EXPECT_GE(e.values[j], e.values[j + 1]);
  for (Eigen::Index j = 0; j < 5; ++j) {
    Eigen::Index arg = 0;
    e.vectors.col(j).cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(e.vectors(arg, j), 0);
  }
  EXPECT_LT((e.vectors * e.values.asDiagonal() * e.vectors.transpose() - s).norm(), 1e-12);
}

TEST(Channel, GammaZeroIsIdentityBitwise) {
  ChannelSpec c = identity_channel(4, 1.0);
  Rng rng = make_stream(1, 0);
  const Vector z = normal_vector(4, 1.0, rng);
  const Vector out = apply_channel(z, c, rng);
  for (Eigen::Index j = 0; j < 4; ++j) EXPECT_EQ(out[j], z[j]);
}

TEST(Channel, NearOneIsPureNoise) {
  ChannelSpec c = identity_channel(3, 1.0);
  c.gamma = 1 - 1e-9;
  Rng rng = make_stream(2, 0);
  const Vector z = Vector::Ones(3);
  Vector mean = Vector::Zero(3);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) mean += apply_channel(z, c, rng);
  mean /= draws;
  // Mean of 1e5 unit normals has sd 0.003; allow 5 sd per coordinate.
  EXPECT_LT(mean.cwiseAbs().maxCoeff(), 0.016);
}

TEST(Channel, VarianceMatchesGammaSquared) {
  ChannelSpec c = identity_channel(2, 2.0);
  c.gamma = 0.3;
  Rng rng = make_stream(3, 0);
  const int draws = 100000;
  Vector s1 = Vector::Zero(2), s2 = Vector::Zero(2);
  for (int i = 0; i < draws; ++i) {
    const Vector o = apply_channel(Vector::Zero(2), c, rng);
    s1 += o;
    s2 += o.cwiseProduct(o);
  }
  const double want = 0.09 * 4.0;
  for (int j = 0; j < 2; ++j) {
    EXPECT_NEAR(s1[j] / draws, 0.0, 0.01);
    EXPECT_NEAR(s2[j] / draws, want, 0.03 * want);
  }
}

TEST(Channel, Errors) {
  ChannelSpec c = identity_channel(3, 1.0);
  Rng rng = make_stream(4, 0);
  EXPECT_THROW(apply_channel(Vector::Zero(2), c, rng), Error);
  c.gamma = 1.0;
  try {
    apply_channel(Vector::Zero(3), c, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InvalidGamma);
  }
}

TEST(Measure, NoiselessDebiasedIsIdentity) {
  ChannelSpec c = identity_channel(3, 0.0);
  c.b = Vector::Constant(3, 0.7);
  Rng rng = make_stream(5, 0);
  const Matrix z = normal_matrix(20, 3, 1.0, rng);
  const Matrix o = measure_and_stabilize(z, c, c.b, 1.0, rng);
  EXPECT_LT((o - z).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Measure, UncorrectedBiasPropagates) {
  ChannelSpec c = identity_channel(3, 0.5);
  c.b = Vector::Constant(3, 5.0);
  Rng rng = make_stream(6, 0);
  const Matrix z = normal_matrix(4000, 3, 1.0, rng);
  const Matrix o = measure_and_stabilize(z, c, Vector::Zero(3), 1.0, rng);
  const Vector gap = (o - z).colwise().mean();
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(gap[j], 5.0, 0.05);
}

TEST(Measure, WinsorizesOutlier) {
  ChannelSpec c = identity_channel(2, 0.0);
  Rng rng = make_stream(7, 0);
  Matrix z = normal_matrix(50, 2, 1.0, rng);
  z(3, 1) = 1e6;
  const Matrix o = measure_and_stabilize(z, c, Vector::Zero(2), 0.9, rng);
  std::vector<double> col(z.col(1).data(), z.col(1).data() + 50);
  EXPECT_DOUBLE_EQ(o(3, 1), quantile(col, 0.9));
  EXPECT_LE(o.col(1).maxCoeff(), quantile(col, 0.9));
}

TEST(Measure, LinearWhenNoiselessAndUnclipped) {
  ChannelSpec c;
  Rng rng = make_stream(8, 0);
  c.h = normal_matrix(4, 3, 1.0, rng);
  c.b = normal_vector(4, 1.0, rng);
  c.noise_scale = 0.0;
  const Matrix z1 = normal_matrix(10, 3, 1.0, rng), z2 = normal_matrix(10, 3, 1.0, rng);
  const Matrix o1 = measure_and_stabilize(z1, c, c.b, 1.0, rng);
  const Matrix o2 = measure_and_stabilize(z2, c, c.b, 1.0, rng);
  const Matrix o12 = measure_and_stabilize(z1 + z2, c, c.b, 1.0, rng);
  EXPECT_LT((o12 - o1 - o2).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Measure, Errors) {
  ChannelSpec c = identity_channel(2, 1.0);
  Rng rng = make_stream(9, 0);
  try {
    measure_and_stabilize(Matrix::Zero(2, 2), c, Vector::Zero(2), 0.9, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptyBatch);
  }
  EXPECT_THROW(measure_and_stabilize(Matrix::Zero(5, 3), c, Vector::Zero(2), 0.9, rng), Error);
  EXPECT_THROW(measure_and_stabilize(Matrix::Zero(5, 2), c, Vector::Zero(3), 0.9, rng), Error);
}

TEST(Mitigation, Arithmetic) {
  EXPECT_EQ(apply_mitigation(Vector::Constant(2, 3.0), 0.0), Vector::Constant(2, 3.0));
  const Vector got = apply_mitigation(Eigen::Vector2d(1, 2), 0.5);
  EXPECT_DOUBLE_EQ(got[0], 2.0);
  EXPECT_DOUBLE_EQ(got[1], 4.0);
  const double g = 0.37;
  const Vector z = Eigen::Vector3d(0.3, -1.2, 2.5);
  EXPECT_LT((apply_mitigation((1 - g) * z, g) - z).norm(), 1e-14);
  try {
    apply_mitigation(z, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InvalidGamma);
  }
}

TEST(Streams, DeterministicAndDistinct) {
  Rng a = make_stream(42, 1), b = make_stream(42, 1), c = make_stream(42, 2);
  EXPECT_EQ(a(), b());
  EXPECT_NE(make_stream(42, 1)(), c());
}

TEST(Helpers, QuantileAndMad) {
  EXPECT_DOUBLE_EQ(median({3, 1, 2}), 2.0);
  EXPECT_DOUBLE_EQ(quantile({1, 2, 3, 4, 5}, 1.0), 5.0);
  EXPECT_DOUBLE_EQ(quantile({1, 2, 3, 4, 5}, 0.0), 1.0);
  EXPECT_NEAR(normalized_mad({-1, 0, 1}), 1.4826, 1e-4);
  EXPECT_NEAR(sigmoid(0.0), 0.5, 1e-15);
  EXPECT_NEAR(sigmoid(-800), 0.0, 1e-300);
  EXPECT_NEAR(normal_cdf(1.959963984540054), 0.975, 1e-12);
}
