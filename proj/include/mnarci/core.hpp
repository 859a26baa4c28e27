#pragma once

// Shared domain types, the density-matrix projection for latent second
// moments, and the two-stage observation pipeline (channel -> measurement ->
// classical stabilization).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mnarci {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Rng = std::mt19937_64;

enum class Errc {
  NonSymmetric,
  EigenFailure,
  DimensionMismatch,
  EmptyBatch,
  InvalidGamma,
  InvalidConfig,
  NotSynthetic,
  RootFindFailure,
  RankDeficient,
  NonFinite,
  Diverged,
  Precondition,
  NoConvergence,
  NewtonFailure,
  ZeroDenominator,
  SingularInformation,
  InsufficientArm,
  DegenerateMoments,
  InnerSolveFailure,
  MissingNuisance,
  EmptyArm,
  ExtrapolationFailure,
  SingularDesign,
  DegenerateVariable,
  InsufficientLength,
  CholeskyFailure,
  MalformedCsv,
  MissingPairing,
  Io,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::NonSymmetric: return "NonSymmetric";
    case Errc::EigenFailure: return "EigenFailure";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::EmptyBatch: return "EmptyBatch";
    case Errc::InvalidGamma: return "InvalidGamma";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::NotSynthetic: return "NotSynthetic";
    case Errc::RootFindFailure: return "RootFindFailure";
    case Errc::RankDeficient: return "RankDeficient";
    case Errc::NonFinite: return "NonFinite";
    case Errc::Diverged: return "Diverged";
    case Errc::Precondition: return "Precondition";
    case Errc::NoConvergence: return "NoConvergence";
    case Errc::NewtonFailure: return "NewtonFailure";
    case Errc::ZeroDenominator: return "ZeroDenominator";
    case Errc::SingularInformation: return "SingularInformation";
    case Errc::InsufficientArm: return "InsufficientArm";
    case Errc::DegenerateMoments: return "DegenerateMoments";
    case Errc::InnerSolveFailure: return "InnerSolveFailure";
    case Errc::MissingNuisance: return "MissingNuisance";
    case Errc::EmptyArm: return "EmptyArm";
    case Errc::ExtrapolationFailure: return "ExtrapolationFailure";
    case Errc::SingularDesign: return "SingularDesign";
    case Errc::DegenerateVariable: return "DegenerateVariable";
    case Errc::InsufficientLength: return "InsufficientLength";
    case Errc::CholeskyFailure: return "CholeskyFailure";
    case Errc::MalformedCsv: return "MalformedCsv";
    case Errc::MissingPairing: return "MissingPairing";
    case Errc::Io: return "Io";
  }
  return "Unknown";
}

/// Exception carrying a machine-readable error code. The harness records
/// `code()` as the per-replication failure tag.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code), detail_(what) {}
  Errc code() const noexcept { return code_; }
  // Message without the code prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  Errc code_;
  std::string detail_;
};

// ---------------------------------------------------------------------------
// Random streams

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Independent stream `stream` derived from `seed`. Streams never share state.
inline Rng make_stream(std::uint64_t seed, std::uint64_t stream) {
  return Rng(splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632BE59BD9B4E019ULL)));
}

inline Vector normal_vector(Eigen::Index n, double scale, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = scale * nd(rng);
  return v;
}

inline Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double scale, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = scale * nd(rng);
  return m;
}

// ---------------------------------------------------------------------------
// Small numeric helpers

inline double sigmoid(double t) {
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

/// Sample quantile with linear interpolation between order statistics.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw Error(Errc::EmptyBatch, "quantile of empty sample");
  std::sort(v.begin(), v.end());
  const double h = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

/// Median absolute deviation scaled to be consistent for the normal sd.
inline double normalized_mad(const std::vector<double>& v) {
  const double med = median(v);
  std::vector<double> dev(v.size());
  std::transform(v.begin(), v.end(), dev.begin(), [med](double x) { return std::abs(x - med); });
  return 1.4826 * median(std::move(dev));
}

inline double sample_sd(const Vector& v) {
  const double n = static_cast<double>(v.size());
  if (v.size() < 2) return 0.0;
  const double mean = v.mean();
  return std::sqrt((v.array() - mean).square().sum() / (n - 1.0));
}

// ---------------------------------------------------------------------------
// Domain types

struct Observation {
  std::optional<double> y;       // observed outcome; present iff r == 1
  int a = 0;                     // binary action
  Vector x;                      // covariates, length p
  std::optional<Vector> z_true;  // oracle latent (simulation only)
  int r = 0;                     // selection indicator
  Vector o;                      // stabilized observable surrogate, length K (empty when r == 0)
};

/// Quantities the generator knows but an analyst never would.
struct OracleUnit {
  double y0 = 0, y1 = 0;  // potential outcomes before contamination
  double e = 0.5;         // propensity P(A=1|X,Z)
  double m0 = 0, m1 = 0;  // E[Y(a)|X,Z]
  double p_sel = 1;       // P(R=1|Y,X,Z) at the realized clean outcome
  double num = 1;         // P(R=1|X,Z)
  bool contaminated = false;
};

struct ChannelSpec {
  double gamma = 0.0;  // contraction strength in [0,1)
  Matrix h;            // K x d measurement functionals
  Vector b;            // measurement bias, length K
  double noise_scale = 1.0;

  Eigen::Index k() const { return h.rows(); }
  Eigen::Index d() const { return h.cols(); }

  void validate() const {
    if (!(gamma >= 0.0 && gamma < 1.0)) throw Error(Errc::InvalidGamma, "channel gamma must lie in [0,1)");
    if (!(noise_scale > 0.0)) throw Error(Errc::InvalidConfig, "channel noise_scale must be positive");
    if (b.size() != h.rows()) throw Error(Errc::DimensionMismatch, "bias length must equal rows of H");
  }
};

struct Dataset {
  std::vector<Observation> units;
  int p = 0;
  int d = 0;
  int k = 0;
  std::optional<double> tau_true;
  std::uint64_t seed = 0;
  std::vector<OracleUnit> oracle;         // one per unit when synthetic
  std::optional<ChannelSpec> channel;  // outcome measurement channel used to build `o`

  std::size_t n() const { return units.size(); }
  bool synthetic() const { return tau_true.has_value() && oracle.size() == units.size(); }
};

/// n x p covariate matrix, rows in unit order.
inline Matrix covariate_matrix(const Dataset& ds) {
  Matrix x(static_cast<Eigen::Index>(ds.n()), ds.p);
  for (std::size_t i = 0; i < ds.n(); ++i) x.row(static_cast<Eigen::Index>(i)) = ds.units[i].x.transpose();
  return x;
}

/// n x d oracle latent matrix; throws NotSynthetic if any unit lacks z_true.
inline Matrix latent_matrix(const Dataset& ds) {
  Matrix z(static_cast<Eigen::Index>(ds.n()), ds.d);
  for (std::size_t i = 0; i < ds.n(); ++i) {
    if (!ds.units[i].z_true) throw Error(Errc::NotSynthetic, "unit has no oracle latent");
    z.row(static_cast<Eigen::Index>(i)) = ds.units[i].z_true->transpose();
  }
  return z;
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition with a deterministic convention

struct SortedEigen {
  Vector values;   // descending
  Matrix vectors;  // columns match `values`
};

/// Eigenvalues sorted descending; each eigenvector's largest-magnitude entry
/// is made positive.
inline SortedEigen sorted_eigen(const Matrix& s) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(s);
  if (es.info() != Eigen::Success) throw Error(Errc::EigenFailure, "symmetric eigendecomposition did not converge");
  const Eigen::Index d = s.rows();
  SortedEigen out{Vector(d), Matrix(d, d)};
  for (Eigen::Index j = 0; j < d; ++j) {
    const Eigen::Index src = d - 1 - j;
    out.values[j] = es.eigenvalues()[src];
    Vector v = es.eigenvectors().col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    out.vectors.col(j) = v;
  }
  return out;
}

/// Euclidean projection onto the probability simplex (sorted-threshold rule).
inline Vector project_to_simplex(const Vector& v) {
  std::vector<double> u(v.data(), v.data() + v.size());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumsum = 0.0, theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cumsum += u[j];
    const double t = (cumsum - 1.0) / static_cast<double>(j + 1);
    if (u[j] - t > 0) theta = t;
  }
  return (v.array() - theta).max(0.0).matrix();
}

// ---------------------------------------------------------------------------
// Density matrices

class DensityMatrix {
 public:
  static constexpr double kSymmetryTol = 1e-12;
  static constexpr double kEigenTol = 1e-10;
  static constexpr double kTraceTol = 1e-10;

  /// Validates the density-matrix invariants; throws InvalidConfig otherwise.
  explicit DensityMatrix(Matrix entries) : entries_(std::move(entries)) {
    if (entries_.rows() != entries_.cols()) throw Error(Errc::DimensionMismatch, "density matrix must be square");
    if ((entries_ - entries_.transpose()).cwiseAbs().maxCoeff() > kSymmetryTol)
      throw Error(Errc::InvalidConfig, "density matrix not symmetric");
    if (std::abs(entries_.trace() - 1.0) > kTraceTol) throw Error(Errc::InvalidConfig, "density matrix trace != 1");
    Eigen::SelfAdjointEigenSolver<Matrix> es(entries_, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -kEigenTol) throw Error(Errc::InvalidConfig, "density matrix not PSD");
  }

  const Matrix& entries() const { return entries_; }
  Eigen::Index dim() const { return entries_.rows(); }

 private:
  Matrix entries_;
};

/// Frobenius-nearest matrix with eigenvalues on the probability simplex.
inline DensityMatrix project_to_density_matrix(const Matrix& s) {
  if (s.rows() != s.cols()) throw Error(Errc::DimensionMismatch, "input must be square");
  if (s.size() == 0) throw Error(Errc::DimensionMismatch, "input must be non-empty");
  if (!s.allFinite()) throw Error(Errc::NonFinite, "input has non-finite entries");
  if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-8) throw Error(Errc::NonSymmetric, "asymmetry exceeds 1e-8");
  const Matrix sym = 0.5 * (s + s.transpose());
  const SortedEigen eig = sorted_eigen(sym);
  const Vector lambda = project_to_simplex(eig.values);
  Matrix rho = eig.vectors * lambda.asDiagonal() * eig.vectors.transpose();
  rho = 0.5 * (rho + rho.transpose());
  // Rank-one rounding can leave the trace off by a few ulps.
  rho /= rho.trace();
  return DensityMatrix(std::move(rho));
}

// ---------------------------------------------------------------------------
// Observation pipeline

/// Depolarizing-style contraction: (1-gamma) z + gamma w, w ~ N(0, noise^2 I).
inline Vector apply_channel(const Vector& z, const ChannelSpec& spec, Rng& rng) {
  if (z.size() != spec.d()) throw Error(Errc::DimensionMismatch, "latent length differs from channel dimension");
  if (!(spec.gamma >= 0.0 && spec.gamma < 1.0)) throw Error(Errc::InvalidGamma, "channel gamma must lie in [0,1)");
  if (spec.gamma == 0.0) return z;
  const Vector w = normal_vector(z.size(), spec.noise_scale, rng);
  return (1.0 - spec.gamma) * z + spec.gamma * w;
}

/// Two-sided winsorization of each column at the `q` / `1-q` batch quantiles.
inline void winsorize_columns(Matrix& m, double q) {
  if (q >= 1.0) return;
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    std::vector<double> col(m.col(j).data(), m.col(j).data() + m.rows());
    const double hi = quantile(col, q);
    const double lo = quantile(col, 1.0 - q);
    m.col(j) = m.col(j).cwiseMax(lo).cwiseMin(hi);
  }
}

/// Stage-1 output (rows = units) -> raw measurement H z + b + eta ->
/// debias by b_hat -> winsorize batch-wise. Returns n x K.
inline Matrix measure_and_stabilize(const Matrix& z_channel, const ChannelSpec& spec, const Vector& b_hat,
                                    double winsor_q, Rng& rng) {
  if (z_channel.cols() != spec.d()) throw Error(Errc::DimensionMismatch, "latent width differs from channel dimension");
  if (b_hat.size() != spec.k() || spec.b.size() != spec.k())
    throw Error(Errc::DimensionMismatch, "bias vectors must have length K");
  if (!(winsor_q > 0.5 && winsor_q <= 1.0)) throw Error(Errc::InvalidConfig, "winsor_q must lie in (0.5, 1]");
  if (z_channel.rows() < 3) throw Error(Errc::EmptyBatch, "winsorization needs at least 3 units");
  const Eigen::Index n = z_channel.rows();
  Matrix o = z_channel * spec.h.transpose();
  o.rowwise() += (spec.b - b_hat).transpose();
  o += normal_matrix(n, spec.k(), spec.noise_scale, rng);
  winsorize_columns(o, winsor_q);
  return o;
}

/// Inverse-contraction estimate of the pre-channel signal.
inline Vector apply_mitigation(const Vector& o, double gamma_hat) {
  if (!(gamma_hat >= 0.0 && gamma_hat < 1.0)) throw Error(Errc::InvalidGamma, "gamma_hat must lie in [0,1)");
  return o / (1.0 - gamma_hat);
}

}  // namespace mnarci
