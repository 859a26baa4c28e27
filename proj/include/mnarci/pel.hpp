#pragma once

// Penalized empirical likelihood for linear-in-basis moment models:
// Owen's dual with the pseudo-logarithm, solved by damped Newton, and an
// L1-penalized proximal-gradient outer loop with envelope gradients.

#include "mnarci/core.hpp"
#include "mnarci/io.hpp"

#include <functional>
#include <sstream>

namespace mnarci {

inline Vector soft_threshold(const Vector& v, double t) {
  if (t < 0) throw Error(Errc::Precondition, "threshold must be nonnegative");
  return v.unaryExpr([t](double x) { return x > t ? x - t : (x < -t ? x + t : 0.0); });
}

enum class RobustKind { none, huber, tukey };

inline const char* robust_name(RobustKind k) {
  switch (k) {
    case RobustKind::none: return "none";
    case RobustKind::huber: return "huber";
    case RobustKind::tukey: return "tukey";
  }
  return "?";
}

struct LossValue {
  double value;
  double psi;
};

inline LossValue robust_loss(double r, RobustKind kind, double c) {
  if (kind == RobustKind::none) return {0.5 * r * r, r};
  if (!(c > 0)) throw Error(Errc::Precondition, "tuning constant must be positive");
  const double a = std::abs(r);
  if (kind == RobustKind::huber) {
    if (a <= c) return {0.5 * r * r, r};
    return {c * a - 0.5 * c * c, r > 0 ? c : -c};
  }
  if (a >= c) return {c * c / 6.0, 0.0};
  const double t = 1.0 - (r / c) * (r / c);
  return {c * c / 6.0 * (1.0 - t * t * t), r * t * t};
}

/// Derivative of psi, used for the Jacobian of robust moment functions.
inline double robust_psi_prime(double r, RobustKind kind, double c) {
  if (kind == RobustKind::none) return 1.0;
  const double a = std::abs(r);
  if (kind == RobustKind::huber) return a <= c ? 1.0 : 0.0;
  if (a >= c) return 0.0;
  const double s = (r / c) * (r / c);
  return (1.0 - s) * (1.0 - 5.0 * s);
}

inline double lambda_default(long n, long p, double kappa = 1.0) {
  if (n < 2 || p < 2) throw Error(Errc::Precondition, "lambda_default needs n >= 2 and p >= 2");
  return kappa * std::sqrt(std::log(static_cast<double>(p)) / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Dual

struct ElDualOptions {
  double tol = 1e-9;
  int max_iter = 200;
  double ridge = 0.0;  // optional n*ridge/2 * |nu|^2 added to the dual
  std::optional<Vector> nu0;
};

struct ElDual {
  Vector nu;
  Vector p_weights;
  double log_el = 0;
  double dual_value = 0;  // min over nu of -sum log*(1 + nu'g) + ridge term
  int iterations = 0;
  std::vector<double> dual_trace;
};

namespace detail {

struct PseudoLog {
  double eps;  // 1/n
  double f(double x) const {
    if (x >= eps) return std::log(x);
    const double r = x / eps;
    return std::log(eps) - 1.5 + 2.0 * r - 0.5 * r * r;
  }
  double d1(double x) const { return x >= eps ? 1.0 / x : (2.0 - x / eps) / eps; }
  double d2(double x) const { return x >= eps ? -1.0 / (x * x) : -1.0 / (eps * eps); }
};

inline double dual_objective(const Matrix& g, const Vector& nu, const PseudoLog& pl, double ridge) {
  const Vector t = (g * nu).array() + 1.0;
  double v = 0;
  for (Eigen::Index i = 0; i < t.size(); ++i) v -= pl.f(t[i]);
  return v + 0.5 * ridge * static_cast<double>(g.rows()) * nu.squaredNorm();
}

}  // namespace detail

/// Minimizes -sum log*(1 + nu'g_i) over nu. Weights p_i = 1/(n(1+nu'g_i))
/// are renormalized to sum to one.
inline ElDual el_dual_solve(const Matrix& g, const ElDualOptions& opt = {}) {
  const Eigen::Index n = g.rows(), q = g.cols();
  if (n == 0 || q == 0) throw Error(Errc::EmptyBatch, "moment matrix is empty");
  if (!g.allFinite()) throw Error(Errc::NonFinite, "moment matrix has non-finite entries");
  for (Eigen::Index j = 0; j < q; ++j)
    if (g.col(j).cwiseAbs().maxCoeff() == 0.0)
      throw Error(Errc::DegenerateMoments, "moment column " + std::to_string(j) + " is identically zero");

  const double nd = static_cast<double>(n);
  const detail::PseudoLog pl{1.0 / nd};
  ElDual out;
  out.nu = opt.nu0 && opt.nu0->size() == q ? *opt.nu0 : Vector::Zero(q);
  double obj = detail::dual_objective(g, out.nu, pl, opt.ridge);
  out.dual_trace.push_back(obj);
  // Gradient entries are sums of n moment terms; the tolerance scales with them.
  const double gscale = std::max(1.0, g.cwiseAbs().sum() / nd);
  bool converged = false;
  for (int it = 0; it < opt.max_iter; ++it) {
    const Vector t = (g * out.nu).array() + 1.0;
    Vector grad = opt.ridge * nd * out.nu;
    Matrix hess = Matrix::Identity(q, q) * (opt.ridge * nd);
    Vector w1(n), w2(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      w1[i] = pl.d1(t[i]);
      w2[i] = -pl.d2(t[i]);
    }
    grad -= g.transpose() * w1;
    hess.noalias() += g.transpose() * w2.asDiagonal() * g;
    out.iterations = it;
    if (grad.norm() < opt.tol * gscale) {
      converged = true;
      break;
    }
    Eigen::LDLT<Matrix> ldlt(hess);
    Vector step = -ldlt.solve(grad);
    if (ldlt.info() != Eigen::Success || !step.allFinite()) step = -grad;
    const double slope = grad.dot(step);
    // Newton decrement at rounding level of the objective.
    if (-slope < 1e-13 * std::max(1.0, std::abs(obj))) {
      converged = true;
      break;
    }
    double alpha = 1.0, trial = obj;
    bool accepted = false;
    for (int k = 0; k < 60; ++k, alpha *= 0.5) {
      trial = detail::dual_objective(g, out.nu + alpha * step, pl, opt.ridge);
      if (trial <= obj + 1e-4 * alpha * slope) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // No representable decrease left: accept the stationary point if the
      // gradient is at rounding level for this problem size.
      if (grad.norm() < 1e-6 * gscale) converged = true;
      break;
    }
    out.nu += alpha * step;
    obj = trial;
    out.dual_trace.push_back(obj);
  }
  if (!converged) {
    const Vector t = (g * out.nu).array() + 1.0;
    if (out.nu.norm() > 1e6 || t.minCoeff() < pl.eps)
      throw Error(Errc::DegenerateMoments, "zero is outside the convex hull of the moments");
    throw Error(Errc::NoConvergence, "dual Newton did not converge");
  }
  const Vector t = (g * out.nu).array() + 1.0;
  if (opt.ridge == 0.0) {
    if (t.minCoeff() < pl.eps) throw Error(Errc::DegenerateMoments, "dual optimum on the pseudo-log boundary");
    const double mass = (1.0 / (nd * t.array())).sum();
    if (std::abs(mass - 1.0) > 1e-6)
      throw Error(Errc::DegenerateMoments, "zero is outside the convex hull of the moments");
  }
  out.p_weights = (1.0 / (nd * t.array().max(pl.eps))).matrix();
  out.p_weights /= out.p_weights.sum();
  out.dual_value = obj;
  out.log_el = -nd * std::log(nd) + obj;
  return out;
}

// ---------------------------------------------------------------------------
// Moment models g_i(beta) = w_i * Psi_i * psi(o_i - B_i beta)

struct MomentModel {
  Matrix instruments;  // n x q
  Matrix design;       // n x k
  Vector response;     // n
  Vector weights;      // n; empty means unit weights
  RobustKind robust = RobustKind::none;
  double robust_c = 1.0;

  Eigen::Index n() const { return design.rows(); }
  Eigen::Index q() const { return instruments.cols(); }
  Eigen::Index k() const { return design.cols(); }

  void validate() const {
    if (instruments.rows() != design.rows() || response.size() != design.rows())
      throw Error(Errc::DimensionMismatch, "moment model rows disagree");
    if (weights.size() != 0 && weights.size() != design.rows())
      throw Error(Errc::DimensionMismatch, "weights length differs from n");
    if (q() < k()) throw Error(Errc::Precondition, "need at least as many instruments as coefficients");
  }

  Vector residuals(const Vector& beta) const { return response - design * beta; }

  double weight(Eigen::Index i) const { return weights.size() ? weights[i] : 1.0; }

  Matrix moments(const Vector& beta) const {
    const Vector r = residuals(beta);
    Matrix g = instruments;
    for (Eigen::Index i = 0; i < n(); ++i) g.row(i) *= weight(i) * robust_loss(r[i], robust, robust_c).psi;
    return g;
  }
};

/// Builds a model from per-unit maps applied to rows of `z`.
inline MomentModel make_moment_model(const std::function<Vector(const Vector&)>& instrument,
                                     const std::function<Vector(const Vector&)>& basis, const Vector& o,
                                     const Matrix& z) {
  MomentModel m;
  const Eigen::Index n = z.rows();
  if (o.size() != n) throw Error(Errc::DimensionMismatch, "one response per latent row");
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector zi = z.row(i).transpose();
    const Vector psi = instrument(zi), b = basis(zi);
    if (i == 0) {
      m.instruments.resize(n, psi.size());
      m.design.resize(n, b.size());
    }
    m.instruments.row(i) = psi.transpose();
    m.design.row(i) = b.transpose();
  }
  m.response = o;
  return m;
}

struct PelOptions {
  int max_outer = 5000;
  double tol = 1e-9;        // objective decrease
  double dual_ridge = 0.0;  // see ElDualOptions::ridge
  bool trace = false;
};

struct PelSolution {
  Vector beta_hat;
  Vector nu_hat;
  Vector p_weights;
  double log_el = 0;
  double lambda = 0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> objective_trace;
  std::vector<Vector> beta_path;  // filled when PelOptions::trace is set
};

namespace detail {

struct PelEval {
  double loss;  // -(log_el + n log n) / n
  ElDual dual;
};

inline PelEval pel_eval(const MomentModel& m, const Vector& beta, const PelOptions& opt, const std::optional<Vector>& nu0,
                        int outer) {
  ElDualOptions dopt;
  dopt.ridge = opt.dual_ridge;
  dopt.nu0 = nu0;
  const Matrix g = m.moments(beta);
  try {
    ElDual d;
    try {
      d = el_dual_solve(g, dopt);
    } catch (const Error&) {
      if (!nu0) throw;
      dopt.nu0.reset();
      d = el_dual_solve(g, dopt);
    }
    return {-d.dual_value / static_cast<double>(m.n()), std::move(d)};
  } catch (const Error& e) {
    throw Error(Errc::InnerSolveFailure, "outer iteration " + std::to_string(outer) + ": " + e.what());
  }
}

/// Envelope-theorem gradient of the loss at fixed nu.
inline Vector pel_gradient(const MomentModel& m, const Vector& beta, const ElDual& d) {
  const double nd = static_cast<double>(m.n());
  const PseudoLog pl{1.0 / nd};
  const Vector r = m.residuals(beta);
  const Vector gnu = m.moments(beta) * d.nu;
  const Vector zeta = m.instruments * d.nu;
  Vector coef(m.n());
  for (Eigen::Index i = 0; i < m.n(); ++i)
    coef[i] = pl.d1(1.0 + gnu[i]) * m.weight(i) * robust_psi_prime(r[i], m.robust, m.robust_c) * zeta[i];
  return -(m.design.transpose() * coef) / nd;
}

}  // namespace detail

/// argmin over beta of -log EL(beta)/n + lambda |beta|_1.
inline PelSolution pel_fit(const MomentModel& m, double lambda, const Vector& beta_init, const PelOptions& opt = {}) {
  m.validate();
  if (lambda < 0) throw Error(Errc::Precondition, "lambda must be nonnegative");
  if (beta_init.size() != m.k()) throw Error(Errc::DimensionMismatch, "beta_init has wrong length");
  PelSolution sol;
  sol.lambda = lambda;
  Vector beta = beta_init;
  detail::PelEval cur = detail::pel_eval(m, beta, opt, std::nullopt, 0);
  double obj = cur.loss + lambda * beta.lpNorm<1>();
  sol.objective_trace.push_back(obj);
  if (opt.trace) sol.beta_path.push_back(beta);
  double step = 1.0;
  for (int it = 1; it <= opt.max_outer; ++it) {
    const Vector grad = detail::pel_gradient(m, beta, cur.dual);
    bool accepted = false;
    Vector cand;
    double cand_obj = obj;
    detail::PelEval trial;
    // Halving from the last accepted step, restarting from 1.0 when it shrinks far.
    for (double s = std::min(1.0, 2.0 * step); s > 1e-14; s *= 0.5) {
      cand = soft_threshold(beta - s * grad, s * lambda);
      const Vector diff = cand - beta;
      try {
        trial = detail::pel_eval(m, cand, opt, cur.dual.nu, it);
      } catch (const Error&) {
        if (s > 1e-6) continue;
        throw;
      }
      cand_obj = trial.loss + lambda * cand.lpNorm<1>();
      if (trial.loss <= cur.loss + grad.dot(diff) + diff.squaredNorm() / (2.0 * s) + 1e-15 && cand_obj <= obj) {
        accepted = true;
        step = s;
        break;
      }
    }
    sol.iterations = it;
    if (!accepted) {
      sol.converged = true;
      break;
    }
    const double decrease = obj - cand_obj;
    beta = cand;
    cur = std::move(trial);
    obj = cand_obj;
    sol.objective_trace.push_back(obj);
    if (opt.trace) sol.beta_path.push_back(beta);
    if (decrease < opt.tol) {
      sol.converged = true;
      break;
    }
  }
  sol.beta_hat = beta;
  sol.nu_hat = cur.dual.nu;
  sol.p_weights = cur.dual.p_weights;
  sol.log_el = cur.dual.log_el;
  return sol;
}

inline std::string pel_to_csv(const PelSolution& s, bool with_path = false) {
  std::ostringstream out;
  out << "field,index,value\n";
  for (Eigen::Index j = 0; j < s.beta_hat.size(); ++j) out << "beta," << j << ',' << io::fmt(s.beta_hat[j]) << '\n';
  for (Eigen::Index j = 0; j < s.nu_hat.size(); ++j) out << "nu," << j << ',' << io::fmt(s.nu_hat[j]) << '\n';
  for (Eigen::Index j = 0; j < s.p_weights.size(); ++j) out << "p," << j << ',' << io::fmt(s.p_weights[j]) << '\n';
  out << "log_el,0," << io::fmt(s.log_el) << '\n';
  out << "lambda,0," << io::fmt(s.lambda) << '\n';
  out << "iterations,0," << s.iterations << '\n';
  out << "converged,0," << (s.converged ? 1 : 0) << '\n';
  if (with_path)
    for (std::size_t it = 0; it < s.beta_path.size(); ++it)
      for (Eigen::Index j = 0; j < s.beta_path[it].size(); ++j)
        out << "path_" << it << ',' << j << ',' << io::fmt(s.beta_path[it][j]) << '\n';
  return out.str();
}

}  // namespace mnarci
