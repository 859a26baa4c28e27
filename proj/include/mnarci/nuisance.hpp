#pragma once

// Nuisance models: logistic IRLS, GEE by Fisher scoring, the selection
// model (oracle / MAR / shadow-variable MNAR), stabilized weights, and the
// robust outcome regressions.

#include "mnarci/core.hpp"
#include "mnarci/io.hpp"
#include "mnarci/pel.hpp"

#include <sstream>

namespace mnarci {

// ---------------------------------------------------------------------------
// Logistic regression

struct LogisticFit {
  Vector coef;
  bool separation = false;
  int iterations = 0;
};

/// Weighted ridge logistic MLE: maximizes sum w_i l_i - ridge/2 |beta|^2,
/// with w rescaled to mean one.
inline LogisticFit fit_logistic(const Matrix& f, const Vector& y, const Vector& w_in, double ridge, int max_iter = 100) {
  const Eigen::Index n = f.rows(), q = f.cols();
  if (y.size() != n || (w_in.size() != 0 && w_in.size() != n)) throw Error(Errc::DimensionMismatch, "logistic inputs disagree");
  if (n < q && ridge <= 0) throw Error(Errc::Precondition, "need n >= q or ridge > 0");
  Vector w = w_in.size() ? w_in : Vector::Ones(n);
  if ((w.array() <= 0).any()) throw Error(Errc::Precondition, "weights must be positive");
  w /= w.mean();

  auto objective = [&](const Vector& b) {
    const Vector eta = f * b;
    double v = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      // log sigma(eta) = -log1p(exp(-eta))
      const double e = eta[i];
      const double lp = e >= 0 ? -std::log1p(std::exp(-e)) : e - std::log1p(std::exp(e));
      const double lq = e >= 0 ? -e - std::log1p(std::exp(-e)) : -std::log1p(std::exp(e));
      v += w[i] * (y[i] * lp + (1 - y[i]) * lq);
    }
    return v - 0.5 * ridge * b.squaredNorm();
  };

  LogisticFit fit;
  fit.coef = Vector::Zero(q);
  double obj = objective(fit.coef);
  bool converged = false;
  for (int it = 1; it <= max_iter; ++it) {
    fit.iterations = it;
    const Vector eta = f * fit.coef;
    Vector mu(n), v(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      mu[i] = sigmoid(eta[i]);
      v[i] = w[i] * mu[i] * (1 - mu[i]);
    }
    const Vector grad = f.transpose() * (w.cwiseProduct(y - mu)) - ridge * fit.coef;
    Matrix info = f.transpose() * v.asDiagonal() * f;
    info.diagonal().array() += ridge;
    Eigen::LDLT<Matrix> ldlt(info);
    Vector step = ldlt.solve(grad);
    if (ldlt.info() != Eigen::Success || !step.allFinite()) throw Error(Errc::SingularInformation, "logistic information is singular");
    double t = 1.0;
    Vector cand = fit.coef + step;
    double cand_obj = objective(cand);
    while (cand_obj < obj - 1e-12 * std::abs(obj) && t > 1e-10) {
      t *= 0.5;
      cand = fit.coef + t * step;
      cand_obj = objective(cand);
    }
    const double change = (cand - fit.coef).cwiseAbs().maxCoeff();
    fit.coef = cand;
    obj = cand_obj;
    if (change < 1e-8) {
      converged = true;
      break;
    }
  }
  const Vector mu = (f * fit.coef).unaryExpr([](double e) { return sigmoid(e); });
  fit.separation = (mu.array() < 1e-6).any() || (mu.array() > 1 - 1e-6).any();
  if (!converged && !fit.separation) throw Error(Errc::NoConvergence, "logistic IRLS hit max_iter");
  return fit;
}

inline Vector logistic_predict(const Matrix& f, const Vector& coef) {
  return (f * coef).unaryExpr([](double e) { return sigmoid(e); });
}

// ---------------------------------------------------------------------------
// GEE

enum class Link { identity, logit };
enum class WorkingCorr { independence, exchangeable };

struct GeeSpec {
  Link link = Link::identity;
  WorkingCorr working_corr = WorkingCorr::independence;
  int max_iter = 100;
  double tol = 1e-10;

  void validate() const {
    if (!(tol > 0) || max_iter < 1) throw Error(Errc::InvalidConfig, "GEE needs tol > 0 and max_iter >= 1");
  }
};

struct GeeFit {
  Vector coef;
  double alpha = 0;  // exchangeable correlation
  int iterations = 0;
};

/// Solves sum_i w_i D_i' V_i^{-1} (y_i - mu_i) = 0. `designs[i]` is K x k.
inline GeeFit gee_solve(const Matrix& responses, const std::vector<Matrix>& designs, const GeeSpec& spec,
                        const Vector& weights, const std::optional<Vector>& start = std::nullopt) {
  spec.validate();
  const Eigen::Index n = responses.rows(), kk = responses.cols();
  if (static_cast<Eigen::Index>(designs.size()) != n) throw Error(Errc::DimensionMismatch, "one design per unit");
  if (n == 0) throw Error(Errc::EmptyBatch, "no units");
  const Eigen::Index q = designs[0].cols();
  for (const auto& d : designs)
    if (d.rows() != kk || d.cols() != q) throw Error(Errc::DimensionMismatch, "design shape mismatch");
  const Vector w = weights.size() ? weights : Vector::Ones(n);
  if (w.size() != n) throw Error(Errc::DimensionMismatch, "weights length differs from n");

  auto mean_of = [&](double eta) { return spec.link == Link::identity ? eta : sigmoid(eta); };
  auto dmu = [&](double mu) { return spec.link == Link::identity ? 1.0 : mu * (1 - mu); };
  auto var = [&](double mu) { return spec.link == Link::identity ? 1.0 : std::max(mu * (1 - mu), 1e-12); };

  GeeFit fit;
  fit.coef = start && start->size() == q ? *start : Vector::Zero(q);
  const bool exch = spec.working_corr == WorkingCorr::exchangeable && kk > 1;
  for (int it = 1; it <= spec.max_iter; ++it) {
    fit.iterations = it;
    // Correlation update from standardized residuals at the current coefficients.
    if (exch) {
      double ss = 0, cross = 0, wsum = 0;
      for (Eigen::Index i = 0; i < n; ++i) {
        Vector e(kk);
        for (Eigen::Index j = 0; j < kk; ++j) {
          const double mu = mean_of(designs[i].row(j).dot(fit.coef));
          e[j] = (responses(i, j) - mu) / std::sqrt(var(mu));
        }
        ss += w[i] * e.squaredNorm();
        cross += w[i] * (e.sum() * e.sum() - e.squaredNorm()) / 2.0;
        wsum += w[i];
      }
      const double phi = ss / std::max(wsum * kk - q, 1.0);
      const double pairs = wsum * kk * (kk - 1) / 2.0 - q;
      fit.alpha = phi > 0 && pairs > 0 ? cross / (phi * pairs) : 0.0;
      fit.alpha = std::clamp(fit.alpha, -1.0 / (kk - 1) + 1e-6, 0.99);
    }
    Matrix corr = Matrix::Identity(kk, kk);
    if (exch) {
      corr.setConstant(fit.alpha);
      corr.diagonal().setOnes();
    }
    const Matrix corr_inv = corr.inverse();
    Matrix info = Matrix::Zero(q, q);
    Vector score = Vector::Zero(q);
    for (Eigen::Index i = 0; i < n; ++i) {
      Vector mu(kk), a(kk);
      Matrix d = designs[i];
      for (Eigen::Index j = 0; j < kk; ++j) {
        mu[j] = mean_of(designs[i].row(j).dot(fit.coef));
        d.row(j) *= dmu(mu[j]);
        a[j] = 1.0 / std::sqrt(var(mu[j]));
      }
      const Matrix vinv = a.asDiagonal() * corr_inv * a.asDiagonal();
      const Matrix dv = d.transpose() * vinv;
      info.noalias() += w[i] * dv * d;
      score.noalias() += w[i] * dv * (responses.row(i).transpose() - mu);
    }
    Eigen::LDLT<Matrix> ldlt(info);
    if (ldlt.info() != Eigen::Success || ldlt.isNegative() ||
        ldlt.vectorD().cwiseAbs().minCoeff() <= 1e-12 * std::max(1.0, ldlt.vectorD().cwiseAbs().maxCoeff()))
      throw Error(Errc::SingularInformation, "GEE information matrix is singular");
    const Vector step = ldlt.solve(score);
    fit.coef += step;
    if (!fit.coef.allFinite()) throw Error(Errc::NonFinite, "GEE coefficients diverged");
    if (step.cwiseAbs().maxCoeff() < spec.tol) return fit;
  }
  throw Error(Errc::NoConvergence, "GEE did not converge");
}

/// All K responses of a unit share the unit's design row.
inline GeeFit gee_solve(const Matrix& responses, const Matrix& design, const GeeSpec& spec, const Vector& weights,
                        const std::optional<Vector>& start = std::nullopt) {
  if (design.rows() != responses.rows()) throw Error(Errc::DimensionMismatch, "design rows differ from response rows");
  std::vector<Matrix> designs(static_cast<std::size_t>(design.rows()));
  for (Eigen::Index i = 0; i < design.rows(); ++i)
    designs[i] = design.row(i).replicate(responses.cols(), 1);
  return gee_solve(responses, designs, spec, weights, start);
}

// ---------------------------------------------------------------------------
// Selection model and weights

enum class SelectionMode { oracle, mar, mnar_parametric };

inline const char* selection_mode_name(SelectionMode m) {
  switch (m) {
    case SelectionMode::oracle: return "oracle";
    case SelectionMode::mar: return "mar";
    case SelectionMode::mnar_parametric: return "mnar_parametric";
  }
  return "?";
}

struct SelectionFit {
  Vector p_sel;  // P(R=1|Y,X,Z) at observed Y; equals num for R=0 units
  Vector num;    // P(R=1|X,Z)
  Vector gamma;  // (intercept, gamma_y, gamma_z...) in mnar mode
  Vector num_coef;
  Matrix moment_weight;  // GMM weighting used for gamma
  bool fell_back = false;  // mnar Newton failed and MAR was used
  int newton_iterations = 0;
};

/// Intercept plus the first columns of z_hat.
inline Matrix with_intercept(const Matrix& z, Eigen::Index cols) {
  Matrix f(z.rows(), cols + 1);
  f.col(0).setOnes();
  f.rightCols(cols) = z.leftCols(cols);
  return f;
}

namespace detail {

constexpr double kTameMult = 2.0;

/// Observed outcomes clipped to median +- 2 normalized MADs so gross
/// outliers cannot push selection probabilities to zero.
inline Vector tamed_outcomes(const Dataset& ds) {
  std::vector<double> obs;
  for (const auto& u : ds.units)
    if (u.r) obs.push_back(*u.y);
  Vector y = Vector::Zero(static_cast<Eigen::Index>(ds.n()));
  if (obs.empty()) return y;
  const double med = median(obs);
  const double s = std::max(normalized_mad(obs), 1e-12);
  for (std::size_t i = 0; i < ds.n(); ++i)
    if (ds.units[i].r) y[static_cast<Eigen::Index>(i)] = std::clamp(*ds.units[i].y, med - kTameMult * s, med + kTameMult * s);
  return y;
}

}  // namespace detail

struct SelectionOptions {
  int selection_latents = 1;  // leading latent coordinates inside the selection logit
  int instrument_latents = 3; // leading latent coordinates used as instruments
  double gamma_ridge = 0.0;  // penalty on gamma_y, divided by n^2
};

/// MNAR selection by the shadow-variable estimating equations
/// mean_i Psi_i (R_i / p_i - 1) = 0 with Psi = (1, z_1..z_k, A) and
/// p = sigma(g0 + gy Y + gz' z_1..z_s), s <= k. Latent coordinates beyond s
/// and the action act as excluded instruments. Over-identified systems are
/// solved by damped Gauss-Newton on the weighted quadratic form.
inline Vector solve_shadow_selection(const Dataset& ds, const Matrix& z_hat, const Vector& start, int& iterations,
                                     const SelectionOptions& opt = {}, Matrix* weight_out = nullptr) {
  const auto n = static_cast<Eigen::Index>(ds.n());
  const Eigen::Index k = std::min<Eigen::Index>(opt.instrument_latents, z_hat.cols());
  const Eigen::Index s_lat = std::min<Eigen::Index>(opt.selection_latents, k);
  const Vector y = detail::tamed_outcomes(ds);
  Matrix s(n, s_lat + 2), psi(n, k + 2);
  Vector r(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    s(i, 0) = 1.0;
    s(i, 1) = y[i];
    s.row(i).tail(s_lat) = z_hat.row(i).head(s_lat);
    psi(i, 0) = 1.0;
    psi.row(i).segment(1, k) = z_hat.row(i).head(k);
    psi(i, k + 1) = ds.units[i].a;
    r[i] = ds.units[i].r;
  }
  const double nd = static_cast<double>(n);
  auto contributions = [&](const Vector& g) {
    Matrix c(n, k + 2);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double resid = r[i] ? 1.0 / sigmoid(s.row(i).dot(g)) - 1.0 : -1.0;
      c.row(i) = psi.row(i) * resid;
    }
    return c;
  };
  Vector g = start;
  if (g.size() != s_lat + 2) throw Error(Errc::DimensionMismatch, "selection start has wrong length");
  // Fixed weighting from the moment covariance at the start value.
  const Matrix c0 = contributions(g);
  Matrix wmat = Matrix::Identity(k + 2, k + 2);
  {
    const Matrix cc = c0.rowwise() - c0.colwise().mean();
    Matrix cov = cc.transpose() * cc / nd;
    cov.diagonal().array() += 1e-8;
    Eigen::LLT<Matrix> llt(cov);
    if (llt.info() == Eigen::Success) wmat = llt.solve(Matrix::Identity(k + 2, k + 2));
  }
  if (weight_out) *weight_out = wmat;
  auto moments = [&](const Vector& gg) { return Vector(contributions(gg).colwise().mean().transpose()); };
  const double rho = opt.gamma_ridge / (nd * nd);
  auto qform = [&](const Vector& m) { return m.dot(wmat * m); };
  auto objective = [&](const Vector& m, const Vector& gg) { return qform(m) + rho * gg[1] * gg[1]; };
  Vector m = moments(g);
  double q = objective(m, g);
  for (int it = 1; it <= 100; ++it) {
    iterations = it;
    Matrix jac = Matrix::Zero(k + 2, s_lat + 2);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!r[i]) continue;
      const double p = sigmoid(s.row(i).dot(g));
      jac -= psi.row(i).transpose() * s.row(i) * ((1 - p) / p);
    }
    jac /= nd;
    const Matrix jtw = jac.transpose() * wmat;
    Matrix hess = jtw * jac;
    hess(1, 1) += rho;
    Vector grad = jtw * m;
    grad[1] += rho * g[1];
    Eigen::FullPivLU<Matrix> lu(hess);
    if (!lu.isInvertible()) throw Error(Errc::NewtonFailure, "selection Jacobian is rank deficient");
    const Vector step = -lu.solve(grad);
    double t = 1.0;
    bool ok = false;
    for (int h = 0; h < 40; ++h, t *= 0.5) {
      const Vector cand = g + t * step;
      const Vector mc = moments(cand);
      const double qc = objective(mc, cand);
      if (mc.allFinite() && qc <= q) {
        g = cand;
        m = mc;
        q = qc;
        ok = true;
        break;
      }
    }
    if (std::abs(g[1]) > 50) throw Error(Errc::NewtonFailure, "selection outcome coefficient diverged");
    if (!ok || (t * step).cwiseAbs().maxCoeff() < 1e-10) {
      // Stationary for the quadratic form: accept when the gradient vanishes.
      Vector gnow = jac.transpose() * wmat * m;
      gnow[1] += rho * g[1];
      if (gnow.cwiseAbs().maxCoeff() < 1e-7 * std::max(1.0, q)) return g;
      if (!ok) throw Error(Errc::NewtonFailure, "selection Gauss-Newton stalled");
    }
  }
  throw Error(Errc::NewtonFailure, "selection Gauss-Newton hit its iteration limit");
}

inline SelectionFit fit_selection_model(const Dataset& ds, const Matrix& z_hat, SelectionMode mode,
                                        const SelectionOptions& opt = {}) {
  const auto n = static_cast<Eigen::Index>(ds.n());
  if (z_hat.rows() != n) throw Error(Errc::DimensionMismatch, "one latent row per unit");
  SelectionFit out;
  if (mode == SelectionMode::oracle) {
    if (!ds.synthetic()) throw Error(Errc::NotSynthetic, "oracle selection needs synthetic data");
    out.p_sel.resize(n);
    out.num.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      out.p_sel[i] = ds.oracle[i].p_sel;
      out.num[i] = ds.oracle[i].num;
    }
    return out;
  }
  Vector r(n);
  for (Eigen::Index i = 0; i < n; ++i) r[i] = ds.units[i].r;
  const Eigen::Index k = std::min<Eigen::Index>(3, z_hat.cols());
  const Matrix f = with_intercept(z_hat, k);
  const LogisticFit numfit = fit_logistic(f, r, Vector(), 1e-6);
  out.num_coef = numfit.coef;
  out.num = logistic_predict(f, numfit.coef);
  out.p_sel = out.num;
  if (mode == SelectionMode::mar) return out;

  const Eigen::Index s_lat = std::min<Eigen::Index>(opt.selection_latents, std::min<Eigen::Index>(opt.instrument_latents, z_hat.cols()));
  Vector start = Vector::Zero(s_lat + 2);
  start[0] = numfit.coef[0];
  start.tail(s_lat) = numfit.coef.segment(1, s_lat);
  out.gamma = solve_shadow_selection(ds, z_hat, start, out.newton_iterations, opt, &out.moment_weight);
  const Vector y = detail::tamed_outcomes(ds);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!ds.units[i].r) continue;
    const double eta = out.gamma[0] + out.gamma[1] * y[i] + z_hat.row(i).head(s_lat).dot(out.gamma.tail(s_lat));
    out.p_sel[i] = sigmoid(eta);
  }
  return out;
}

/// MNAR fit with MAR fallback on NewtonFailure.
inline SelectionFit fit_selection_with_fallback(const Dataset& ds, const Matrix& z_hat, SelectionMode mode,
                                                const SelectionOptions& opt = {}) {
  try {
    return fit_selection_model(ds, z_hat, mode, opt);
  } catch (const Error& e) {
    if (e.code() != Errc::NewtonFailure) throw;
    SelectionFit out = fit_selection_model(ds, z_hat, SelectionMode::mar);
    out.fell_back = true;
    return out;
  }
}

struct WeightResult {
  Vector w;
  double clip_rate = 0;
};

inline WeightResult stabilized_weights(const Vector& p_sel, const Vector& num, double w_min = 0.1, double w_max = 10.0) {
  if (p_sel.size() != num.size()) throw Error(Errc::DimensionMismatch, "p_sel and num lengths differ");
  if (!(w_min <= w_max)) throw Error(Errc::InvalidConfig, "w_min must not exceed w_max");
  WeightResult out;
  out.w.resize(p_sel.size());
  Eigen::Index clipped = 0;
  for (Eigen::Index i = 0; i < p_sel.size(); ++i) {
    if (!(p_sel[i] > 0)) throw Error(Errc::ZeroDenominator, "selection probability is zero");
    const double raw = num[i] / p_sel[i];
    out.w[i] = std::clamp(raw, w_min, w_max);
    if (out.w[i] != raw) ++clipped;
  }
  out.clip_rate = p_sel.size() ? static_cast<double>(clipped) / static_cast<double>(p_sel.size()) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Propensity and outcome models

inline Vector fit_propensity(const Dataset& ds, const Matrix& z, double eps_clip = 0.01) {
  const auto n = static_cast<Eigen::Index>(ds.n());
  Vector a(n);
  for (Eigen::Index i = 0; i < n; ++i) a[i] = ds.units[i].a;
  const Matrix f = with_intercept(z, z.cols());
  const LogisticFit fit = fit_logistic(f, a, Vector(), 1e-6);
  return logistic_predict(f, fit.coef).cwiseMax(eps_clip).cwiseMin(1 - eps_clip);
}

/// Outcome basis (1, z, sin z_1).
inline Matrix outcome_basis(const Matrix& z) {
  Matrix b(z.rows(), z.cols() + 2);
  b.col(0).setOnes();
  b.middleCols(1, z.cols()) = z;
  b.col(z.cols() + 1) = z.col(0).array().sin().matrix();
  return b;
}

enum class OutcomeMethod { gee, pel };

struct RobustRegression {
  Vector coef;
  double scale = 1;  // frozen residual scale (1 when not robust)
  int iterations = 0;
};

/// Weighted regression of y on design with an optional robust loss. The
/// robust path starts from an L1 fit, freezes the normalized MAD of its
/// residuals, then iterates psi-weighted least squares.
inline RobustRegression robust_regression(const Matrix& design, const Vector& y, const Vector& w, RobustKind kind,
                                          double c_mult = 1.0, OutcomeMethod method = OutcomeMethod::gee) {
  GeeSpec spec;
  RobustRegression out;
  const Eigen::Index n = design.rows();
  const Matrix resp = y;
  out.coef = gee_solve(resp, design, spec, w).coef;
  if (kind == RobustKind::none && method == OutcomeMethod::gee) return out;
  if (kind != RobustKind::none) {
    for (int it = 0; it < 50; ++it) {
      const Vector r = y - design * out.coef;
      Vector lw(n);
      for (Eigen::Index i = 0; i < n; ++i) lw[i] = w[i] / std::max(std::abs(r[i]), 1e-6);
      const Vector next = gee_solve(resp, design, spec, lw).coef;
      const double change = (next - out.coef).cwiseAbs().maxCoeff();
      out.coef = next;
      if (change < 1e-8) break;
    }
    const Vector r = y - design * out.coef;
    out.scale = std::max(normalized_mad(std::vector<double>(r.data(), r.data() + r.size())), 1e-8);
  }
  const double c = (kind == RobustKind::tukey ? 4.685 : 1.345) * c_mult * out.scale;
  if (method == OutcomeMethod::pel) {
    MomentModel m;
    m.instruments = design;
    m.design = design;
    m.response = y;
    m.weights = w;
    m.robust = kind;
    m.robust_c = c;
    const PelSolution sol = pel_fit(m, 0.0, out.coef);
    out.coef = sol.beta_hat;
    out.iterations = sol.iterations;
    return out;
  }
  for (int it = 1; it <= 500; ++it) {
    out.iterations = it;
    const Vector r = y - design * out.coef;
    Vector iw(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double psi = robust_loss(r[i], kind, c).psi;
      iw[i] = w[i] * (std::abs(r[i]) > 1e-12 ? psi / r[i] : 1.0);
    }
    Vector next;
    try {
      next = gee_solve(resp, design, spec, iw).coef;
    } catch (const Error& e) {
      if (e.code() != Errc::SingularInformation) throw;
      break;  // redescending loss rejected too many points; keep the last iterate
    }
    const double change = (next - out.coef).cwiseAbs().maxCoeff();
    out.coef = next;
    if (change < 1e-12) break;
  }
  return out;
}

struct OutcomeFit {
  Vector m0, m1;
  Vector coef0, coef1;
  double scale0 = 1, scale1 = 1;
};

/// Per-arm robust regressions on the outcome basis, or with `pooled` one
/// regression on (basis, A) whose arm shift moves the intercept.
inline OutcomeFit fit_outcome_models(const Dataset& ds, const Matrix& z_hat, const Vector& w_tilde, RobustKind robust,
                                     OutcomeMethod method = OutcomeMethod::gee, double c_mult = 1.0, bool pooled = false) {
  const auto n = static_cast<Eigen::Index>(ds.n());
  if (z_hat.rows() != n || w_tilde.size() != n) throw Error(Errc::DimensionMismatch, "inputs must have one row per unit");
  const Matrix basis = outcome_basis(z_hat);
  OutcomeFit out;
  auto arm_index = [&](int arm) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = 0; i < n; ++i)
      if (ds.units[i].r && (arm < 0 || ds.units[i].a == arm)) idx.push_back(i);
    return idx;
  };
  for (int arm = 0; arm < 2; ++arm)
    if (static_cast<Eigen::Index>(arm_index(arm).size()) < z_hat.cols() + 2)
      throw Error(Errc::InsufficientArm, "arm " + std::to_string(arm) + " has too few observed units");
  if (pooled) {
    const auto idx = arm_index(-1);
    const auto rows = static_cast<Eigen::Index>(idx.size());
    Matrix d(rows, basis.cols() + 1);
    Vector y(rows), w(rows);
    for (Eigen::Index k = 0; k < rows; ++k) {
      d.row(k).head(basis.cols()) = basis.row(idx[k]);
      d(k, basis.cols()) = ds.units[idx[k]].a;
      y[k] = *ds.units[idx[k]].y;
      w[k] = w_tilde[idx[k]];
    }
    const RobustRegression rr = robust_regression(d, y, w, robust, c_mult, method);
    out.coef0 = rr.coef.head(basis.cols());
    out.coef1 = out.coef0;
    out.coef1[0] += rr.coef[basis.cols()];
    out.scale0 = out.scale1 = rr.scale;
    out.m0 = basis * out.coef0;
    out.m1 = basis * out.coef1;
    return out;
  }
  for (int arm = 0; arm < 2; ++arm) {
    const auto idx = arm_index(arm);
    Matrix d(static_cast<Eigen::Index>(idx.size()), basis.cols());
    Vector y(d.rows()), w(d.rows());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      d.row(static_cast<Eigen::Index>(k)) = basis.row(idx[k]);
      y[static_cast<Eigen::Index>(k)] = *ds.units[idx[k]].y;
      w[static_cast<Eigen::Index>(k)] = w_tilde[idx[k]];
    }
    const RobustRegression rr = robust_regression(d, y, w, robust, c_mult, method);
    (arm ? out.coef1 : out.coef0) = rr.coef;
    (arm ? out.scale1 : out.scale0) = rr.scale;
    (arm ? out.m1 : out.m0) = basis * rr.coef;
  }
  return out;
}

// ---------------------------------------------------------------------------

struct NuisanceFit {
  Vector e_hat, m0_hat, m1_hat, p_sel_hat, num_hat, w_tilde;
  double w_min = 0.1, w_max = 10.0;
  double clip_rate = 0;

  void validate(std::size_t n) const {
    const auto nn = static_cast<Eigen::Index>(n);
    for (const Vector* v : {&e_hat, &m0_hat, &m1_hat, &p_sel_hat, &num_hat, &w_tilde})
      if (v->size() != nn) throw Error(Errc::MissingNuisance, "nuisance component missing or wrong length");
  }
};

inline std::string nuisance_to_csv(const NuisanceFit& f) {
  std::ostringstream out;
  out << "unit,e_hat,m0_hat,m1_hat,p_sel_hat,w_tilde\n";
  for (Eigen::Index i = 0; i < f.e_hat.size(); ++i)
    out << i << ',' << io::fmt(f.e_hat[i]) << ',' << io::fmt(f.m0_hat[i]) << ',' << io::fmt(f.m1_hat[i]) << ','
        << io::fmt(f.p_sel_hat[i]) << ',' << io::fmt(f.w_tilde[i]) << '\n';
  return out.str();
}

/// True nuisance functions of a synthetic dataset (no clipping).
inline NuisanceFit oracle_nuisance(const Dataset& ds) {
  if (!ds.synthetic()) throw Error(Errc::NotSynthetic, "oracle nuisances need synthetic data");
  const auto n = static_cast<Eigen::Index>(ds.n());
  NuisanceFit f;
  f.e_hat.resize(n), f.m0_hat.resize(n), f.m1_hat.resize(n), f.p_sel_hat.resize(n), f.num_hat.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& o = ds.oracle[i];
    f.e_hat[i] = o.e;
    f.m0_hat[i] = o.m0;
    f.m1_hat[i] = o.m1;
    f.p_sel_hat[i] = o.p_sel;
    f.num_hat[i] = o.num;
  }
  f.w_min = 0;
  f.w_max = std::numeric_limits<double>::infinity();
  const WeightResult wr = stabilized_weights(f.p_sel_hat, f.num_hat, f.w_min, f.w_max);
  f.w_tilde = wr.w;
  f.clip_rate = wr.clip_rate;
  return f;
}

}  // namespace mnarci
