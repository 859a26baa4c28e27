#pragma once

// Treatment-effect estimators: the selection-weighted orthogonal score and
// the pipeline built on it, plus four baselines (MAR IPW, robust AIPW,
// zero-noise-extrapolated IPW, latent imputation).

#include "mnarci/core.hpp"
#include "mnarci/dgp.hpp"
#include "mnarci/latent.hpp"
#include "mnarci/nuisance.hpp"
#include "mnarci/pel.hpp"

#include <functional>
#include <map>

namespace mnarci {

constexpr double kZ975 = 1.959964;

struct TauEstimate {
  double tau_hat = 0;
  double se = 0;
  double ci_low = 0, ci_high = 0;
  std::string method;
  Vector psi_values;
  std::map<std::string, double> diagnostics;
  // Carried for the direction diagnostics in the harness.
  Matrix z_hat;
  Vector unit_weights;  // selection weight used for each unit (0 when R = 0)
};

inline TauEstimate make_estimate(const Vector& psi, std::string method) {
  if (psi.size() < 2) throw Error(Errc::EmptyBatch, "need at least two influence values");
  TauEstimate t;
  t.method = std::move(method);
  t.psi_values = psi;
  t.tau_hat = psi.mean();
  t.se = sample_sd(psi) / std::sqrt(static_cast<double>(psi.size()));
  t.ci_low = t.tau_hat - kZ975 * t.se;
  t.ci_high = t.tau_hat + kZ975 * t.se;
  return t;
}

inline bool covers(const TauEstimate& t, double truth) { return t.ci_low <= truth && truth <= t.ci_high; }

enum class Normalization { hajek, ht };

struct ScoreOptions {
  Normalization normalization = Normalization::hajek;
  RobustKind residual_loss = RobustKind::none;
  double c0 = 1.0, c1 = 1.0;  // residual tuning constants per arm
};

/// Per-unit selection weight entering the score: R w / num, normalized to
/// mean one (hajek), or R / p (ht).
inline Vector selection_score_weights(const Dataset& ds, const NuisanceFit& nf, Normalization norm) {
  const auto n = static_cast<Eigen::Index>(ds.n());
  nf.validate(ds.n());
  Vector w = Vector::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!ds.units[i].r) continue;
    if (norm == Normalization::ht) {
      if (!(nf.p_sel_hat[i] > 0)) throw Error(Errc::ZeroDenominator, "selection probability is zero");
      w[i] = 1.0 / nf.p_sel_hat[i];
    } else {
      if (!(nf.num_hat[i] > 0)) throw Error(Errc::ZeroDenominator, "numerator probability is zero");
      w[i] = nf.w_tilde[i] / nf.num_hat[i];
    }
  }
  if (norm == Normalization::hajek) {
    const double mean = w.mean();
    if (!(mean > 0)) throw Error(Errc::ZeroDenominator, "no selected units");
    w /= mean;
  }
  return w;
}

/// psi_i = (m1 - m0) + W_i [A rho(Y - m1)/e - (1-A) rho(Y - m0)/(1-e)].
inline Vector score_psi(const Dataset& ds, const NuisanceFit& nf, const ScoreOptions& opt = {}) {
  const Vector w = selection_score_weights(ds, nf, opt.normalization);
  const auto n = static_cast<Eigen::Index>(ds.n());
  Vector psi(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& u = ds.units[i];
    double v = nf.m1_hat[i] - nf.m0_hat[i];
    if (u.r && w[i] != 0.0) {
      const double e = nf.e_hat[i];
      if (u.a) v += w[i] * robust_loss(*u.y - nf.m1_hat[i], opt.residual_loss, opt.c1).psi / e;
      else v -= w[i] * robust_loss(*u.y - nf.m0_hat[i], opt.residual_loss, opt.c0).psi / (1 - e);
    }
    psi[i] = v;
  }
  return psi;
}

inline Vector score_psi(const Dataset& ds, const NuisanceFit& nf, Normalization norm) {
  ScoreOptions opt;
  opt.normalization = norm;
  return score_psi(ds, nf, opt);
}

// ---------------------------------------------------------------------------
// Proposed pipeline

struct ProposedConfig {
  LatentMethod latent = LatentMethod::linear;
  int latent_dim = 3;
  CvaeOptions cvae{};
  SelectionMode selection = SelectionMode::mnar_parametric;
  bool oracle_nuisance = false;
  double kappa = 1.0;       // PEL penalty multiplier
  double huber_mult = 0.5;  // multiplies 1.345 * scale
  double w_min = 0.1, w_max = 10.0;
  double e_clip = 0.01;
  bool pooled_outcome = true;  // shared slopes with an arm shift
  double selection_ridge = 2000.0;  // on gamma_y, divided by n^2
  Normalization normalization = Normalization::hajek;
  std::uint64_t seed = 0;
  std::optional<Matrix> z_override;  // replaces the latent stage when set

  void validate() const {
    if (latent_dim < 1) throw Error(Errc::InvalidConfig, "latent_dim must be positive");
    if (!(kappa >= 0) || !(huber_mult > 0)) throw Error(Errc::InvalidConfig, "kappa >= 0 and huber_mult > 0 required");
    if (!(w_min > 0 && w_min <= 1 && w_max >= 1)) throw Error(Errc::InvalidConfig, "clip bounds must bracket 1");
    if (!(e_clip > 0 && e_clip < 0.5)) throw Error(Errc::InvalidConfig, "e_clip must lie in (0, 0.5)");
  }
};

/// Fitted nuisance maps of the pipeline, re-evaluable at any latent matrix.
struct ProposedMaps {
  Vector gamma;        // selection (intercept, y, z...); empty under MAR fallback
  Vector num_coef;     // numerator logistic on (1, z_1..z_k)
  Vector prop_coef;    // propensity logistic on (1, z)
  Vector coef0, coef1; // outcome basis coefficients
  double c0 = 1, c1 = 1;
  Vector tamed_y;      // outcomes used by the selection model
  Matrix moment_weight;
  double selection_rho = 0;
  bool pooled = false;
  bool fell_back = false;
};

namespace detail {

inline Matrix checked_override(const Matrix& z, const Dataset& ds) {
  if (z.rows() != static_cast<Eigen::Index>(ds.n()) || z.cols() < 1)
    throw Error(Errc::DimensionMismatch, "latent override needs one row per unit");
  return z;
}

inline Matrix latent_for(const Dataset& ds, const ProposedConfig& cfg) {
  if (cfg.z_override) return checked_override(*cfg.z_override, ds);
  if (cfg.latent == LatentMethod::linear) return fit_linear_latent(ds, cfg.latent_dim).z_hat;
  Rng rng = make_stream(cfg.seed ^ ds.seed, 11);
  CvaeOptions opt = cfg.cvae;
  opt.d = cfg.latent_dim;
  if (opt.input_rank == 0 && ds.p > 20) opt.input_rank = std::min<int>(20, static_cast<int>(ds.n()) - 1);
  return fit_cvae(ds, opt, rng).fit.z_hat;
}

/// Predicted substitutes from L1-penalized EL regressions of each latent
/// coordinate on the others, blended with the raw coordinate by fit quality.
inline Matrix pel_substitutes(const Matrix& z, double kappa, int& failures) {
  const Eigen::Index n = z.rows(), d = z.cols();
  if (d < 2) return z;
  Matrix out = z;
  const double lambda = lambda_default(n, std::max<Eigen::Index>(d, 2), kappa);
  for (Eigen::Index j = 0; j < d; ++j) {
    MomentModel m;
    m.design.resize(n, d - 1);
    for (Eigen::Index c = 0, k = 0; c < d; ++c)
      if (c != j) m.design.col(k++) = z.col(c);
    m.instruments = m.design;
    m.response = z.col(j);
    try {
      const PelSolution sol = pel_fit(m, lambda, Vector::Zero(d - 1));
      const Vector pred = m.design * sol.beta_hat;
      const double total = (z.col(j).array() - z.col(j).mean()).square().sum();
      const double r2 = total > 0 ? std::clamp(1.0 - (z.col(j) - pred).squaredNorm() / total, 0.0, 1.0) : 0.0;
      out.col(j) = (1.0 - r2) * z.col(j) + r2 * pred;
    } catch (const Error& e) {
      if (e.code() != Errc::InnerSolveFailure) throw;
      ++failures;
    }
  }
  return out;
}

inline Vector selection_at(const ProposedMaps& maps, const Matrix& z, const Dataset& ds, Vector& num) {
  const Eigen::Index k = maps.num_coef.size() - 1;
  const Matrix f = with_intercept(z, k);
  num = logistic_predict(f, maps.num_coef);
  Vector p = num;
  if (maps.gamma.size() == 0) return p;
  const Eigen::Index s = maps.gamma.size() - 2;
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    if (ds.units[i].r)
      p[i] = sigmoid(maps.gamma[0] + maps.gamma[1] * maps.tamed_y[i] + z.row(i).head(s).dot(maps.gamma.tail(s)));
  return p;
}

}  // namespace detail

/// Evaluates the fitted maps at latent matrix `z` and returns the nuisances.
inline NuisanceFit evaluate_maps(const Dataset& ds, const ProposedMaps& maps, const Matrix& z, const ProposedConfig& cfg) {
  NuisanceFit nf;
  nf.w_min = cfg.w_min;
  nf.w_max = cfg.w_max;
  nf.p_sel_hat = detail::selection_at(maps, z, ds, nf.num_hat);
  const WeightResult wr = stabilized_weights(nf.p_sel_hat, nf.num_hat, cfg.w_min, cfg.w_max);
  nf.w_tilde = wr.w;
  nf.clip_rate = wr.clip_rate;
  nf.e_hat = logistic_predict(with_intercept(z, z.cols()), maps.prop_coef).cwiseMax(cfg.e_clip).cwiseMin(1 - cfg.e_clip);
  const Matrix basis = outcome_basis(z);
  nf.m0_hat = basis * maps.coef0;
  nf.m1_hat = basis * maps.coef1;
  return nf;
}

namespace detail {

inline Matrix logistic_influence(const Matrix& f, const Vector& y, const Vector& coef) {
  const Vector mu = logistic_predict(f, coef);
  const double nd = static_cast<double>(f.rows());
  const Matrix info = f.transpose() * mu.cwiseProduct((Vector::Ones(mu.size()) - mu)).asDiagonal() * f / nd;
  const Matrix inv = info.ldlt().solve(Matrix::Identity(f.cols(), f.cols()));
  return (f.array().colwise() * (y - mu).array()).matrix() * inv.transpose();
}

/// Adds the first-order effect of the estimated nuisance coefficients
/// (numerator, selection, propensity, outcome models) to psi. Derivatives
/// of the mean score are central differences through the fitted maps.
inline Vector nuisance_corrected_psi(const Dataset& ds, const ProposedMaps& maps, const Matrix& z, const ProposedConfig& cfg,
                                     const ScoreOptions& so, const Vector& psi) {
  const auto n = static_cast<Eigen::Index>(ds.n());
  const double nd = static_cast<double>(n);
  Vector r(n), a(n), y = Vector::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    r[i] = ds.units[i].r;
    a[i] = ds.units[i].a;
    if (ds.units[i].r) y[i] = *ds.units[i].y;
  }
  auto tau_at = [&](const ProposedMaps& m) { return score_psi(ds, evaluate_maps(ds, m, z, cfg), so).mean(); };
  Vector out = psi;
  using Setter = std::function<void(ProposedMaps&, const Vector&)>;
  auto add_block = [&](const Vector& theta, const Setter& set, const Matrix& infl) {
    Vector grad(theta.size());
    ProposedMaps m = maps;
    for (Eigen::Index j = 0; j < theta.size(); ++j) {
      const double h = 1e-5 * std::max(1.0, std::abs(theta[j]));
      Vector t = theta;
      t[j] += h;
      set(m, t);
      const double up = tau_at(m);
      t[j] -= 2 * h;
      set(m, t);
      const double dn = tau_at(m);
      grad[j] = (up - dn) / (2 * h);
    }
    out += infl * grad;
  };

  const Eigen::Index k = maps.num_coef.size() - 1;
  add_block(maps.num_coef, [](ProposedMaps& m, const Vector& t) { m.num_coef = t; },
            logistic_influence(with_intercept(z, k), r, maps.num_coef));
  add_block(maps.prop_coef, [](ProposedMaps& m, const Vector& t) { m.prop_coef = t; },
            logistic_influence(with_intercept(z, z.cols()), a, maps.prop_coef));

  if (maps.gamma.size() > 0) {
    const Eigen::Index s_lat = maps.gamma.size() - 2;
    const Eigen::Index q = maps.moment_weight.rows();
    const Eigen::Index kin = q - 2;
    Matrix g(n, q), jac = Matrix::Zero(q, s_lat + 2);
    for (Eigen::Index i = 0; i < n; ++i) {
      Vector inst(q), sv(s_lat + 2);
      inst[0] = 1.0;
      inst.segment(1, kin) = z.row(i).head(kin).transpose();
      inst[q - 1] = a[i];
      sv[0] = 1.0;
      sv[1] = maps.tamed_y[i];
      sv.tail(s_lat) = z.row(i).head(s_lat).transpose();
      if (r[i]) {
        const double p = sigmoid(sv.dot(maps.gamma));
        g.row(i) = inst.transpose() * (1.0 / p - 1.0);
        jac -= inst * sv.transpose() * ((1 - p) / p);
      } else {
        g.row(i) = -inst.transpose();
      }
    }
    jac /= nd;
    const Matrix jtw = jac.transpose() * maps.moment_weight;
    Matrix hess = jtw * jac;
    hess(1, 1) += maps.selection_rho;
    const Matrix bread = -hess.fullPivLu().solve(jtw);
    add_block(maps.gamma, [](ProposedMaps& m, const Vector& t) { m.gamma = t; }, g * bread.transpose());
  }

  // Huber M-estimation: IF = H^{-1} w psi_c(res) x over the fitted rows.
  const NuisanceFit nf = evaluate_maps(ds, maps, z, cfg);
  const Matrix basis = outcome_basis(z);
  const Eigen::Index nb = basis.cols();
  auto huber_influence = [&](const Matrix& design, const Vector& coef, double c, const std::vector<Eigen::Index>& rows) {
    Matrix h = Matrix::Zero(design.cols(), design.cols());
    Matrix score = Matrix::Zero(n, design.cols());
    for (Eigen::Index i : rows) {
      const double res = y[i] - design.row(i).dot(coef);
      const double w = nf.w_tilde[i];
      if (std::abs(res) <= c) h += w * design.row(i).transpose() * design.row(i);
      score.row(i) = w * robust_loss(res, RobustKind::huber, c).psi * design.row(i);
    }
    h /= nd;
    return Matrix(score * h.fullPivLu().solve(Matrix::Identity(h.rows(), h.cols())).transpose());
  };
  if (maps.pooled) {
    Matrix design(n, nb + 1);
    design.leftCols(nb) = basis;
    design.col(nb) = a;
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < n; ++i)
      if (r[i]) rows.push_back(i);
    Vector theta(nb + 1);
    theta.head(nb) = maps.coef0;
    theta[nb] = maps.coef1[0] - maps.coef0[0];
    add_block(theta,
              [nb](ProposedMaps& m, const Vector& t) {
                m.coef0 = t.head(nb);
                m.coef1 = m.coef0;
                m.coef1[0] += t[nb];
              },
              huber_influence(design, theta, maps.c0, rows));
  } else {
    for (int arm = 0; arm < 2; ++arm) {
      std::vector<Eigen::Index> rows;
      for (Eigen::Index i = 0; i < n; ++i)
        if (r[i] && a[i] == arm) rows.push_back(i);
      const Vector& coef = arm ? maps.coef1 : maps.coef0;
      add_block(coef,
                [arm](ProposedMaps& m, const Vector& t) { (arm ? m.coef1 : m.coef0) = t; },
                huber_influence(basis, coef, arm ? maps.c1 : maps.c0, rows));
    }
  }
  return out;
}

}  // namespace detail

struct ProposedFit {
  TauEstimate estimate;
  ProposedMaps maps;
  Matrix z_tilde;
};

inline ProposedFit fit_proposed(const Dataset& ds, const ProposedConfig& cfg) {
  cfg.validate();
  ProposedFit out;
  if (cfg.oracle_nuisance) {
    const NuisanceFit nf = oracle_nuisance(ds);
    out.estimate = make_estimate(score_psi(ds, nf, cfg.normalization), "proposed");
    out.estimate.unit_weights = selection_score_weights(ds, nf, cfg.normalization);
    if (ds.units.front().z_true) out.estimate.z_hat = latent_matrix(ds);
    return out;
  }
  auto stage = [](const char* name, auto&& fn) {
    try {
      return fn();
    } catch (const Error& e) {
      throw Error(e.code(), std::string(name) + ": " + e.detail());
    }
  };
  const Matrix z_hat = stage("latent", [&] { return detail::latent_for(ds, cfg); });
  int pel_failures = 0;
  out.z_tilde = stage("pel", [&] { return detail::pel_substitutes(z_hat, cfg.kappa, pel_failures); });
  const Matrix& z = out.z_tilde;

  SelectionOptions sopt;
  sopt.gamma_ridge = cfg.selection_ridge;
  const SelectionFit sel = stage("selection", [&] { return fit_selection_with_fallback(ds, z, cfg.selection, sopt); });
  ProposedMaps& maps = out.maps;
  maps.fell_back = sel.fell_back;
  if (cfg.selection == SelectionMode::oracle) {
    // Oracle selection has no map form; evaluate nuisances directly.
    maps.num_coef.resize(0);
  } else {
    maps.num_coef = sel.num_coef;
    maps.gamma = sel.gamma;
    maps.moment_weight = sel.moment_weight;
    maps.selection_rho = cfg.selection_ridge / (static_cast<double>(ds.n()) * static_cast<double>(ds.n()));
    maps.tamed_y = detail::tamed_outcomes(ds);
  }
  const WeightResult wr = stabilized_weights(sel.p_sel, sel.num, cfg.w_min, cfg.w_max);

  const auto n = static_cast<Eigen::Index>(ds.n());
  Vector a(n);
  for (Eigen::Index i = 0; i < n; ++i) a[i] = ds.units[i].a;
  maps.prop_coef = stage("propensity", [&] { return fit_logistic(with_intercept(z, z.cols()), a, Vector(), 1e-6).coef; });
  const OutcomeFit of = stage("outcome", [&] { return fit_outcome_models(ds, z, wr.w, RobustKind::huber, OutcomeMethod::gee, cfg.huber_mult, cfg.pooled_outcome); });
  maps.pooled = cfg.pooled_outcome;
  maps.coef0 = of.coef0;
  maps.coef1 = of.coef1;
  maps.c0 = 1.345 * cfg.huber_mult * of.scale0;
  maps.c1 = 1.345 * cfg.huber_mult * of.scale1;

  NuisanceFit nf;
  if (cfg.selection == SelectionMode::oracle) {
    nf.p_sel_hat = sel.p_sel;
    nf.num_hat = sel.num;
    nf.w_tilde = wr.w;
    nf.clip_rate = wr.clip_rate;
    nf.e_hat = logistic_predict(with_intercept(z, z.cols()), maps.prop_coef).cwiseMax(cfg.e_clip).cwiseMin(1 - cfg.e_clip);
    nf.m0_hat = of.m0;
    nf.m1_hat = of.m1;
  } else {
    nf = evaluate_maps(ds, maps, z, cfg);
  }
  ScoreOptions so;
  so.normalization = cfg.normalization;
  so.residual_loss = RobustKind::huber;
  so.c0 = maps.c0;
  so.c1 = maps.c1;
  const Vector psi = stage("score", [&] { return score_psi(ds, nf, so); });
  out.estimate = make_estimate(psi, "proposed");
  if (cfg.selection != SelectionMode::oracle) {
    // Tau stays the plain score mean; the interval uses the corrected influence values.
    const Vector corrected = detail::nuisance_corrected_psi(ds, maps, z, cfg, so, psi);
    const TauEstimate adj = make_estimate(corrected, "proposed");
    out.estimate.psi_values = corrected;
    out.estimate.se = adj.se;
    out.estimate.ci_low = out.estimate.tau_hat - kZ975 * adj.se;
    out.estimate.ci_high = out.estimate.tau_hat + kZ975 * adj.se;
  }
  out.estimate.diagnostics["clip_rate"] = nf.clip_rate;
  out.estimate.diagnostics["selection_fallback"] = sel.fell_back ? 1.0 : 0.0;
  out.estimate.diagnostics["pel_failures"] = pel_failures;
  if (sel.gamma.size() > 1) out.estimate.diagnostics["gamma_y"] = sel.gamma[1];
  out.estimate.unit_weights = selection_score_weights(ds, nf, cfg.normalization);
  const double sw = out.estimate.unit_weights.sum();
  out.estimate.diagnostics["ess"] = sw * sw / out.estimate.unit_weights.squaredNorm();
  out.estimate.z_hat = z_hat;
  return out;
}

inline TauEstimate estimate_proposed(const Dataset& ds, const ProposedConfig& cfg = {}) {
  return fit_proposed(ds, cfg).estimate;
}

/// Re-scores a fitted pipeline with its nuisance maps evaluated at `z`.
inline TauEstimate rescore_proposed(const Dataset& ds, const ProposedFit& fit, const Matrix& z, const ProposedConfig& cfg) {
  if (fit.maps.num_coef.size() == 0) throw Error(Errc::Precondition, "rescoring needs fitted selection maps");
  const NuisanceFit nf = evaluate_maps(ds, fit.maps, z, cfg);
  ScoreOptions so;
  so.normalization = cfg.normalization;
  so.residual_loss = RobustKind::huber;
  so.c0 = fit.maps.c0;
  so.c1 = fit.maps.c1;
  return make_estimate(score_psi(ds, nf, so), "proposed");
}

// ---------------------------------------------------------------------------
// Baselines

struct BaselineConfig {
  int latent_dim = 3;
  double e_clip = 0.01;
  CvaeOptions cvae{};
  int bootstrap = 200;
  std::uint64_t seed = 0;
  std::optional<Matrix> z_override;
};

namespace detail {

struct MarParts {
  Matrix z;
  Vector p;  // MAR selection probability, 1 when nothing is missing
  Vector e;
};

inline MarParts mar_parts(const Dataset& ds, const BaselineConfig& cfg) {
  MarParts m;
  m.z = cfg.z_override ? checked_override(*cfg.z_override, ds) : fit_linear_latent(ds, cfg.latent_dim).z_hat;
  const auto n = static_cast<Eigen::Index>(ds.n());
  const bool complete = std::all_of(ds.units.begin(), ds.units.end(), [](const Observation& u) { return u.r == 1; });
  m.p = complete ? Vector::Ones(n) : fit_selection_model(ds, m.z, SelectionMode::mar).p_sel;
  m.e = fit_propensity(ds, m.z, cfg.e_clip);
  return m;
}

/// Hajek difference of selection- and treatment-weighted arm means of `y`,
/// with its linearization as influence values.
inline TauEstimate hajek_ipw(const Dataset& ds, const Vector& y, const Vector& p, const Vector& e, std::string method) {
  const auto n = static_cast<Eigen::Index>(ds.n());
  Vector a1 = Vector::Zero(n), a0 = Vector::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!ds.units[i].r) continue;
    if (ds.units[i].a) a1[i] = 1.0 / (p[i] * e[i]);
    else a0[i] = 1.0 / (p[i] * (1 - e[i]));
  }
  const double s1 = a1.sum(), s0 = a0.sum();
  if (!(s1 > 0) || !(s0 > 0)) throw Error(Errc::EmptyArm, "an arm has no observed units");
  double mu1 = 0, mu0 = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (a1[i] != 0) mu1 += a1[i] * y[i];
    if (a0[i] != 0) mu0 += a0[i] * y[i];
  }
  mu1 /= s1;
  mu0 /= s0;
  const double nd = static_cast<double>(n);
  Vector psi(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double v = mu1 - mu0;
    if (a1[i] != 0) v += nd * a1[i] * (y[i] - mu1) / s1;
    if (a0[i] != 0) v -= nd * a0[i] * (y[i] - mu0) / s0;
    psi[i] = v;
  }
  TauEstimate t = make_estimate(psi, std::move(method));
  t.tau_hat = mu1 - mu0;  // identical to mean(psi) up to rounding
  t.ci_low = t.tau_hat - kZ975 * t.se;
  t.ci_high = t.tau_hat + kZ975 * t.se;
  return t;
}

inline Vector observed_outcomes(const Dataset& ds) {
  Vector y = Vector::Zero(static_cast<Eigen::Index>(ds.n()));
  for (std::size_t i = 0; i < ds.n(); ++i)
    if (ds.units[i].r) y[static_cast<Eigen::Index>(i)] = *ds.units[i].y;
  return y;
}

inline Vector selection_weights_from(const Dataset& ds, const Vector& p) {
  Vector w = Vector::Zero(p.size());
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (ds.units[i].r) w[i] = 1.0 / p[i];
  return w / w.mean();
}

}  // namespace detail

inline TauEstimate estimate_naive_ipw(const Dataset& ds, const BaselineConfig& cfg = {}) {
  const detail::MarParts m = detail::mar_parts(ds, cfg);
  TauEstimate t = detail::hajek_ipw(ds, detail::observed_outcomes(ds), m.p, m.e, "naive_ipw");
  t.z_hat = m.z;
  t.unit_weights = detail::selection_weights_from(ds, m.p);
  return t;
}

/// MAR-weighted AIPW; `robust` selects Huber outcome models and residuals.
inline TauEstimate estimate_mar_aipw(const Dataset& ds, bool robust, const BaselineConfig& cfg = {}) {
  const detail::MarParts m = detail::mar_parts(ds, cfg);
  const auto n = static_cast<Eigen::Index>(ds.n());
  const RobustKind kind = robust ? RobustKind::huber : RobustKind::none;
  const OutcomeFit of = fit_outcome_models(ds, m.z, Vector::Ones(n), kind);
  NuisanceFit nf;
  nf.e_hat = m.e;
  nf.m0_hat = of.m0;
  nf.m1_hat = of.m1;
  nf.p_sel_hat = m.p;
  nf.num_hat = m.p;
  nf.w_tilde = Vector::Ones(n);
  ScoreOptions so;
  so.residual_loss = kind;
  so.c0 = 1.345 * of.scale0;
  so.c1 = 1.345 * of.scale1;
  TauEstimate t = make_estimate(score_psi(ds, nf, so), robust ? "robust_aipw" : "naive_aipw");
  t.z_hat = m.z;
  t.unit_weights = selection_score_weights(ds, nf, Normalization::hajek);
  return t;
}

inline TauEstimate estimate_robust_aipw(const Dataset& ds, const BaselineConfig& cfg = {}) {
  return estimate_mar_aipw(ds, true, cfg);
}

/// Per-unit least-squares line through (kappa_j, v_j), evaluated at 0.
inline double richardson_zero(const std::vector<double>& kappa, const std::vector<double>& v) {
  const std::size_t m = kappa.size();
  if (m < 2 || v.size() != m) throw Error(Errc::ExtrapolationFailure, "need at least two noise levels");
  double kb = 0, vb = 0;
  for (std::size_t j = 0; j < m; ++j) kb += kappa[j], vb += v[j];
  kb /= static_cast<double>(m);
  vb /= static_cast<double>(m);
  double sxx = 0, sxy = 0;
  for (std::size_t j = 0; j < m; ++j) {
    sxx += (kappa[j] - kb) * (kappa[j] - kb);
    sxy += (kappa[j] - kb) * (v[j] - vb);
  }
  if (!(sxx > 0) || !std::isfinite(sxy)) throw Error(Errc::ExtrapolationFailure, "degenerate extrapolation design");
  return vb - (sxy / sxx) * kb;
}

/// Zero-noise-extrapolated outcomes: readouts regenerated at channel noise
/// multipliers {1,2,3}, mitigated, averaged over K, extrapolated to zero.
inline Vector qem_outcomes(const Dataset& ds, const std::vector<double>& multipliers = {1.0, 2.0, 3.0}) {
  if (!ds.channel) throw Error(Errc::NotSynthetic, "noise re-execution needs the generating channel");
  const ChannelSpec base = *ds.channel;
  std::vector<Eigen::Index> obs;
  for (std::size_t i = 0; i < ds.n(); ++i)
    if (ds.units[i].r) obs.push_back(static_cast<Eigen::Index>(i));
  if (obs.size() < 3) throw Error(Errc::EmptyBatch, "too few observed outcomes for the readout pipeline");
  Matrix levels(static_cast<Eigen::Index>(obs.size()), static_cast<Eigen::Index>(multipliers.size()));
  for (std::size_t l = 0; l < multipliers.size(); ++l) {
    ChannelSpec spec = base;
    spec.gamma = base.gamma * multipliers[l];
    spec.noise_scale = base.noise_scale * multipliers[l];
    spec.validate();
    Rng rng = make_stream(ds.seed, 20 + l);
    Matrix state(static_cast<Eigen::Index>(obs.size()), 1);
    for (std::size_t k = 0; k < obs.size(); ++k) {
      Vector s(1);
      s[0] = *ds.units[obs[k]].y;
      state(static_cast<Eigen::Index>(k), 0) = apply_channel(s, spec, rng)[0];
    }
    const Matrix o = measure_and_stabilize(state, spec, spec.b, 1.0, rng);
    for (Eigen::Index k = 0; k < o.rows(); ++k) {
      const Vector mitigated = apply_mitigation(o.row(k).transpose(), spec.gamma);
      levels(k, static_cast<Eigen::Index>(l)) = mitigated.mean();
    }
  }
  Vector y = Vector::Zero(static_cast<Eigen::Index>(ds.n()));
  for (std::size_t k = 0; k < obs.size(); ++k) {
    const Eigen::Index row = static_cast<Eigen::Index>(k);
    std::vector<double> v(multipliers.size());
    for (std::size_t l = 0; l < multipliers.size(); ++l) v[l] = levels(row, static_cast<Eigen::Index>(l));
    y[obs[k]] = richardson_zero(multipliers, v);
  }
  return y;
}

inline TauEstimate estimate_qem_ipw(const Dataset& ds, const BaselineConfig& cfg = {}) {
  const detail::MarParts m = detail::mar_parts(ds, cfg);
  TauEstimate t = detail::hajek_ipw(ds, qem_outcomes(ds), m.p, m.e, "qem_ipw");
  t.z_hat = m.z;
  t.unit_weights = detail::selection_weights_from(ds, m.p);
  return t;
}

namespace detail {

/// Least-squares imputation on (1, z, A) and difference of completed arm means.
inline double imputation_tau(const Dataset& ds, const Matrix& z, const std::vector<Eigen::Index>& rows) {
  const Eigen::Index d = z.cols();
  Matrix f(static_cast<Eigen::Index>(rows.size()), d + 2);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const Eigen::Index i = rows[k];
    f(static_cast<Eigen::Index>(k), 0) = 1.0;
    f.row(static_cast<Eigen::Index>(k)).segment(1, d) = z.row(i);
    f(static_cast<Eigen::Index>(k), d + 1) = ds.units[i].a;
  }
  std::vector<Eigen::Index> obs;
  for (std::size_t k = 0; k < rows.size(); ++k)
    if (ds.units[rows[k]].r) obs.push_back(static_cast<Eigen::Index>(k));
  if (static_cast<Eigen::Index>(obs.size()) < d + 2) throw Error(Errc::InsufficientArm, "too few observed units to impute");
  Matrix fo(static_cast<Eigen::Index>(obs.size()), d + 2);
  Vector yo(fo.rows());
  for (std::size_t k = 0; k < obs.size(); ++k) {
    fo.row(static_cast<Eigen::Index>(k)) = f.row(obs[k]);
    yo[static_cast<Eigen::Index>(k)] = *ds.units[rows[obs[k]]].y;
  }
  const Vector beta = fo.colPivHouseholderQr().solve(yo);
  double s1 = 0, s0 = 0;
  int n1 = 0, n0 = 0;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto& u = ds.units[rows[k]];
    const double yk = u.r ? *u.y : f.row(static_cast<Eigen::Index>(k)).dot(beta);
    if (u.a) s1 += yk, ++n1;
    else s0 += yk, ++n0;
  }
  if (n1 == 0 || n0 == 0) throw Error(Errc::EmptyArm, "an arm is empty");
  return s1 / n1 - s0 / n0;
}

}  // namespace detail

inline TauEstimate estimate_cvae_only(const Dataset& ds, const BaselineConfig& cfg = {}) {
  Rng rng = make_stream(cfg.seed ^ ds.seed, 12);
  CvaeOptions opt = cfg.cvae;
  opt.d = cfg.latent_dim;
  if (opt.input_rank == 0 && ds.p > 20) opt.input_rank = std::min<int>(20, static_cast<int>(ds.n()) - 1);
  const Matrix z = cfg.z_override ? detail::checked_override(*cfg.z_override, ds) : fit_cvae(ds, opt, rng).fit.z_hat;
  const auto n = static_cast<Eigen::Index>(ds.n());
  std::vector<Eigen::Index> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  const double tau = detail::imputation_tau(ds, z, all);

  Rng brng = make_stream(cfg.seed ^ ds.seed, 13);
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  std::vector<double> boot;
  boot.reserve(static_cast<std::size_t>(cfg.bootstrap));
  std::vector<Eigen::Index> rows(all.size());
  for (int b = 0; b < cfg.bootstrap; ++b) {
    for (auto& r : rows) r = pick(brng);
    try {
      boot.push_back(detail::imputation_tau(ds, z, rows));
    } catch (const Error&) {
      // degenerate resample: skipped
    }
  }
  if (boot.size() < 10) throw Error(Errc::EmptyBatch, "bootstrap produced too few usable resamples");
  TauEstimate t;
  t.method = "cvae_only";
  t.tau_hat = tau;
  t.se = (quantile(boot, 0.975) - quantile(boot, 0.025)) / (2.0 * kZ975);
  t.ci_low = tau - kZ975 * t.se;
  t.ci_high = tau + kZ975 * t.se;
  t.psi_values = Vector::Constant(n, tau);
  t.diagnostics["bootstrap_used"] = static_cast<double>(boot.size());
  t.z_hat = z;
  Vector w = Vector::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i) w[i] = ds.units[i].r;
  t.unit_weights = w / w.mean();
  return t;
}

// ---------------------------------------------------------------------------

enum class Method { naive_ipw, robust_aipw, qem_ipw, cvae_only, proposed };

inline const std::vector<Method>& all_methods() {
  static const std::vector<Method> m{Method::naive_ipw, Method::robust_aipw, Method::qem_ipw, Method::cvae_only,
                                     Method::proposed};
  return m;
}

inline const char* method_name(Method m) {
  switch (m) {
    case Method::naive_ipw: return "naive_ipw";
    case Method::robust_aipw: return "robust_aipw";
    case Method::qem_ipw: return "qem_ipw";
    case Method::cvae_only: return "cvae_only";
    case Method::proposed: return "proposed";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (Method m : all_methods())
    if (s == method_name(m)) return m;
  throw Error(Errc::InvalidConfig, "unknown method '" + s + "'");
}

inline TauEstimate estimate(Method m, const Dataset& ds, const ProposedConfig& pc = {}, const BaselineConfig& bc = {}) {
  switch (m) {
    case Method::naive_ipw: return estimate_naive_ipw(ds, bc);
    case Method::robust_aipw: return estimate_robust_aipw(ds, bc);
    case Method::qem_ipw: return estimate_qem_ipw(ds, bc);
    case Method::cvae_only: return estimate_cvae_only(ds, bc);
    case Method::proposed: return estimate_proposed(ds, pc);
  }
  throw Error(Errc::InvalidConfig, "unknown method");
}

}  // namespace mnarci
