#pragma once

// Causal direction between two variables by comparing weighted residual
// dependence of the two additive-noise fits, and the CP / CSR / HRJSD
// directionality diagnostics.

#include "mnarci/core.hpp"

#include <map>

namespace mnarci {

struct HsicResult {
  double value = 0;
  bool degenerate = false;
};

namespace detail {

inline Vector normalized_weights(const Vector& w, Eigen::Index n) {
  if (w.size() == 0) return Vector::Constant(n, 1.0 / static_cast<double>(n));
  if (w.size() != n) throw Error(Errc::DimensionMismatch, "weights length differs from n");
  if ((w.array() <= 0).any() || !w.allFinite()) throw Error(Errc::Precondition, "weights must be positive and finite");
  return w / w.sum();
}

/// Lower weighted median of |u_i - u_j| over all ordered pairs (i = j
/// included), pair weight om_i om_j. O(n log n) per evaluation of the CDF.
inline double weighted_median_distance(const Vector& u, const Vector& om) {
  const Eigen::Index n = u.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return u[a] < u[b]; });
  std::vector<double> sv(order.size()), cum(order.size() + 1, 0.0);
  for (std::size_t k = 0; k < order.size(); ++k) {
    sv[k] = u[order[k]];
    cum[k + 1] = cum[k] + om[order[k]];
  }
  auto cdf = [&](double t) {
    double f = 0;
    for (std::size_t k = 0; k < sv.size(); ++k) {
      const auto hi = std::upper_bound(sv.begin(), sv.end(), sv[k] + t) - sv.begin();
      const auto lo = std::lower_bound(sv.begin(), sv.end(), sv[k] - t) - sv.begin();
      f += om[order[k]] * (cum[static_cast<std::size_t>(hi)] - cum[static_cast<std::size_t>(lo)]);
    }
    return f;
  };
  double lo = 0, hi = sv.back() - sv.front();
  if (cdf(0.0) >= 0.5 || hi == 0.0) return 0.0;
  for (int it = 0; it < 200 && hi - lo > 1e-15 * std::max(1.0, hi); ++it) {
    const double mid = 0.5 * (lo + hi);
    (cdf(mid) >= 0.5 ? hi : lo) = mid;
  }
  return hi;
}

}  // namespace detail

/// Normalized weighted HSIC with Gaussian kernels at median-heuristic
/// bandwidths. Returns 0 flagged as degenerate when a variable is constant.
inline HsicResult weighted_hsic_ex(const Vector& u, const Vector& v, const Vector& w = Vector()) {
  const Eigen::Index n = u.size();
  if (v.size() != n) throw Error(Errc::DimensionMismatch, "u and v lengths differ");
  if (n < 8) throw Error(Errc::Precondition, "weighted_hsic needs n >= 8");
  const Vector om = detail::normalized_weights(w, n);
  const double su = detail::weighted_median_distance(u, om);
  const double sv = detail::weighted_median_distance(v, om);
  if (!(su > 0) || !(sv > 0)) return {0.0, true};
  const double gu = 1.0 / (2.0 * su * su), gv = 1.0 / (2.0 * sv * sv);

  // HSIC = E[kl] - 2 E_i[a_i b_i] + E[a] E[b] with a_i = sum_j om_j k_ij.
  Vector a = Vector::Zero(n), b = Vector::Zero(n);
  double kl = 0, kk = 0, ll = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    a[i] += om[i];
    b[i] += om[i];
    kl += om[i] * om[i];
    kk += om[i] * om[i];
    ll += om[i] * om[i];
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double du = u[i] - u[j], dv = v[i] - v[j];
      const double k = std::exp(-gu * du * du), l = std::exp(-gv * dv * dv);
      a[i] += om[j] * k;
      a[j] += om[i] * k;
      b[i] += om[j] * l;
      b[j] += om[i] * l;
      const double ww = 2.0 * om[i] * om[j];
      kl += ww * k * l;
      kk += ww * k * k;
      ll += ww * l * l;
    }
  }
  const double ea = om.dot(a), eb = om.dot(b);
  const double h_uv = kl - 2.0 * om.dot(a.cwiseProduct(b)) + ea * eb;
  const double h_uu = kk - 2.0 * om.dot(a.cwiseProduct(a)) + ea * ea;
  const double h_vv = ll - 2.0 * om.dot(b.cwiseProduct(b)) + eb * eb;
  if (!(h_uu > 0) || !(h_vv > 0)) return {0.0, true};
  return {std::clamp(h_uv / std::sqrt(h_uu * h_vv), 0.0, 1.0), false};
}

inline double weighted_hsic(const Vector& u, const Vector& v, const Vector& w = Vector()) {
  return weighted_hsic_ex(u, v, w).value;
}

// ---------------------------------------------------------------------------
// Additive-noise fits

namespace detail {

/// [1, s, z, s^2, s^3, s*z_1..z_3]; the last 2 + min(3, d) columns are penalized.
inline Matrix anm_basis(const Vector& s, const Matrix& z, Eigen::Index& n_penalized) {
  const Eigen::Index n = s.size(), d = z.cols(), k3 = std::min<Eigen::Index>(3, d);
  Matrix b(n, 2 + d + 2 + k3);
  b.col(0).setOnes();
  b.col(1) = s;
  if (d) b.middleCols(2, d) = z;
  b.col(2 + d) = s.array().square().matrix();
  b.col(3 + d) = s.array().cube().matrix();
  for (Eigen::Index j = 0; j < k3; ++j) b.col(4 + d + j) = s.cwiseProduct(z.col(j));
  n_penalized = 2 + k3;
  return b;
}

inline Vector ridge_fit_residuals(const Vector& target, const Matrix& basis, Eigen::Index n_penalized, const Vector& w) {
  const Eigen::Index n = basis.rows(), k = basis.cols();
  if (n <= k) throw Error(Errc::SingularDesign, "need more units than basis functions");
  const Vector ws = w * (static_cast<double>(n) / w.sum());
  Matrix gram = basis.transpose() * ws.asDiagonal() * basis;
  for (Eigen::Index j = k - n_penalized; j < k; ++j) gram(j, j) += 1e-4 * static_cast<double>(n);
  Eigen::LDLT<Matrix> ldlt(gram);
  if (ldlt.info() != Eigen::Success || ldlt.vectorD().minCoeff() <= 1e-12 * std::max(1.0, ldlt.vectorD().maxCoeff()))
    throw Error(Errc::SingularDesign, "ANM design is singular");
  const Vector beta = ldlt.solve(basis.transpose() * ws.cwiseProduct(target));
  return target - basis * beta;
}

}  // namespace detail

struct AnmResiduals {
  Vector eps_y;  // Y on (X, z)
  Vector eps_x;  // X on (Y, z)
};

inline AnmResiduals fit_anm_pair(const Vector& x, const Vector& y, const Matrix& z_hat, const Vector& w = Vector()) {
  const Eigen::Index n = x.size();
  if (y.size() != n || (z_hat.size() && z_hat.rows() != n)) throw Error(Errc::DimensionMismatch, "inputs not aligned");
  const Matrix z = z_hat.size() ? z_hat : Matrix(n, 0);
  const Vector ww = w.size() ? w : Vector::Ones(n);
  if (ww.size() != n || (ww.array() <= 0).any()) throw Error(Errc::Precondition, "weights must be positive");
  Eigen::Index pen = 0;
  AnmResiduals r;
  const Matrix bx = detail::anm_basis(x, z, pen);
  r.eps_y = detail::ridge_fit_residuals(y, bx, pen, ww);
  const Matrix by = detail::anm_basis(y, z, pen);
  r.eps_x = detail::ridge_fit_residuals(x, by, pen, ww);
  return r;
}

enum class Decision { XtoY, YtoX, undecided };

inline const char* decision_name(Decision d) {
  switch (d) {
    case Decision::XtoY: return "XtoY";
    case Decision::YtoX: return "YtoX";
    case Decision::undecided: return "undecided";
  }
  return "?";
}

struct DirectionVerdict {
  double i_forward = 0;
  double i_reverse = 0;
  Decision decision = Decision::undecided;
  double margin = 0;
  std::optional<double> permutation_p;
};

struct DirectionOptions {
  double threshold = 0.0;
  double tie_eps = 1e-12;
  int permutations = 0;  // 0 disables the permutation p-value
  std::uint64_t seed = 0;
};

inline Decision decide_from_margin(double margin, const DirectionOptions& opt = {}) {
  if (std::abs(margin) < opt.tie_eps) return Decision::undecided;
  return margin > opt.threshold ? Decision::XtoY : Decision::YtoX;
}

inline DirectionVerdict decide_direction(const Vector& x, const Vector& y, const Matrix& z_hat, const Vector& w = Vector(),
                                         const DirectionOptions& opt = {}) {
  const AnmResiduals r = fit_anm_pair(x, y, z_hat, w);
  DirectionVerdict v;
  v.i_forward = weighted_hsic(x, r.eps_y, w);
  v.i_reverse = weighted_hsic(y, r.eps_x, w);
  v.margin = v.i_reverse - v.i_forward;
  v.decision = decide_from_margin(v.margin, opt);
  if (opt.permutations > 0) {
    Rng rng = make_stream(opt.seed, 31);
    const Eigen::Index n = x.size();
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    int extreme = 0;
    Vector ey(n), ex(n), wp(w.size());
    for (int b = 0; b < opt.permutations; ++b) {
      std::shuffle(perm.begin(), perm.end(), rng);
      for (Eigen::Index i = 0; i < n; ++i) {
        ey[i] = r.eps_y[perm[i]];
        ex[i] = r.eps_x[perm[i]];
      }
      const double m = weighted_hsic(y, ex, w) - weighted_hsic(x, ey, w);
      if (std::abs(m) >= std::abs(v.margin)) ++extreme;
    }
    v.permutation_p = (1.0 + extreme) / (1.0 + opt.permutations);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Directionality diagnostics

namespace detail {

inline double weighted_r2(const Vector& target, const Vector& resid, const Vector& w) {
  const double sw = w.sum();
  const double mean = w.dot(target) / sw;
  const double tot = w.dot((target.array() - mean).square().matrix());
  if (!(tot > 0)) return 0.0;
  return 1.0 - w.dot(resid.cwiseProduct(resid)) / tot;
}

inline double weighted_variance(const Vector& v, const Vector& w) {
  const double sw = w.sum();
  const double mean = w.dot(v) / sw;
  return w.dot((v.array() - mean).square().matrix()) / sw;
}

}  // namespace detail

/// (R^2 forward - R^2 reverse + 1) / 2, clamped to [0,1].
inline double cp_metric(const Vector& x, const Vector& y, const Matrix& z_hat, const Vector& w = Vector()) {
  const Vector ww = w.size() ? w : Vector::Ones(x.size());
  const AnmResiduals r = fit_anm_pair(x, y, z_hat, ww);
  const double fwd = detail::weighted_r2(y, r.eps_y, ww);
  const double rev = detail::weighted_r2(x, r.eps_x, ww);
  return std::clamp((fwd - rev + 1.0) / 2.0, 0.0, 1.0);
}

/// V_rev / (V_fwd + V_rev) of weighted residual variances.
inline double csr_metric(const Vector& eps_y, const Vector& eps_x, const Vector& w = Vector(), bool* degenerate = nullptr) {
  if (eps_y.size() != eps_x.size()) throw Error(Errc::DimensionMismatch, "residual lengths differ");
  const Vector ww = w.size() ? w : Vector::Ones(eps_y.size());
  const double vf = detail::weighted_variance(eps_y, ww), vr = detail::weighted_variance(eps_x, ww);
  if (degenerate) *degenerate = !(vf + vr > 0);
  if (!(vf + vr > 0)) return 0.5;
  return vr / (vf + vr);
}

/// Index in [0, L!) of the ordinal pattern of `v[t..t+L)` (Lehmer code;
/// ties broken by position).
inline int ordinal_pattern(const Vector& v, Eigen::Index t, int len) {
  int code = 0;
  for (int i = 0; i < len; ++i) {
    int smaller = 0;
    for (int j = i + 1; j < len; ++j)
      if (v[t + j] < v[t + i]) ++smaller;
    int fact = 1;
    for (int k = 2; k <= len - 1 - i; ++k) fact *= k;
    code += smaller * fact;
  }
  return code;
}

struct SymbolicHistograms {
  Vector forward;  // (pattern x at t, pattern y at t+1), row-major L! x L!
  Vector reverse;  // (pattern y at t, pattern x at t+1)
};

inline SymbolicHistograms symbolic_histograms(const Vector& x, const Vector& y, const Vector& w, int len) {
  const Eigen::Index n = x.size();
  if (y.size() != n) throw Error(Errc::DimensionMismatch, "x and y lengths differ");
  if (len < 2 || len > 6) throw Error(Errc::Precondition, "pattern length must lie in [2, 6]");
  int fact = 1;
  for (int k = 2; k <= len; ++k) fact *= k;
  if (n < 10L * fact * fact) throw Error(Errc::InsufficientLength, "series too short for the pattern length");
  const Vector ww = w.size() ? w : Vector::Ones(n);
  SymbolicHistograms h{Vector::Zero(fact * fact), Vector::Zero(fact * fact)};
  for (Eigen::Index t = 0; t + len < n; ++t) {
    const double wt = ww[t];
    h.forward[ordinal_pattern(x, t, len) * fact + ordinal_pattern(y, t + 1, len)] += wt;
    h.reverse[ordinal_pattern(y, t, len) * fact + ordinal_pattern(x, t + 1, len)] += wt;
  }
  h.forward /= h.forward.sum();
  h.reverse /= h.reverse.sum();
  return h;
}

inline double entropy(const Vector& p) {
  double h = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p[i] > 0) h -= p[i] * std::log(p[i]);
  return h;
}

/// Jensen-Shannon divergence in nats.
inline double jensen_shannon(const Vector& p, const Vector& q) {
  const Vector m = 0.5 * (p + q);
  return std::max(0.0, entropy(m) - 0.5 * entropy(p) - 0.5 * entropy(q));
}

inline double hrjsd_metric(const Vector& x, const Vector& y, const Vector& w = Vector(), int pattern_len = 3) {
  const SymbolicHistograms h = symbolic_histograms(x, y, w, pattern_len);
  return std::clamp(jensen_shannon(h.forward, h.reverse) / std::log(2.0), 0.0, 1.0);
}

}  // namespace mnarci
