#pragma once

// Gaussian-process Bayesian optimization with expected improvement on a
// box, working internally on the unit hypercube.

#include "mnarci/core.hpp"

#include <functional>

namespace mnarci {

struct Box {
  std::vector<double> lo, hi;

  std::size_t dim() const { return lo.size(); }
  void validate() const {
    if (lo.empty() || lo.size() != hi.size()) throw Error(Errc::InvalidConfig, "box bounds malformed");
    for (std::size_t j = 0; j < lo.size(); ++j)
      if (!(lo[j] < hi[j])) throw Error(Errc::InvalidConfig, "box needs lo < hi in every dimension");
  }
  Vector to_box(const Vector& u) const {
    Vector x(u.size());
    for (Eigen::Index j = 0; j < u.size(); ++j) x[j] = lo[j] + u[j] * (hi[j] - lo[j]);
    return x;
  }
};

struct BoState {
  std::vector<Vector> points;  // unit-cube coordinates
  std::vector<double> values;
  std::vector<int> counts;     // evaluations merged into each point
  double kernel_lengthscale = 0.3;
  double kernel_variance = 1.0;
  double noise_jitter = 1e-6;
  int budget = 0;
  Box box;

  /// Adds an evaluation, averaging into an existing point when it coincides.
  void add(const Vector& u, double value) {
    for (std::size_t k = 0; k < points.size(); ++k) {
      if ((points[k] - u).norm() < 1e-12) {
        values[k] = (values[k] * counts[k] + value) / (counts[k] + 1);
        ++counts[k];
        return;
      }
    }
    points.push_back(u);
    values.push_back(value);
    counts.push_back(1);
  }
};

namespace detail {

inline double se_kernel(const Vector& a, const Vector& b, double ell, double var) {
  return var * std::exp(-(a - b).squaredNorm() / (2.0 * ell * ell));
}

/// Surrogate targets: failures (+inf) replaced by the worst finite value.
inline Vector surrogate_values(const BoState& s) {
  double worst = -std::numeric_limits<double>::infinity();
  for (double v : s.values)
    if (std::isfinite(v)) worst = std::max(worst, v);
  if (!std::isfinite(worst)) worst = 0.0;
  Vector y(static_cast<Eigen::Index>(s.values.size()));
  for (std::size_t k = 0; k < s.values.size(); ++k) y[static_cast<Eigen::Index>(k)] = std::isfinite(s.values[k]) ? s.values[k] : worst;
  return y;
}

struct GpFactor {
  Eigen::LLT<Matrix> llt;
  Vector alpha;
  double prior_mean = 0;
  double jitter = 0;
};

inline GpFactor gp_factor(const BoState& s, double ell, double var) {
  const auto n = static_cast<Eigen::Index>(s.points.size());
  if (n == 0) throw Error(Errc::Precondition, "GP needs at least one evaluated point");
  if (!(ell > 0) || !(var > 0) || !(s.noise_jitter > 0))
    throw Error(Errc::Precondition, "kernel lengthscale, variance and jitter must be positive");
  const Vector y = surrogate_values(s);
  GpFactor f;
  f.prior_mean = y.mean();
  Matrix k(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j <= i; ++j) k(i, j) = k(j, i) = se_kernel(s.points[i], s.points[j], ell, var);
  for (double jit = s.noise_jitter; jit <= 1e-2 * (1 + 1e-9); jit *= 10) {
    Matrix kj = k;
    kj.diagonal().array() += jit * var;
    f.llt.compute(kj);
    if (f.llt.info() == Eigen::Success && f.llt.matrixLLT().allFinite()) {
      f.jitter = jit;
      f.alpha = f.llt.solve(Vector(y.array() - f.prior_mean));
      return f;
    }
  }
  throw Error(Errc::CholeskyFailure, "kernel matrix not positive definite after jitter escalation");
}

inline double log_marginal(const BoState& s, double ell, double var) {
  const GpFactor f = gp_factor(s, ell, var);
  const Vector yc = surrogate_values(s).array() - f.prior_mean;
  const Matrix& l = f.llt.matrixLLT();
  double logdet = 0;
  for (Eigen::Index i = 0; i < l.rows(); ++i) logdet += std::log(l(i, i));
  return -0.5 * yc.dot(f.alpha) - logdet - 0.5 * static_cast<double>(yc.size()) * std::log(2 * M_PI);
}

}  // namespace detail

/// Grid maximum-likelihood refit of lengthscale and variance (20 x 20 log grid).
inline void refit_hyperparameters(BoState& s) {
  const Vector y = detail::surrogate_values(s);
  const double spread = y.size() > 1 ? (y.array() - y.mean()).square().mean() : 0.0;
  const double base = spread > 0 ? spread : 1.0;
  double best = -std::numeric_limits<double>::infinity();
  double best_ell = s.kernel_lengthscale, best_var = s.kernel_variance;
  for (int i = 0; i < 20; ++i) {
    const double ell = std::pow(10.0, -2.0 + 3.0 * i / 19.0);  // 0.01 .. 10
    for (int j = 0; j < 20; ++j) {
      const double var = base * std::pow(10.0, -2.0 + 4.0 * j / 19.0);
      double lm;
      try {
        lm = detail::log_marginal(s, ell, var);
      } catch (const Error&) {
        continue;
      }
      if (lm > best) best = lm, best_ell = ell, best_var = var;
    }
  }
  s.kernel_lengthscale = best_ell;
  s.kernel_variance = best_var;
}

struct GpPrediction {
  double mean;
  double variance;
};

inline GpPrediction gp_posterior(const BoState& s, const Vector& query) {
  const detail::GpFactor f = detail::gp_factor(s, s.kernel_lengthscale, s.kernel_variance);
  const auto n = static_cast<Eigen::Index>(s.points.size());
  Vector k(n);
  for (Eigen::Index i = 0; i < n; ++i) k[i] = detail::se_kernel(s.points[i], query, s.kernel_lengthscale, s.kernel_variance);
  const double mean = f.prior_mean + k.dot(f.alpha);
  const Vector v = f.llt.matrixL().solve(k);
  return {mean, std::max(0.0, s.kernel_variance - v.squaredNorm())};
}

/// Minimization EI; zero when the posterior standard deviation is zero.
inline double expected_improvement(double mean, double sd, double best) {
  if (!(sd > 0)) return 0.0;
  const double u = (best - mean) / sd;
  return std::max(0.0, (best - mean) * normal_cdf(u) + sd * normal_pdf(u));
}

inline double expected_improvement(const BoState& s, const Vector& query, double best) {
  const GpPrediction p = gp_posterior(s, query);
  return expected_improvement(p.mean, std::sqrt(p.variance), best);
}

struct BoTraceRow {
  int iteration;
  Vector point;  // box coordinates
  double value;
  double best_so_far;
  bool failed;
};

struct BoResult {
  Vector best_point;
  double best_value = std::numeric_limits<double>::infinity();
  std::vector<BoTraceRow> trace;
  BoState state;
};

/// Halton sequence in `dim` dimensions, first `count` points from index 1.
inline std::vector<Vector> halton_points(int count, int dim, const Vector& shift) {
  static const int primes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37};
  if (dim > 12) throw Error(Errc::Precondition, "Halton design supports at most 12 dimensions");
  std::vector<Vector> pts;
  for (int i = 1; i <= count; ++i) {
    Vector u(dim);
    for (int j = 0; j < dim; ++j) {
      double f = 1, r = 0;
      for (int k = i; k > 0; k /= primes[j]) {
        f /= primes[j];
        r += f * (k % primes[j]);
      }
      u[j] = std::fmod(r + shift[j], 1.0);
    }
    pts.push_back(u);
  }
  return pts;
}

namespace detail {

inline double ei_at(const BoState& s, const GpFactor& f, const Vector& u, double best) {
  const auto n = static_cast<Eigen::Index>(s.points.size());
  Vector k(n);
  for (Eigen::Index i = 0; i < n; ++i) k[i] = se_kernel(s.points[i], u, s.kernel_lengthscale, s.kernel_variance);
  const double mean = f.prior_mean + k.dot(f.alpha);
  const Vector v = f.llt.matrixL().solve(k);
  const double var = std::max(0.0, s.kernel_variance - v.squaredNorm());
  return expected_improvement(mean, std::sqrt(var), best);
}

}  // namespace detail

inline BoResult bo_minimize(const std::function<double(const Vector&)>& objective, const Box& box, int budget,
                            std::uint64_t seed) {
  box.validate();
  if (budget < 5) throw Error(Errc::Precondition, "budget must be at least 5");
  const int dim = static_cast<int>(box.dim());
  BoResult res;
  res.state.box = box;
  res.state.budget = budget;
  Rng rng = make_stream(seed, 41);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Vector shift(dim);
  for (int j = 0; j < dim; ++j) shift[j] = unif(rng);

  auto evaluate = [&](const Vector& u) {
    const Vector x = box.to_box(u);
    double v;
    bool failed = false;
    try {
      v = objective(x);
      if (std::isnan(v)) v = std::numeric_limits<double>::infinity(), failed = true;
    } catch (const std::exception&) {
      v = std::numeric_limits<double>::infinity();
      failed = true;
    }
    res.state.add(u, v);
    if (v < res.best_value) {
      res.best_value = v;
      res.best_point = x;
    }
    res.trace.push_back({static_cast<int>(res.trace.size()), x, v, res.best_value, failed});
  };

  for (const Vector& u : halton_points(5, dim, shift)) evaluate(u);
  if (res.best_point.size() == 0) res.best_point = box.to_box(res.state.points.front());

  while (static_cast<int>(res.trace.size()) < budget) {
    if (res.trace.size() % 5 == 0) refit_hyperparameters(res.state);
    const detail::GpFactor f = detail::gp_factor(res.state, res.state.kernel_lengthscale, res.state.kernel_variance);
    double best_y = std::numeric_limits<double>::infinity();
    for (double v : res.state.values) best_y = std::min(best_y, v);
    if (!std::isfinite(best_y)) best_y = detail::surrogate_values(res.state).minCoeff();

    Rng srng = make_stream(seed, 1000 + res.trace.size());
    Vector best_u;
    double best_ei = -1;
    for (int start = 0; start < 50; ++start) {
      Vector u(dim);
      for (int j = 0; j < dim; ++j) u[j] = unif(srng);
      double cur = detail::ei_at(res.state, f, u, best_y);
      for (double step = 0.1; step > 1e-4;) {
        bool improved = false;
        for (int j = 0; j < dim; ++j)
          for (double sgn : {-1.0, 1.0}) {
            Vector c = u;
            c[j] = std::clamp(c[j] + sgn * step, 0.0, 1.0);
            const double e = detail::ei_at(res.state, f, c, best_y);
            if (e > cur) cur = e, u = c, improved = true;
          }
        if (!improved) step *= 0.5;
      }
      if (cur > best_ei) best_ei = cur, best_u = u;
    }
    evaluate(best_u);
  }
  return res;
}

}  // namespace mnarci
