#pragma once

// Synthetic HDLSS generator: spiked-covariance covariates driven by a latent
// Gaussian vector, latent-driven treatment, potential outcomes with a
// nonlinear term, MNAR selection on the outcome, and Cauchy contamination of
// observed outcomes.

#include "mnarci/core.hpp"
#include "mnarci/io.hpp"

#include <array>
#include <sstream>

namespace mnarci {

struct SimConfig {
  int n = 200;
  int p = 1000;
  int d = 8;
  std::array<double, 3> spike_values{20.0, 10.0, 5.0};
  double tau_true = 1.0;
  double contamination = 0.0;  // fraction of observed outcomes replaced by Cauchy draws
  double mnar_gamma_y = 1.0;   // outcome coefficient in the selection logit
  double selection_intercept = 0.5;
  double positivity_eps = 0.05;
  std::uint64_t seed = 1;

  double covariate_noise = 0.5;
  bool heterogeneous = false;  // effect tau * (1 + 0.5 Z1)
  double lag_coupling = 0.0;   // Y_t gains lag_coupling * Z1_{t-1} (sequential variant)

  // Outcome measurement channel that produces the observable surrogate `o`.
  int channel_k = 3;
  double channel_gamma = 0.1;
  double channel_noise = 0.3;
  double winsor_q = 0.99;

  void validate() const {
    if (n < 3) throw Error(Errc::InvalidConfig, "n must be at least 3");
    if (p < 3) throw Error(Errc::InvalidConfig, "p must be at least 3");
    if (d < 3) throw Error(Errc::InvalidConfig, "d must be at least 3");
    for (double s : spike_values)
      if (!(s > 0)) throw Error(Errc::InvalidConfig, "spike values must be strictly positive");
    if (!(contamination >= 0 && contamination < 1)) throw Error(Errc::InvalidConfig, "contamination must lie in [0,1)");
    if (!(positivity_eps > 0 && positivity_eps < 0.5)) throw Error(Errc::InvalidConfig, "positivity_eps must lie in (0,0.5)");
    if (!(covariate_noise >= 0)) throw Error(Errc::InvalidConfig, "covariate_noise must be nonnegative");
    if (channel_k < 1) throw Error(Errc::InvalidConfig, "channel_k must be positive");
    if (!(channel_gamma >= 0 && channel_gamma < 1)) throw Error(Errc::InvalidConfig, "channel_gamma must lie in [0,1)");
    if (!(channel_noise > 0)) throw Error(Errc::InvalidConfig, "channel_noise must be positive");
    if (!(winsor_q > 0.5 && winsor_q <= 1)) throw Error(Errc::InvalidConfig, "winsor_q must lie in (0.5,1]");
  }

  ChannelSpec channel() const {
    ChannelSpec spec;
    spec.gamma = channel_gamma;
    spec.noise_scale = channel_noise;
    spec.h = Matrix::Ones(channel_k, 1);
    spec.b.resize(channel_k);
    for (int k = 0; k < channel_k; ++k) spec.b[k] = 0.5 * std::cos(1.0 + 2.0 * k);
    return spec;
  }
};

namespace detail {

/// Fixed orthonormal p x 3 frame; depends on p only, never on the seed.
inline Matrix spike_frame(int p) {
  Rng rng(0x5EED5EEDULL + static_cast<std::uint64_t>(p));
  const Matrix g = normal_matrix(p, 3, 1.0, rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  return qr.householderQ() * Matrix::Identity(p, 3);
}

/// Probabilists' Gauss-Hermite rule: E f(N(0,1)) ~= sum w_k f(x_k).
struct GaussHermite {
  Vector nodes, weights;
};

inline const GaussHermite& gauss_hermite32() {
  static const GaussHermite rule = [] {
    constexpr int m = 32;
    Matrix jac = Matrix::Zero(m, m);
    for (int k = 1; k < m; ++k) jac(k, k - 1) = jac(k - 1, k) = std::sqrt(static_cast<double>(k));
    Eigen::SelfAdjointEigenSolver<Matrix> es(jac);
    GaussHermite gh{es.eigenvalues(), es.eigenvectors().row(0).transpose().array().square().matrix()};
    gh.weights /= gh.weights.sum();
    return gh;
  }();
  return rule;
}

inline double beta_coef(int j) {
  static constexpr double beta[4] = {1.0, 0.5, -0.5, 0.25};
  return j < 4 ? beta[j] : 0.0;
}

}  // namespace detail

/// P(R=1 | latent) after integrating out treatment and outcome noise.
inline double selection_marginal(const SimConfig& cfg, double base, double e, double z1) {
  const auto& gh = detail::gauss_hermite32();
  double total = 0;
  for (int a = 0; a < 2; ++a) {
    const double pa = a ? e : 1 - e;
    const double effect = cfg.heterogeneous ? cfg.tau_true * (1 + 0.5 * z1) : cfg.tau_true;
    double inner = 0;
    for (Eigen::Index k = 0; k < gh.nodes.size(); ++k) {
      const double y = base + a * effect + gh.nodes[k];
      inner += gh.weights[k] * sigmoid(cfg.selection_intercept + cfg.mnar_gamma_y * y + 0.5 * z1);
    }
    total += pa * inner;
  }
  return total;
}

inline Dataset generate(const SimConfig& cfg) {
  cfg.validate();
  const int n = cfg.n, p = cfg.p, d = cfg.d;
  const Matrix frame = detail::spike_frame(p);
  const Eigen::Vector3d root_spikes(std::sqrt(cfg.spike_values[0]), std::sqrt(cfg.spike_values[1]),
                                    std::sqrt(cfg.spike_values[2]));

  Rng latent_rng = make_stream(cfg.seed, 0);
  Rng covariate_rng = make_stream(cfg.seed, 1);
  Rng treatment_rng = make_stream(cfg.seed, 2);
  Rng outcome_rng = make_stream(cfg.seed, 3);
  Rng selection_rng = make_stream(cfg.seed, 4);
  Rng contamination_rng = make_stream(cfg.seed, 5);
  Rng channel_rng = make_stream(cfg.seed, 6);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> nd(0.0, 1.0);

  Dataset ds;
  ds.p = p;
  ds.d = d;
  ds.k = cfg.channel_k;
  ds.tau_true = cfg.tau_true;
  ds.seed = cfg.seed;
  ds.units.resize(n);
  ds.oracle.resize(n);

  double prev_z1 = 0.0;
  for (int i = 0; i < n; ++i) {
    Observation& u = ds.units[i];
    OracleUnit& orc = ds.oracle[i];
    const Vector z = normal_vector(d, 1.0, latent_rng);
    u.x = frame * (root_spikes.cwiseProduct(z.head<3>())) + normal_vector(p, cfg.covariate_noise, covariate_rng);
    u.z_true = z;

    orc.e = std::clamp(sigmoid(0.8 * z[0] - 0.5 * z[1]), cfg.positivity_eps, 1 - cfg.positivity_eps);
    u.a = unif(treatment_rng) < orc.e ? 1 : 0;

    double base = std::sin(z[0]) + cfg.lag_coupling * prev_z1;
    for (int j = 0; j < d; ++j) base += detail::beta_coef(j) * z[j];
    const double effect = cfg.heterogeneous ? cfg.tau_true * (1 + 0.5 * z[0]) : cfg.tau_true;
    const double eps = nd(outcome_rng);
    orc.m0 = base;
    orc.m1 = base + effect;
    orc.y0 = base + eps;
    orc.y1 = base + effect + eps;
    const double y = u.a ? orc.y1 : orc.y0;

    orc.p_sel = sigmoid(cfg.selection_intercept + cfg.mnar_gamma_y * y + 0.5 * z[0]);
    orc.num = selection_marginal(cfg, base, orc.e, z[0]);
    u.r = unif(selection_rng) < orc.p_sel ? 1 : 0;
    if (u.r) u.y = y;
    prev_z1 = z[0];
  }

  std::vector<int> observed;
  for (int i = 0; i < n; ++i)
    if (ds.units[i].r) observed.push_back(i);

  // Exact fraction of observed outcomes replaced by standard Cauchy draws.
  const auto n_contam = static_cast<std::size_t>(std::llround(cfg.contamination * static_cast<double>(observed.size())));
  if (n_contam > 0) {
    std::vector<int> pool = observed;
    std::cauchy_distribution<double> cauchy(0.0, 1.0);
    for (std::size_t k = 0; k < n_contam; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
      std::swap(pool[k], pool[pick(contamination_rng)]);
      const int i = pool[k];
      ds.units[i].y = cauchy(contamination_rng);
      ds.oracle[i].contaminated = true;
    }
  }

  // Observable surrogate: each observed outcome read out K times through the
  // channel, debiased with the calibrated bias and winsorized batch-wise.
  const ChannelSpec spec = cfg.channel();
  ds.channel = spec;
  if (observed.size() >= 3) {
    Matrix state(static_cast<Eigen::Index>(observed.size()), 1);
    for (std::size_t k = 0; k < observed.size(); ++k) {
      Vector s(1);
      s[0] = *ds.units[observed[k]].y;
      state.row(static_cast<Eigen::Index>(k)) = apply_channel(s, spec, channel_rng).transpose();
    }
    const Matrix o = measure_and_stabilize(state, spec, spec.b, cfg.winsor_q, channel_rng);
    for (std::size_t k = 0; k < observed.size(); ++k)
      ds.units[observed[k]].o = o.row(static_cast<Eigen::Index>(k)).transpose();
  }
  return ds;
}

/// Mean of Y(1) - Y(0) over units, before contamination.
inline double oracle_ate(const Dataset& ds) {
  if (!ds.synthetic()) throw Error(Errc::NotSynthetic, "dataset carries no potential outcomes");
  double total = 0;
  for (const auto& o : ds.oracle) total += o.y1 - o.y0;
  return total / static_cast<double>(ds.oracle.size());
}

namespace detail {

/// Marginal P(R=1) from `draws` simulated units (Rao-Blackwellized over R).
inline double marginal_selection_rate(const SimConfig& cfg, int draws, std::uint64_t seed) {
  Rng rng = make_stream(seed, 101);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double total = 0;
  for (int i = 0; i < draws; ++i) {
    Vector z(cfg.d);
    for (int j = 0; j < cfg.d; ++j) z[j] = nd(rng);
    const double e = std::clamp(sigmoid(0.8 * z[0] - 0.5 * z[1]), cfg.positivity_eps, 1 - cfg.positivity_eps);
    const int a = unif(rng) < e ? 1 : 0;
    double base = std::sin(z[0]);
    for (int j = 0; j < cfg.d; ++j) base += beta_coef(j) * z[j];
    const double effect = cfg.heterogeneous ? cfg.tau_true * (1 + 0.5 * z[0]) : cfg.tau_true;
    const double y = base + a * effect + nd(rng);
    total += sigmoid(cfg.selection_intercept + cfg.mnar_gamma_y * y + 0.5 * z[0]);
  }
  return total / draws;
}

/// E[sigmoid(b + 0.5 Z1)] on a fixed draw set; exact in b for bisection.
inline double mcar_rate(const std::vector<double>& z1, double intercept) {
  double total = 0;
  for (double z : z1) total += sigmoid(intercept + 0.5 * z);
  return total / static_cast<double>(z1.size());
}

}  // namespace detail

/// Config with no outcome dependence in selection and an intercept re-solved
/// so that the marginal selection rate matches `cfg`.
inline SimConfig mcar_twin(const SimConfig& cfg, int draws = 100000) {
  cfg.validate();
  const double target = detail::marginal_selection_rate(cfg, draws, cfg.seed);
  std::vector<double> z1(static_cast<std::size_t>(draws));
  {
    Rng rng = make_stream(cfg.seed, 102);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (double& z : z1) z = nd(rng);
  }
  double lo = -20.0, hi = 20.0;
  if (detail::mcar_rate(z1, lo) > target || detail::mcar_rate(z1, hi) < target)
    throw Error(Errc::RootFindFailure, "no intercept in [-20,20] matches the selection rate");
  while (hi - lo > 1e-6) {
    const double mid = 0.5 * (lo + hi);
    (detail::mcar_rate(z1, mid) < target ? lo : hi) = mid;
  }
  SimConfig twin = cfg;
  twin.mnar_gamma_y = 0.0;
  twin.selection_intercept = 0.5 * (lo + hi);
  return twin;
}

// ---------------------------------------------------------------------------
// CSV exchange: y, a, r, x_1..x_p, z_1..z_d, y0, y1

inline std::string dataset_to_csv(const Dataset& ds) {
  std::ostringstream out;
  std::vector<std::string> header{"y", "a", "r"};
  for (int j = 1; j <= ds.p; ++j) header.push_back("x_" + std::to_string(j));
  const bool has_z = !ds.units.empty() && ds.units.front().z_true.has_value();
  if (has_z)
    for (int j = 1; j <= ds.d; ++j) header.push_back("z_" + std::to_string(j));
  const bool has_oracle = ds.synthetic();
  if (has_oracle) {
    header.push_back("y0");
    header.push_back("y1");
  }
  out << io::join(header) << '\n';
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto& u = ds.units[i];
    std::vector<std::string> row{u.y ? io::fmt(*u.y) : "NA", std::to_string(u.a), std::to_string(u.r)};
    for (int j = 0; j < ds.p; ++j) row.push_back(io::fmt(u.x[j]));
    if (has_z)
      for (int j = 0; j < ds.d; ++j) row.push_back(io::fmt((*u.z_true)[j]));
    if (has_oracle) {
      row.push_back(io::fmt(ds.oracle[i].y0));
      row.push_back(io::fmt(ds.oracle[i].y1));
    }
    out << io::join(row) << '\n';
  }
  return out.str();
}

/// Reads the exchange format. The result is an analysis view: no oracle.
inline Dataset dataset_from_csv(const io::Table& t) {
  Dataset ds;
  const std::size_t cy = t.column("y"), ca = t.column("a"), cr = t.column("r");
  std::vector<std::size_t> cx, cz;
  for (int j = 1; t.has_column("x_" + std::to_string(j)); ++j) cx.push_back(t.column("x_" + std::to_string(j)));
  for (int j = 1; t.has_column("z_" + std::to_string(j)); ++j) cz.push_back(t.column("z_" + std::to_string(j)));
  if (cx.empty()) throw Error(Errc::MalformedCsv, "no covariate columns x_1..x_p");
  ds.p = static_cast<int>(cx.size());
  ds.d = static_cast<int>(cz.size());
  for (const auto& row : t.rows) {
    Observation u;
    u.a = static_cast<int>(io::parse_double(row[ca]));
    u.r = static_cast<int>(io::parse_double(row[cr]));
    if ((u.a != 0 && u.a != 1) || (u.r != 0 && u.r != 1)) throw Error(Errc::MalformedCsv, "a and r must be 0/1");
    const double y = io::parse_double(row[cy]);
    if (u.r == 1) {
      if (std::isnan(y)) throw Error(Errc::MalformedCsv, "selected unit without outcome");
      u.y = y;
    }
    u.x.resize(ds.p);
    for (int j = 0; j < ds.p; ++j) u.x[j] = io::parse_double(row[cx[j]]);
    if (!cz.empty()) {
      Vector z(ds.d);
      for (int j = 0; j < ds.d; ++j) z[j] = io::parse_double(row[cz[j]]);
      u.z_true = z;
    }
    ds.units.push_back(std::move(u));
  }
  return ds;
}

}  // namespace mnarci
