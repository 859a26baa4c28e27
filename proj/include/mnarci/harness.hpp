#pragma once

// Replication grids over (n, c, method), the per-cell metric suite, CSV and
// SVG reporting, and cross-validated tuning of the pipeline.

#include "mnarci/bayesopt.hpp"
#include "mnarci/dgp.hpp"
#include "mnarci/direction.hpp"
#include "mnarci/estimators.hpp"
#include "mnarci/io.hpp"

#include <atomic>
#include <filesystem>
#include <map>
#include <set>
#include <thread>

namespace mnarci {

struct ExperimentSpec {
  std::vector<int> n_grid{50, 100, 150, 200};
  std::vector<double> c_grid{0.0, 0.1, 0.2};
  std::vector<Method> methods = all_methods();
  int reps = 500;
  std::uint64_t base_seed = 1;
  SimConfig sim{};
  ProposedConfig proposed{};
  BaselineConfig baseline{};
  std::string output_dir;       // empty: nothing written
  bool paired_metrics = true;   // MCAR-twin and latent-perturbation reruns
  int hrjsd_pattern_len = 2;
  int threads = 0;              // 0: hardware concurrency

  void validate() const {
    if (reps < 2) throw Error(Errc::InvalidConfig, "reps must be at least 2");
    if (n_grid.empty() || c_grid.empty()) throw Error(Errc::InvalidConfig, "grids must be nonempty");
    if (methods.empty()) throw Error(Errc::InvalidConfig, "method subset is empty");
    for (int n : n_grid)
      if (n < 3) throw Error(Errc::InvalidConfig, "grid sizes must be at least 3");
    for (double c : c_grid)
      if (!(c >= 0 && c < 1)) throw Error(Errc::InvalidConfig, "contamination levels must lie in [0,1)");
    if (hrjsd_pattern_len < 2) throw Error(Errc::InvalidConfig, "pattern length must be at least 2");
    sim.validate();
    proposed.validate();
  }
};

/// Data seed for replication `rep` at size `n`. Contamination level is left
/// out so cells at the same (n, rep) share their clean draw.
inline std::uint64_t replication_seed(std::uint64_t base, int n, int rep) {
  return splitmix64(base ^ splitmix64((static_cast<std::uint64_t>(n) << 32) ^ static_cast<std::uint64_t>(rep)));
}

struct RawRecord {
  std::string method;
  int n = 0;
  double c = 0;
  int rep = 0;
  double truth = std::numeric_limits<double>::quiet_NaN();
  double tau_hat = std::numeric_limits<double>::quiet_NaN();
  double se = std::numeric_limits<double>::quiet_NaN();
  double ci_low = std::numeric_limits<double>::quiet_NaN();
  double ci_high = std::numeric_limits<double>::quiet_NaN();
  bool covered = false;
  std::string decision = "NA";
  double i_forward = std::numeric_limits<double>::quiet_NaN();
  double i_reverse = std::numeric_limits<double>::quiet_NaN();
  std::string fail_tag;  // empty on success
  // paired and diagnostic values
  double tau_twin = std::numeric_limits<double>::quiet_NaN();
  double tau_perturbed = std::numeric_limits<double>::quiet_NaN();
  double cp = std::numeric_limits<double>::quiet_NaN();
  double csr = std::numeric_limits<double>::quiet_NaN();
  double hrjsd = std::numeric_limits<double>::quiet_NaN();

  bool ok() const { return fail_tag.empty(); }
};

struct CellSummary {
  std::string method;
  int n = 0;
  double c = 0;
  int rep_count = 0;
  int fail_count = 0;
  bool failed = false;  // more than 20% of replications failed
  double mse = 0, bias = 0, variance = 0, coverage = 0, mean_ci_width = 0;
  double qed = std::numeric_limits<double>::quiet_NaN();
  double qcps = std::numeric_limits<double>::quiet_NaN();
  double mri = std::numeric_limits<double>::quiet_NaN();
  double qkcss = std::numeric_limits<double>::quiet_NaN();
  double dmre = std::numeric_limits<double>::quiet_NaN();
  double cp = std::numeric_limits<double>::quiet_NaN();
  double csr = std::numeric_limits<double>::quiet_NaN();
  double hrjsd = std::numeric_limits<double>::quiet_NaN();
  double direction_accuracy = std::numeric_limits<double>::quiet_NaN();
};

struct ExperimentResult {
  std::vector<RawRecord> raw;
  std::vector<CellSummary> cells;
  std::map<std::string, double> dmre_combined;  // RMS of per-cell dmre by method
  bool threshold_exceeded = false;
};

// ---------------------------------------------------------------------------
// Direction diagnostics on the observed (latent-summary, outcome) pair

struct DirectionPair {
  Vector x, y, w;
  Matrix z;
};

/// x = first latent coordinate, y = observed outcome, conditioning on the
/// next (up to two) latent coordinates, weighted by the estimator's
/// selection weights. Observed units only, in generation order.
inline DirectionPair direction_pair(const Dataset& ds, const TauEstimate& t) {
  if (t.z_hat.rows() != static_cast<Eigen::Index>(ds.n()) || t.z_hat.cols() < 1)
    throw Error(Errc::Precondition, "estimate carries no latent matrix");
  std::vector<Eigen::Index> idx;
  for (std::size_t i = 0; i < ds.n(); ++i)
    if (ds.units[i].r) idx.push_back(static_cast<Eigen::Index>(i));
  const auto m = static_cast<Eigen::Index>(idx.size());
  const Eigen::Index extra = std::min<Eigen::Index>(2, t.z_hat.cols() - 1);
  DirectionPair p;
  p.x.resize(m);
  p.y.resize(m);
  p.w.resize(m);
  p.z.resize(m, extra);
  for (Eigen::Index k = 0; k < m; ++k) {
    const Eigen::Index i = idx[static_cast<std::size_t>(k)];
    p.x[k] = t.z_hat(i, 0);
    p.y[k] = *ds.units[static_cast<std::size_t>(i)].y;
    p.z.row(k) = t.z_hat.row(i).segment(1, extra);
    const double w = t.unit_weights.size() == t.z_hat.rows() ? t.unit_weights[i] : 1.0;
    p.w[k] = w > 0 ? w : 1e-12;
  }
  return p;
}

namespace detail {

inline void fill_direction(RawRecord& rec, const Dataset& ds, const TauEstimate& t, int pattern_len) {
  DirectionPair p;
  try {
    p = direction_pair(ds, t);
    const DirectionVerdict v = decide_direction(p.x, p.y, p.z, p.w);
    rec.decision = decision_name(v.decision);
    rec.i_forward = v.i_forward;
    rec.i_reverse = v.i_reverse;
    const AnmResiduals r = fit_anm_pair(p.x, p.y, p.z, p.w);
    rec.csr = csr_metric(r.eps_y, r.eps_x, p.w);
    rec.cp = cp_metric(p.x, p.y, p.z, p.w);
  } catch (const Error&) {
    return;
  }
  try {
    rec.hrjsd = hrjsd_metric(p.x, p.y, p.w, pattern_len);
  } catch (const Error&) {
  }
}

inline void with_latent(ProposedConfig& pc, BaselineConfig& bc, const Matrix& z) {
  pc.z_override = z;
  bc.z_override = z;
}

}  // namespace detail

/// One replication of every requested method at (n, c).
inline std::vector<RawRecord> run_replication(const ExperimentSpec& spec, const SimConfig* twin, int n, double c, int rep) {
  SimConfig cfg = spec.sim;
  cfg.n = n;
  cfg.contamination = c;
  cfg.seed = replication_seed(spec.base_seed, n, rep);
  std::vector<RawRecord> out;
  Dataset ds, twin_ds;
  double truth = std::numeric_limits<double>::quiet_NaN();
  std::string data_fail;
  try {
    ds = generate(cfg);
    truth = oracle_ate(ds);
    if (twin) {
      SimConfig tc = *twin;
      tc.n = n;
      tc.contamination = c;
      tc.seed = cfg.seed;
      twin_ds = generate(tc);
    }
  } catch (const Error& e) {
    data_fail = errc_name(e.code());
  }
  for (Method m : spec.methods) {
    RawRecord rec;
    rec.method = method_name(m);
    rec.n = n;
    rec.c = c;
    rec.rep = rep;
    rec.truth = truth;
    if (!data_fail.empty()) {
      rec.fail_tag = data_fail;
      out.push_back(rec);
      continue;
    }
    ProposedConfig pc = spec.proposed;
    BaselineConfig bc = spec.baseline;
    pc.seed = bc.seed = cfg.seed;
    TauEstimate t;
    try {
      t = estimate(m, ds, pc, bc);
      if (!std::isfinite(t.tau_hat) || !std::isfinite(t.se)) throw Error(Errc::NonFinite, "estimate is not finite");
    } catch (const Error& e) {
      rec.fail_tag = errc_name(e.code());
      out.push_back(rec);
      continue;
    }
    rec.tau_hat = t.tau_hat;
    rec.se = t.se;
    rec.ci_low = t.ci_low;
    rec.ci_high = t.ci_high;
    rec.covered = t.ci_low <= truth && truth <= t.ci_high;
    detail::fill_direction(rec, ds, t, spec.hrjsd_pattern_len);
    if (twin) {
      try {
        rec.tau_twin = estimate(m, twin_ds, pc, bc).tau_hat;
      } catch (const Error&) {
      }
      if (t.z_hat.rows() == static_cast<Eigen::Index>(ds.n())) {
        Rng rng = make_stream(cfg.seed, 300 + static_cast<std::uint64_t>(m));
        Matrix z = t.z_hat;
        for (Eigen::Index j = 0; j < z.cols(); ++j) {
          const double sd = sample_sd(z.col(j));
          z.col(j) += normal_vector(z.rows(), 0.1 * sd, rng);
        }
        ProposedConfig pp = pc;
        BaselineConfig bp = bc;
        detail::with_latent(pp, bp, z);
        try {
          rec.tau_perturbed = estimate(m, ds, pp, bp).tau_hat;
        } catch (const Error&) {
        }
      }
    }
    out.push_back(rec);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metric suite

struct MetricOptions {
  double tau_true = 1.0;       // QCPS scale
  bool require_pairing = false;
  int reps_per_cell = 0;       // planned replications; 0 uses observed counts
};

inline double decision_qkcss(const std::vector<std::string>& decisions) {
  std::map<std::string, double> counts{{"XtoY", 0}, {"YtoX", 0}, {"undecided", 0}};
  double total = 0;
  for (const auto& d : decisions)
    if (counts.count(d)) counts[d] += 1, total += 1;
  if (total == 0) return std::numeric_limits<double>::quiet_NaN();
  Vector p(3), q(3);
  p << counts["XtoY"] / total, counts["YtoX"] / total, counts["undecided"] / total;
  q << 1, 0, 0;
  return 1.0 - jensen_shannon(p, q) / std::log(2.0);
}

inline std::vector<CellSummary> metric_suite(const std::vector<RawRecord>& raw, const MetricOptions& opt = {}) {
  using Key = std::tuple<std::string, int, double>;
  std::map<Key, std::vector<const RawRecord*>> groups;
  std::vector<Key> order;
  for (const auto& r : raw) {
    Key k{r.method, r.n, r.c};
    if (!groups.count(k)) order.push_back(k);
    groups[k].push_back(&r);
  }
  std::map<std::tuple<std::string, int, int>, double> clean_tau;  // (method, n, rep) at c = 0
  for (const auto& r : raw)
    if (r.ok() && r.c == 0.0) clean_tau[{r.method, r.n, r.rep}] = r.tau_hat;

  std::vector<CellSummary> cells;
  for (const Key& k : order) {
    const auto& recs = groups[k];
    CellSummary s;
    std::tie(s.method, s.n, s.c) = k;
    std::vector<double> err, width, pert, cps, csrs, hrs, twin_a, twin_b, mri;
    std::vector<std::string> decisions;
    int covered = 0;
    for (const RawRecord* r : recs) {
      if (!r->ok()) {
        ++s.fail_count;
        continue;
      }
      err.push_back(r->tau_hat - r->truth);
      width.push_back(r->ci_high - r->ci_low);
      covered += r->covered;
      if (r->decision != "NA") decisions.push_back(r->decision);
      if (std::isfinite(r->cp)) cps.push_back(r->cp);
      if (std::isfinite(r->csr)) csrs.push_back(r->csr);
      if (std::isfinite(r->hrjsd)) hrs.push_back(r->hrjsd);
      if (std::isfinite(r->tau_perturbed)) pert.push_back(std::abs(r->tau_perturbed - r->tau_hat));
      if (std::isfinite(r->tau_twin)) {
        twin_a.push_back(r->tau_hat);
        twin_b.push_back(r->tau_twin);
      } else if (opt.require_pairing) {
        throw Error(Errc::MissingPairing, "no MCAR-twin estimate for " + r->method + " rep " + std::to_string(r->rep));
      }
      const auto it = clean_tau.find({r->method, r->n, r->rep});
      if (it != clean_tau.end()) mri.push_back(std::abs(r->tau_hat - it->second));
    }
    s.rep_count = static_cast<int>(err.size());
    const int planned = opt.reps_per_cell > 0 ? opt.reps_per_cell : static_cast<int>(recs.size());
    s.failed = s.fail_count > 0.2 * planned;
    auto mean = [](const std::vector<double>& v) {
      if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
      double t = 0;
      for (double x : v) t += x;
      return t / static_cast<double>(v.size());
    };
    if (!err.empty()) {
      s.bias = mean(err);
      double sq = 0, var = 0;
      for (double e : err) sq += e * e, var += (e - s.bias) * (e - s.bias);
      s.mse = sq / static_cast<double>(err.size());
      s.variance = var / static_cast<double>(err.size());
      s.coverage = static_cast<double>(covered) / static_cast<double>(err.size());
      s.mean_ci_width = mean(width);
    } else {
      s.mse = s.bias = s.variance = s.coverage = s.mean_ci_width = std::numeric_limits<double>::quiet_NaN();
    }
    s.cp = mean(cps);
    s.csr = mean(csrs);
    s.hrjsd = mean(hrs);
    if (!decisions.empty()) {
      s.direction_accuracy = static_cast<double>(std::count(decisions.begin(), decisions.end(), "XtoY")) /
                             static_cast<double>(decisions.size());
      s.qkcss = decision_qkcss(decisions);
    }
    if (!pert.empty()) s.qcps = 1.0 - std::clamp(mean(pert) / (std::abs(opt.tau_true) + 0.1), 0.0, 1.0);
    if (!twin_a.empty()) s.dmre = std::abs(mean(twin_a) - mean(twin_b));
    if (!mri.empty()) s.mri = mean(mri);
    cells.push_back(s);
  }

  // QED: slope of log RMSE on log n within each (method, c).
  std::map<std::pair<std::string, double>, std::vector<CellSummary*>> lines;
  for (auto& s : cells) lines[{s.method, s.c}].push_back(&s);
  for (auto& [key, group] : lines) {
    std::vector<double> lx, ly;
    for (const CellSummary* s : group)
      if (std::isfinite(s->mse) && s->mse > 0) lx.push_back(std::log(s->n)), ly.push_back(0.5 * std::log(s->mse));
    std::set<double> distinct(lx.begin(), lx.end());
    if (distinct.size() < 2) continue;
    const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / static_cast<double>(lx.size());
    const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / static_cast<double>(ly.size());
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < lx.size(); ++i) sxy += (lx[i] - mx) * (ly[i] - my), sxx += (lx[i] - mx) * (lx[i] - mx);
    const double rate = -sxy / sxx;
    for (CellSummary* s : group) s->qed = std::clamp(rate / 0.5, 0.0, 1.0);
  }
  return cells;
}

inline std::map<std::string, double> combined_dmre(const std::vector<CellSummary>& cells) {
  std::map<std::string, std::pair<double, int>> acc;
  for (const auto& s : cells)
    if (std::isfinite(s.dmre)) acc[s.method].first += s.dmre * s.dmre, ++acc[s.method].second;
  std::map<std::string, double> out;
  for (const auto& [m, v] : acc) out[m] = std::sqrt(v.first / v.second);
  return out;
}

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::string csv_num(double v) { return std::isfinite(v) ? io::fmt(v) : (std::isnan(v) ? "NA" : io::fmt(v)); }

}  // namespace detail

inline const std::vector<std::string>& raw_csv_header() {
  static const std::vector<std::string> h{"method", "n",        "c",        "rep",       "tau_hat",
                                          "se",     "ci_low",   "ci_high",  "covered",   "decision",
                                          "i_forward", "i_reverse", "fail_tag"};
  return h;
}

inline std::string raw_csv(const std::vector<RawRecord>& raw) {
  std::string out = io::join(raw_csv_header()) + "\n";
  for (const auto& r : raw) {
    out += io::join({r.method, std::to_string(r.n), io::fmt(r.c), std::to_string(r.rep), detail::csv_num(r.tau_hat),
                     detail::csv_num(r.se), detail::csv_num(r.ci_low), detail::csv_num(r.ci_high),
                     r.ok() ? std::to_string(r.covered ? 1 : 0) : "NA", r.decision, detail::csv_num(r.i_forward),
                     detail::csv_num(r.i_reverse), r.fail_tag});
    out += "\n";
  }
  return out;
}

inline std::string paired_csv(const std::vector<RawRecord>& raw) {
  std::string out = "method,n,c,rep,truth,tau_twin,tau_perturbed,cp,csr,hrjsd\n";
  for (const auto& r : raw) {
    out += io::join({r.method, std::to_string(r.n), io::fmt(r.c), std::to_string(r.rep), detail::csv_num(r.truth),
                     detail::csv_num(r.tau_twin), detail::csv_num(r.tau_perturbed), detail::csv_num(r.cp),
                     detail::csv_num(r.csr), detail::csv_num(r.hrjsd)});
    out += "\n";
  }
  return out;
}

inline const std::vector<std::string>& aggregate_header() {
  static const std::vector<std::string> h{"method", "n",     "c",     "rep_count", "fail_count", "failed", "mse",
                                          "bias",   "variance", "coverage", "mean_ci_width", "qed", "qcps", "mri",
                                          "qkcss",  "dmre",  "cp",    "csr",       "hrjsd",      "direction_accuracy"};
  return h;
}

inline std::string aggregate_csv(const std::vector<CellSummary>& cells) {
  std::string out = io::join(aggregate_header()) + "\n";
  for (const auto& s : cells) {
    std::vector<std::string> f{s.method, std::to_string(s.n), io::fmt(s.c), std::to_string(s.rep_count),
                               std::to_string(s.fail_count), s.failed ? "1" : "0"};
    for (double v : {s.mse, s.bias, s.variance, s.coverage, s.mean_ci_width, s.qed, s.qcps, s.mri, s.qkcss, s.dmre, s.cp,
                     s.csr, s.hrjsd, s.direction_accuracy})
      f.push_back(detail::csv_num(v));
    out += io::join(f) + "\n";
  }
  return out;
}

inline std::vector<CellSummary> parse_aggregate_csv(const io::Table& t) {
  for (const auto& h : aggregate_header())
    if (!t.has_column(h)) throw Error(Errc::MalformedCsv, "aggregate CSV lacks column '" + h + "'");
  auto col = [&](const std::string& h) { return t.column(h); };
  auto to_int = [](const std::string& s) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw Error(Errc::MalformedCsv, "not an integer: '" + s + "'");
    }
  };
  std::vector<CellSummary> cells;
  for (const auto& row : t.rows) {
    CellSummary s;
    s.method = row[col("method")];
    s.n = to_int(row[col("n")]);
    s.c = io::parse_double(row[col("c")]);
    s.rep_count = to_int(row[col("rep_count")]);
    s.fail_count = to_int(row[col("fail_count")]);
    s.failed = to_int(row[col("failed")]) != 0;
    double* dst[] = {&s.mse, &s.bias, &s.variance, &s.coverage, &s.mean_ci_width, &s.qed, &s.qcps,
                     &s.mri, &s.qkcss, &s.dmre, &s.cp, &s.csr, &s.hrjsd, &s.direction_accuracy};
    const char* names[] = {"mse", "bias", "variance", "coverage", "mean_ci_width", "qed", "qcps",
                           "mri", "qkcss", "dmre", "cp", "csr", "hrjsd", "direction_accuracy"};
    for (std::size_t j = 0; j < 14; ++j) *dst[j] = io::parse_double(row[col(names[j])]);
    if (s.method.empty() || !std::isfinite(s.c)) throw Error(Errc::MalformedCsv, "aggregate row lacks method or c");
    cells.push_back(s);
  }
  return cells;
}

// ---------------------------------------------------------------------------
// Experiment driver

inline ExperimentResult run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  std::optional<SimConfig> twin;
  if (spec.paired_metrics) {
    SimConfig base = spec.sim;
    base.seed = spec.base_seed;
    twin = mcar_twin(base);
  }
  struct Job {
    int n;
    double c;
    int rep;
  };
  std::vector<Job> jobs;
  for (int n : spec.n_grid)
    for (double c : spec.c_grid)
      for (int rep = 0; rep < spec.reps; ++rep) jobs.push_back({n, c, rep});
  std::vector<std::vector<RawRecord>> slots(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++)
      slots[j] = run_replication(spec, twin ? &*twin : nullptr, jobs[j].n, jobs[j].c, jobs[j].rep);
  };
  unsigned threads = spec.threads > 0 ? static_cast<unsigned>(spec.threads) : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<unsigned>(threads, static_cast<unsigned>(jobs.size()));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  ExperimentResult res;
  // Order: n, c, method, rep.
  for (int n : spec.n_grid)
    for (double c : spec.c_grid)
      for (Method m : spec.methods)
        for (std::size_t j = 0; j < jobs.size(); ++j)
          if (jobs[j].n == n && jobs[j].c == c)
            for (const auto& r : slots[j])
              if (r.method == method_name(m)) res.raw.push_back(r);
  MetricOptions mo;
  mo.tau_true = spec.sim.tau_true;
  mo.reps_per_cell = spec.reps;
  res.cells = metric_suite(res.raw, mo);
  res.dmre_combined = combined_dmre(res.cells);
  for (const auto& s : res.cells) res.threshold_exceeded = res.threshold_exceeded || s.failed;
  if (!spec.output_dir.empty()) {
    const std::filesystem::path dir(spec.output_dir);
    std::filesystem::create_directories(dir);
    io::write_atomic(dir / "raw.csv", raw_csv(res.raw));
    io::write_atomic(dir / "paired.csv", paired_csv(res.raw));
    io::write_atomic(dir / "aggregate.csv", aggregate_csv(res.cells));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Report rendering

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(ch);
    }
  }
  return out;
}

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string contamination_tag(double c) {
  char buf[16];
  const double tenths = c * 10;
  if (std::abs(tenths - std::round(tenths)) < 1e-9) std::snprintf(buf, sizeof buf, "c%02d", static_cast<int>(std::lround(tenths)));
  else std::snprintf(buf, sizeof buf, "c%03d", static_cast<int>(std::lround(c * 100)));
  return buf;
}

inline std::string render_svg(const std::vector<CellSummary>& cells, double c) {
  static const char* palette[] = {"#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d"};
  struct Panel {
    const char* title;
    double CellSummary::*field;
  };
  const Panel panels[] = {{"MSE", &CellSummary::mse},
                          {"Coverage", &CellSummary::coverage},
                          {"CP", &CellSummary::cp},
                          {"CSR", &CellSummary::csr},
                          {"HRJSD", &CellSummary::hrjsd}};
  std::vector<std::string> methods;
  std::set<int> ns;
  for (const auto& s : cells) {
    if (std::find(methods.begin(), methods.end(), s.method) == methods.end()) methods.push_back(s.method);
    ns.insert(s.n);
  }
  const double pw = 260, ph = 200, margin = 40, legend_h = 24 + 16.0 * static_cast<double>(methods.size());
  const double width = margin + 5 * (pw + margin), height = ph + 2 * margin + legend_h;
  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << svg_num(width) << "\" height=\"" << svg_num(height)
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
  o << "<text x=\"" << svg_num(margin) << "\" y=\"20\" font-size=\"14\">contamination " << io::fmt(c) << "</text>\n";
  const double nmin = *ns.begin(), nmax = *ns.rbegin();
  for (std::size_t p = 0; p < 5; ++p) {
    const double x0 = margin + static_cast<double>(p) * (pw + margin), y0 = margin;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& s : cells) {
      const double v = s.*(panels[p].field);
      if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
    }
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
    auto sx = [&](double n) { return nmax > nmin ? x0 + (n - nmin) / (nmax - nmin) * pw : x0 + pw / 2; };
    auto sy = [&](double v) { return y0 + ph - (v - lo) / (hi - lo) * ph; };
    o << "<g class=\"panel\">\n";
    o << "<rect x=\"" << svg_num(x0) << "\" y=\"" << svg_num(y0) << "\" width=\"" << svg_num(pw) << "\" height=\""
      << svg_num(ph) << "\" fill=\"none\" stroke=\"#888888\"/>\n";
    o << "<text x=\"" << svg_num(x0) << "\" y=\"" << svg_num(y0 - 6) << "\">" << panels[p].title << "</text>\n";
    o << "<text x=\"" << svg_num(x0 - 4) << "\" y=\"" << svg_num(y0 + 10) << "\" text-anchor=\"end\">" << io::fmt(hi)
      .substr(0, 6) << "</text>\n";
    o << "<text x=\"" << svg_num(x0 - 4) << "\" y=\"" << svg_num(y0 + ph) << "\" text-anchor=\"end\">" << io::fmt(lo)
      .substr(0, 6) << "</text>\n";
    for (int n : ns)
      o << "<text x=\"" << svg_num(sx(n)) << "\" y=\"" << svg_num(y0 + ph + 14) << "\" text-anchor=\"middle\">" << n
        << "</text>\n";
    for (std::size_t m = 0; m < methods.size(); ++m) {
      const char* colour = palette[m % 7];
      std::vector<std::pair<double, double>> pts;
      for (int n : ns)
        for (const auto& s : cells)
          if (s.method == methods[m] && s.n == n && std::isfinite(s.*(panels[p].field)))
            pts.emplace_back(sx(n), sy(s.*(panels[p].field)));
      o << "<g class=\"series\" data-method=\"" << xml_escape(methods[m]) << "\">";
      if (pts.size() > 1) {
        o << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t k = 0; k < pts.size(); ++k) o << (k ? " " : "") << svg_num(pts[k].first) << "," << svg_num(pts[k].second);
        o << "\"/>";
      }
      for (const auto& pt : pts)
        o << "<circle cx=\"" << svg_num(pt.first) << "\" cy=\"" << svg_num(pt.second) << "\" r=\"2.5\" fill=\"" << colour << "\"/>";
      o << "</g>\n";
    }
    o << "</g>\n";
  }
  double ly = margin + ph + 36;
  for (std::size_t m = 0; m < methods.size(); ++m, ly += 16) {
    o << "<rect x=\"" << svg_num(margin) << "\" y=\"" << svg_num(ly - 9) << "\" width=\"10\" height=\"10\" fill=\""
      << palette[m % 7] << "\"/>";
    o << "<text x=\"" << svg_num(margin + 16) << "\" y=\"" << svg_num(ly) << "\">" << xml_escape(methods[m]) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

inline std::string render_table(const std::vector<CellSummary>& cells, const std::map<std::string, double>& dmre) {
  const std::vector<std::string> head{"Method", "n",   "c",    "MSE",   "Bias", "Var", "Coverage", "QED",
                                      "QCPS",   "MRI", "QKCSS", "DMRE", "CP",   "CSR", "HRJSD",    "DirAcc"};
  std::vector<std::vector<std::string>> rows{head};
  auto f3 = [](double v) {
    if (!std::isfinite(v)) return std::string("-");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return std::string(buf);
  };
  for (const auto& s : cells) {
    char cbuf[16];
    std::snprintf(cbuf, sizeof cbuf, "%.2f", s.c);
    rows.push_back({s.method + (s.failed ? "*" : ""), std::to_string(s.n), cbuf, f3(s.mse), f3(s.bias), f3(s.variance),
                    f3(s.coverage), f3(s.qed), f3(s.qcps), f3(s.mri), f3(s.qkcss), f3(s.dmre), f3(s.cp), f3(s.csr),
                    f3(s.hrjsd), f3(s.direction_accuracy)});
  }
  std::vector<std::size_t> w(head.size(), 0);
  for (const auto& r : rows)
    for (std::size_t j = 0; j < r.size(); ++j) w[j] = std::max(w[j], r[j].size());
  std::string out;
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < r.size(); ++j) {
      const std::string pad(w[j] - r[j].size(), ' ');
      out += j == 0 ? r[j] + pad : "  " + pad + r[j];
    }
    out += "\n";
  }
  if (!dmre.empty()) {
    out += "\nDMRE combined over cells\n";
    for (const auto& [m, v] : dmre) out += "  " + m + "  " + f3(v) + "\n";
  }
  bool any_failed = false;
  for (const auto& s : cells) any_failed = any_failed || s.failed;
  if (any_failed) out += "\n* more than 20% of replications failed in this cell\n";
  return out;
}

}  // namespace detail

/// Writes perf_cXX.svg per contamination level and report.txt into `out_dir`.
/// Everything is rendered before the first file is written.
inline std::vector<std::filesystem::path> render_report(const std::vector<CellSummary>& cells,
                                                        const std::filesystem::path& out_dir) {
  if (cells.empty()) throw Error(Errc::Precondition, "aggregate has no cells (empty method subset)");
  std::vector<double> cs;
  for (const auto& s : cells)
    if (std::find(cs.begin(), cs.end(), s.c) == cs.end()) cs.push_back(s.c);
  std::sort(cs.begin(), cs.end());
  std::vector<std::pair<std::filesystem::path, std::string>> files;
  for (double c : cs) {
    std::vector<CellSummary> sub;
    for (const auto& s : cells)
      if (s.c == c) sub.push_back(s);
    files.emplace_back(out_dir / ("perf_" + detail::contamination_tag(c) + ".svg"), detail::render_svg(sub, c));
  }
  files.emplace_back(out_dir / "report.txt", detail::render_table(cells, combined_dmre(cells)));
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  for (const auto& [path, text] : files) {
    io::write_atomic(path, text);
    written.push_back(path);
  }
  return written;
}

inline std::vector<std::filesystem::path> render_report(const std::filesystem::path& aggregate_path,
                                                        const std::filesystem::path& out_dir) {
  return render_report(parse_aggregate_csv(io::read_csv(aggregate_path)), out_dir);
}

// ---------------------------------------------------------------------------
// Tuning

struct TuneSpec {
  SimConfig sim{};                 // used when `data` is empty
  std::string data;                // optional dataset CSV
  ProposedConfig proposed{};
  int budget = 25;
  int folds = 5;
  std::uint64_t seed = 1;
  // theta = (kappa, huber_mult, w_max, latent_dim); w_min = 1 / w_max
  Box box{{0.25, 0.25, 2.0, 2.0}, {4.0, 2.0, 20.0, 6.0}};

  void validate() const {
    if (folds < 2) throw Error(Errc::InvalidConfig, "need at least 2 folds");
    if (budget < 5) throw Error(Errc::InvalidConfig, "budget must be at least 5");
    if (box.dim() != 4) throw Error(Errc::InvalidConfig, "tuning box has 4 dimensions");
    box.validate();
    if (box.lo[1] <= 0 || box.lo[2] < 1 || box.lo[3] < 1) throw Error(Errc::InvalidConfig, "tuning box out of range");
  }
};

inline Dataset subset_dataset(const Dataset& ds, const std::vector<std::size_t>& idx) {
  Dataset out = ds;
  out.units.clear();
  out.oracle.clear();
  for (std::size_t i : idx) {
    out.units.push_back(ds.units.at(i));
    if (ds.synthetic()) out.oracle.push_back(ds.oracle.at(i));
  }
  return out;
}

inline ProposedConfig apply_theta(ProposedConfig pc, const Vector& theta) {
  pc.kappa = theta[0];
  pc.huber_mult = theta[1];
  pc.w_max = theta[2];
  pc.w_min = 1.0 / theta[2];
  pc.latent_dim = static_cast<int>(std::lround(theta[3]));
  return pc;
}

/// Mean over folds of |tau_hat(training part) - target(held-out fold)|. The
/// target is the oracle effect on synthetic data, otherwise the robust AIPW
/// estimate on the held-out fold.
inline double cv_objective(const Dataset& ds, const ProposedConfig& pc, int folds, std::uint64_t seed) {
  std::vector<std::size_t> perm(ds.n());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = make_stream(seed, 51);
  std::shuffle(perm.begin(), perm.end(), rng);
  double total = 0;
  for (int k = 0; k < folds; ++k) {
    std::vector<std::size_t> train, hold;
    for (std::size_t i = 0; i < perm.size(); ++i) (static_cast<int>(i % folds) == k ? hold : train).push_back(perm[i]);
    std::sort(train.begin(), train.end());
    std::sort(hold.begin(), hold.end());
    const Dataset tr = subset_dataset(ds, train), ho = subset_dataset(ds, hold);
    const double target = ds.synthetic() ? oracle_ate(ho) : estimate_robust_aipw(ho).tau_hat;
    total += std::abs(estimate_proposed(tr, pc).tau_hat - target);
  }
  return total / folds;
}

struct TuneResult {
  BoResult bo;
  ProposedConfig best;
};

inline TuneResult tune_pipeline(const TuneSpec& spec) {
  spec.validate();
  Dataset ds;
  if (spec.data.empty()) {
    SimConfig cfg = spec.sim;
    cfg.seed = spec.seed;
    ds = generate(cfg);
  } else {
    ds = dataset_from_csv(io::read_csv(spec.data));
  }
  auto objective = [&](const Vector& theta) { return cv_objective(ds, apply_theta(spec.proposed, theta), spec.folds, spec.seed); };
  TuneResult out;
  out.bo = bo_minimize(objective, spec.box, spec.budget, spec.seed);
  out.best = apply_theta(spec.proposed, out.bo.best_point);
  return out;
}

inline std::string tune_trace_csv(const BoResult& r) {
  std::string out = "iteration,kappa,huber_mult,w_max,latent_dim,value,best_so_far,failed\n";
  for (const auto& row : r.trace) {
    std::vector<std::string> f{std::to_string(row.iteration)};
    for (Eigen::Index j = 0; j < row.point.size(); ++j) f.push_back(io::fmt(row.point[j]));
    f.push_back(io::fmt(row.value));
    f.push_back(io::fmt(row.best_so_far));
    f.push_back(row.failed ? "1" : "0");
    out += io::join(f) + "\n";
  }
  return out;
}

}  // namespace mnarci
