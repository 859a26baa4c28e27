// mnarci command-line front end.
//
// exit codes: 0 success, 1 runtime failure, 2 configuration error,
// 3 more than 20% of replications failed in some cell.

#include "mnarci/config.hpp"
#include "mnarci/mnarci.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace mnarci;

namespace {

constexpr int kConfigError = 2;
constexpr int kPartialFailure = 3;

void print_summary(const ExperimentResult& res) {
  std::cout << detail::render_table(res.cells, res.dmre_combined);
}

int cmd_simulate(const std::string& spec_path, std::optional<std::uint64_t> seed, const std::string& out,
                 std::optional<int> reps, std::optional<int> threads) {
  ExperimentSpec spec = config::experiment_from_json(config::load_file(spec_path));
  if (seed) spec.base_seed = *seed;
  if (!out.empty()) spec.output_dir = out;
  if (reps) spec.reps = *reps;
  if (threads) spec.threads = *threads;
  spec.validate();
  const ExperimentResult res = run_experiment(spec);
  print_summary(res);
  if (res.threshold_exceeded) {
    std::cerr << "some cells exceeded the 20% replication-failure threshold\n";
    return kPartialFailure;
  }
  return 0;
}

int cmd_generate(const std::string& cfg_path, std::optional<std::uint64_t> seed, const std::string& out) {
  SimConfig cfg = cfg_path.empty() ? SimConfig{} : config::sim_from_json(config::load_file(cfg_path));
  if (seed) cfg.seed = *seed;
  const std::string csv = dataset_to_csv(generate(cfg));
  if (out.empty()) std::cout << csv;
  else io::write_atomic(out, csv);
  return 0;
}

int cmd_estimate(const std::string& data, const std::string& method, const std::string& cfg_path,
                 std::optional<std::uint64_t> seed) {
  ProposedConfig pc;
  BaselineConfig bc;
  if (!cfg_path.empty()) {
    const config::Json j = config::load_file(cfg_path);
    if (!j.is_object()) throw Error(Errc::InvalidConfig, "estimate config must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
      if (it.key() != "proposed" && it.key() != "baseline")
        throw Error(Errc::InvalidConfig, "unknown key '" + it.key() + "' in estimate config");
    if (j.contains("proposed")) pc = config::proposed_from_json(j.at("proposed"));
    if (j.contains("baseline")) bc = config::baseline_from_json(j.at("baseline"));
  }
  if (seed) pc.seed = bc.seed = *seed;
  const Method m = parse_method(method);
  const Dataset ds = dataset_from_csv(io::read_csv(data));
  const TauEstimate t = estimate(m, ds, pc, bc);
  std::cout << "method,tau_hat,se,ci_low,ci_high\n"
            << io::join({t.method, io::fmt(t.tau_hat), io::fmt(t.se), io::fmt(t.ci_low), io::fmt(t.ci_high)}) << "\n";
  return 0;
}

int cmd_direction(const std::string& pairs, int permutations, std::optional<std::uint64_t> seed) {
  const io::Table t = io::read_csv(pairs);
  const std::size_t cx = t.column("x"), cy = t.column("y");
  const bool has_w = t.has_column("w");
  const auto n = static_cast<Eigen::Index>(t.rows.size());
  Vector x(n), y(n), w = has_w ? Vector(n) : Vector();
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& row = t.rows[static_cast<std::size_t>(i)];
    x[i] = io::parse_double(row[cx]);
    y[i] = io::parse_double(row[cy]);
    if (has_w) w[i] = io::parse_double(row[t.column("w")]);
  }
  if (!x.allFinite() || !y.allFinite() || (has_w && !w.allFinite()))
    throw Error(Errc::MalformedCsv, "pairs file has missing or non-finite values");
  DirectionOptions opt;
  opt.permutations = permutations;
  if (seed) opt.seed = *seed;
  const DirectionVerdict v = decide_direction(x, y, Matrix(n, 0), w, opt);
  std::cout << "i_forward,i_reverse,decision,margin,p\n"
            << io::join({io::fmt(v.i_forward), io::fmt(v.i_reverse), decision_name(v.decision), io::fmt(v.margin),
                         v.permutation_p ? io::fmt(*v.permutation_p) : "NA"})
            << "\n";
  return 0;
}

int cmd_tune(const std::string& spec_path, std::optional<std::uint64_t> seed, const std::string& out) {
  TuneSpec spec = config::tune_from_json(config::load_file(spec_path));
  if (seed) spec.seed = *seed;
  const TuneResult r = tune_pipeline(spec);
  const std::string trace = tune_trace_csv(r.bo);
  if (out.empty()) std::cout << trace;
  else io::write_atomic(out, trace);
  std::cerr << "best: kappa=" << r.best.kappa << " huber_mult=" << r.best.huber_mult << " w_max=" << r.best.w_max
            << " latent_dim=" << r.best.latent_dim << " cv_error=" << r.bo.best_value << "\n";
  return 0;
}

int cmd_report(const std::string& in, const std::string& out) {
  for (const auto& p : render_report(std::filesystem::path(in), std::filesystem::path(out))) std::cout << p.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MNAR-robust causal effect estimation and simulation toolkit"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "seed controlling all randomness")->type_name("UINT");

  std::string spec_path, out, data, method = "proposed", cfg_path, pairs, in;
  std::optional<int> reps, threads;
  int permutations = 0;

  auto* sim = app.add_subcommand("simulate", "run a replication grid");
  sim->add_option("--spec", spec_path, "experiment JSON")->required();
  sim->add_option("--out", out, "output directory (overrides output_dir)");
  sim->add_option("--reps", reps, "replications per cell (overrides reps)");
  sim->add_option("--threads", threads, "worker threads");

  auto* gen = app.add_subcommand("generate", "write one synthetic dataset as CSV");
  gen->add_option("--config", cfg_path, "simulation JSON");
  gen->add_option("--out", out, "output CSV (stdout if omitted)");

  auto* est = app.add_subcommand("estimate", "estimate the treatment effect on a dataset CSV");
  est->add_option("--data", data, "dataset CSV")->required();
  est->add_option("--method", method, "naive_ipw, robust_aipw, qem_ipw, cvae_only or proposed");
  est->add_option("--config", cfg_path, "JSON with optional 'proposed' and 'baseline' objects");

  auto* dir = app.add_subcommand("direction", "causal direction verdict for an (x, y[, w]) CSV");
  dir->add_option("--pairs", pairs, "CSV with columns x, y and optional w")->required();
  dir->add_option("--permutations", permutations, "permutations for the margin p-value");

  auto* tune = app.add_subcommand("tune", "Bayesian optimization of pipeline hyperparameters");
  tune->add_option("--spec", spec_path, "tuning JSON")->required();
  tune->add_option("--out", out, "trace CSV (stdout if omitted)");

  auto* rep = app.add_subcommand("report", "render SVG plots and a text table from an aggregate CSV");
  rep->add_option("--in", in, "aggregate CSV")->required();
  rep->add_option("--out", out, "output directory")->required();

  // Seed is accepted after the subcommand as well.
  for (auto* sc : {sim, gen, est, dir, tune, rep}) sc->add_option("--seed", seed, "seed controlling all randomness");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  try {
    if (*sim) return cmd_simulate(spec_path, seed, out, reps, threads);
    if (*gen) return cmd_generate(cfg_path, seed, out);
    if (*est) return cmd_estimate(data, method, cfg_path, seed);
    if (*dir) return cmd_direction(pairs, permutations, seed);
    if (*tune) return cmd_tune(spec_path, seed, out);
    if (*rep) return cmd_report(in, out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == Errc::InvalidConfig ? kConfigError : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
