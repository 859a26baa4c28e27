#pragma once

// JSON configuration for the CLI. Unknown keys are rejected so typos surface
// as configuration errors instead of silently falling back to defaults.

#include "mnarci/harness.hpp"

#include <json.hpp>

#include <fstream>
#include <set>

namespace mnarci::config {

using Json = nlohmann::json;

namespace detail {

inline void check_keys(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw Error(Errc::InvalidConfig, where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw Error(Errc::InvalidConfig, "unknown key '" + it.key() + "' in " + where);
}

template <class T>
void read(const Json& j, const char* key, T& dst, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidConfig, where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline Json load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::InvalidConfig, "cannot open config file " + path);
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidConfig, "malformed JSON in " + path + ": " + e.what());
  }
}

inline SimConfig sim_from_json(const Json& j, SimConfig c = {}) {
  const std::string w = "sim";
  detail::check_keys(j,
                     {"n", "p", "d", "spike_values", "tau_true", "contamination", "mnar_gamma_y", "selection_intercept",
                      "positivity_eps", "seed", "covariate_noise", "heterogeneous", "lag_coupling", "channel_k",
                      "channel_gamma", "channel_noise", "winsor_q"},
                     w);
  detail::read(j, "n", c.n, w);
  detail::read(j, "p", c.p, w);
  detail::read(j, "d", c.d, w);
  if (j.contains("spike_values")) {
    std::vector<double> s;
    detail::read(j, "spike_values", s, w);
    if (s.size() != 3) throw Error(Errc::InvalidConfig, "spike_values needs exactly 3 entries");
    std::copy(s.begin(), s.end(), c.spike_values.begin());
  }
  detail::read(j, "tau_true", c.tau_true, w);
  detail::read(j, "contamination", c.contamination, w);
  detail::read(j, "mnar_gamma_y", c.mnar_gamma_y, w);
  detail::read(j, "selection_intercept", c.selection_intercept, w);
  detail::read(j, "positivity_eps", c.positivity_eps, w);
  detail::read(j, "seed", c.seed, w);
  detail::read(j, "covariate_noise", c.covariate_noise, w);
  detail::read(j, "heterogeneous", c.heterogeneous, w);
  detail::read(j, "lag_coupling", c.lag_coupling, w);
  detail::read(j, "channel_k", c.channel_k, w);
  detail::read(j, "channel_gamma", c.channel_gamma, w);
  detail::read(j, "channel_noise", c.channel_noise, w);
  detail::read(j, "winsor_q", c.winsor_q, w);
  c.validate();
  return c;
}

inline CvaeOptions cvae_from_json(const Json& j, CvaeOptions c = {}) {
  const std::string w = "cvae";
  detail::check_keys(j, {"hidden", "epochs", "step_size", "clip_norm", "patience", "input_rank"}, w);
  detail::read(j, "hidden", c.hidden, w);
  detail::read(j, "epochs", c.epochs, w);
  detail::read(j, "step_size", c.step_size, w);
  detail::read(j, "clip_norm", c.clip_norm, w);
  detail::read(j, "patience", c.patience, w);
  detail::read(j, "input_rank", c.input_rank, w);
  return c;
}

inline ProposedConfig proposed_from_json(const Json& j, ProposedConfig c = {}) {
  const std::string w = "proposed";
  detail::check_keys(j,
                     {"latent", "latent_dim", "cvae", "selection", "oracle_nuisance", "kappa", "huber_mult", "w_min",
                      "w_max", "e_clip", "pooled_outcome", "selection_ridge", "normalization"},
                     w);
  if (j.contains("latent")) {
    const std::string s = j.at("latent").get<std::string>();
    if (s == "linear") c.latent = LatentMethod::linear;
    else if (s == "cvae") c.latent = LatentMethod::cvae;
    else throw Error(Errc::InvalidConfig, "latent must be 'linear' or 'cvae'");
  }
  detail::read(j, "latent_dim", c.latent_dim, w);
  if (j.contains("cvae")) c.cvae = cvae_from_json(j.at("cvae"), c.cvae);
  if (j.contains("selection")) {
    const std::string s = j.at("selection").get<std::string>();
    if (s == "oracle") c.selection = SelectionMode::oracle;
    else if (s == "mar") c.selection = SelectionMode::mar;
    else if (s == "mnar_parametric") c.selection = SelectionMode::mnar_parametric;
    else throw Error(Errc::InvalidConfig, "selection must be oracle, mar or mnar_parametric");
  }
  detail::read(j, "oracle_nuisance", c.oracle_nuisance, w);
  detail::read(j, "kappa", c.kappa, w);
  detail::read(j, "huber_mult", c.huber_mult, w);
  detail::read(j, "w_min", c.w_min, w);
  detail::read(j, "w_max", c.w_max, w);
  detail::read(j, "e_clip", c.e_clip, w);
  detail::read(j, "pooled_outcome", c.pooled_outcome, w);
  detail::read(j, "selection_ridge", c.selection_ridge, w);
  if (j.contains("normalization")) {
    const std::string s = j.at("normalization").get<std::string>();
    if (s == "hajek") c.normalization = Normalization::hajek;
    else if (s == "ht") c.normalization = Normalization::ht;
    else throw Error(Errc::InvalidConfig, "normalization must be 'hajek' or 'ht'");
  }
  c.validate();
  return c;
}

inline BaselineConfig baseline_from_json(const Json& j, BaselineConfig c = {}) {
  const std::string w = "baseline";
  detail::check_keys(j, {"latent_dim", "e_clip", "cvae", "bootstrap"}, w);
  detail::read(j, "latent_dim", c.latent_dim, w);
  detail::read(j, "e_clip", c.e_clip, w);
  if (j.contains("cvae")) c.cvae = cvae_from_json(j.at("cvae"), c.cvae);
  detail::read(j, "bootstrap", c.bootstrap, w);
  if (c.latent_dim < 1 || !(c.e_clip > 0 && c.e_clip < 0.5) || c.bootstrap < 2)
    throw Error(Errc::InvalidConfig, "baseline needs latent_dim >= 1, e_clip in (0,0.5), bootstrap >= 2");
  return c;
}

inline ExperimentSpec experiment_from_json(const Json& j) {
  const std::string w = "experiment";
  detail::check_keys(j,
                     {"n_grid", "c_grid", "methods", "reps", "base_seed", "sim", "proposed", "baseline", "output_dir",
                      "paired_metrics", "hrjsd_pattern_len", "threads"},
                     w);
  ExperimentSpec s;
  detail::read(j, "n_grid", s.n_grid, w);
  detail::read(j, "c_grid", s.c_grid, w);
  if (j.contains("methods")) {
    std::vector<std::string> names;
    detail::read(j, "methods", names, w);
    s.methods.clear();
    for (const auto& m : names) s.methods.push_back(parse_method(m));
  }
  detail::read(j, "reps", s.reps, w);
  detail::read(j, "base_seed", s.base_seed, w);
  if (j.contains("sim")) s.sim = sim_from_json(j.at("sim"));
  if (j.contains("proposed")) s.proposed = proposed_from_json(j.at("proposed"));
  if (j.contains("baseline")) s.baseline = baseline_from_json(j.at("baseline"));
  detail::read(j, "output_dir", s.output_dir, w);
  detail::read(j, "paired_metrics", s.paired_metrics, w);
  detail::read(j, "hrjsd_pattern_len", s.hrjsd_pattern_len, w);
  detail::read(j, "threads", s.threads, w);
  s.validate();
  return s;
}

inline TuneSpec tune_from_json(const Json& j) {
  const std::string w = "tune";
  detail::check_keys(j, {"sim", "data", "proposed", "budget", "folds", "seed", "lo", "hi"}, w);
  TuneSpec s;
  if (j.contains("sim")) s.sim = sim_from_json(j.at("sim"));
  detail::read(j, "data", s.data, w);
  if (j.contains("proposed")) s.proposed = proposed_from_json(j.at("proposed"));
  detail::read(j, "budget", s.budget, w);
  detail::read(j, "folds", s.folds, w);
  detail::read(j, "seed", s.seed, w);
  detail::read(j, "lo", s.box.lo, w);
  detail::read(j, "hi", s.box.hi, w);
  s.validate();
  return s;
}

}  // namespace mnarci::config
