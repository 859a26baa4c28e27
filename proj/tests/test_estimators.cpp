#include "mnarci/dgp.hpp"
#include "mnarci/estimators.hpp"

#include <gtest/gtest.h>

#include <numeric>

using namespace mnarci;

namespace {

SimConfig small(int n, std::uint64_t seed) {
  SimConfig c;
  c.n = n;
  c.p = 3;
  c.seed = seed;
  return c;
}

Dataset fully_observed(Dataset ds) {
  for (std::size_t i = 0; i < ds.n(); ++i) {
    auto& u = ds.units[i];
    u.r = 1;
    u.y = u.a ? ds.oracle[i].y1 : ds.oracle[i].y0;
  }
  return ds;
}

Dataset permuted(const Dataset& ds, std::uint64_t seed) {
  std::vector<std::size_t> idx(ds.n());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_stream(seed, 3);
  std::shuffle(idx.begin(), idx.end(), rng);
  Dataset out = ds;
  for (std::size_t i = 0; i < ds.n(); ++i) {
    out.units[i] = ds.units[idx[i]];
    out.oracle[i] = ds.oracle[idx[i]];
  }
  return out;
}

double diff_in_means(const Dataset& ds) {
  double s1 = 0, s0 = 0;
  int n1 = 0, n0 = 0;
  for (const auto& u : ds.units) {
    if (!u.r) continue;
    if (u.a) s1 += *u.y, ++n1;
    else s0 += *u.y, ++n0;
  }
  return s1 / n1 - s0 / n0;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Anderson-Darling statistic against a fully specified N(0,1).
double anderson_darling(std::vector<double> x) {
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double lo = std::log(normal_cdf(x[i]));
    const double hi = std::log1p(-normal_cdf(x[x.size() - 1 - i]));
    s += (2.0 * static_cast<double>(i) + 1.0) * (lo + hi);
  }
  return -n - s / n;
}

}  // namespace

TEST(TauEstimate, WaldInterval) {
  Vector psi(5);
  psi << 1, 2, 3, 4, 10;
  const TauEstimate t = make_estimate(psi, "x");
  EXPECT_DOUBLE_EQ(t.tau_hat, 4.0);
  const double sd = std::sqrt(((psi.array() - 4.0).square().sum()) / 4.0);
  EXPECT_NEAR(t.se, sd / std::sqrt(5.0), 1e-15);
  EXPECT_NEAR(t.ci_low, t.tau_hat - 1.959964 * t.se, 1e-15);
  EXPECT_NEAR(t.ci_high - t.tau_hat, t.tau_hat - t.ci_low, 1e-12);
  EXPECT_TRUE(covers(t, 4.0));
  EXPECT_THROW(make_estimate(Vector::Ones(1), "x"), Error);
}

TEST(ScorePsi, FullDataReducesToAipw) {
  const Dataset ds = fully_observed(generate(small(2000, 60)));
  NuisanceFit nf = oracle_nuisance(ds);
  nf.p_sel_hat.setOnes();
  nf.num_hat.setOnes();
  nf.w_tilde.setOnes();
  const Vector psi = score_psi(ds, nf, Normalization::hajek);
  double aipw = 0;
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto& o = ds.oracle[i];
    const auto& u = ds.units[i];
    aipw += o.m1 - o.m0 + (u.a ? (*u.y - o.m1) / o.e : -(*u.y - o.m0) / (1 - o.e));
  }
  aipw /= static_cast<double>(ds.n());
  EXPECT_NEAR(psi.mean(), aipw, 1e-12);
  EXPECT_EQ(score_psi(ds, nf, Normalization::ht), psi);
}

TEST(ScorePsi, CaseATrueEZeroM) {
  const Dataset ds = generate(small(100000, 61));
  NuisanceFit nf = oracle_nuisance(ds);
  nf.m0_hat.setZero();
  nf.m1_hat.setZero();
  const TauEstimate t = make_estimate(score_psi(ds, nf, Normalization::hajek), "a");
  EXPECT_LT(std::abs(t.tau_hat - 1.0), 3 * t.se);
}

TEST(ScorePsi, CaseBConstantETrueM) {
  const Dataset ds = generate(small(100000, 62));
  NuisanceFit nf = oracle_nuisance(ds);
  nf.e_hat.setConstant(0.5);
  const TauEstimate t = make_estimate(score_psi(ds, nf, Normalization::hajek), "b");
  EXPECT_LT(std::abs(t.tau_hat - 1.0), 3 * t.se);
}

TEST(ScorePsi, MissingYContributesNothing) {
  const Dataset ds = generate(small(300, 63));
  const NuisanceFit nf = oracle_nuisance(ds);
  const Vector psi = score_psi(ds, nf, Normalization::hajek);
  for (std::size_t i = 0; i < ds.n(); ++i)
    if (!ds.units[i].r) {
      EXPECT_EQ(psi[static_cast<Eigen::Index>(i)], nf.m1_hat[i] - nf.m0_hat[i]);
    }
  NuisanceFit broken = nf;
  broken.e_hat.resize(3);
  try {
    score_psi(ds, broken, Normalization::hajek);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::MissingNuisance);
  }
}

TEST(ScorePsi, HajekWeightsHaveMeanOne) {
  const Dataset ds = generate(small(500, 64));
  const Vector w = selection_score_weights(ds, oracle_nuisance(ds), Normalization::hajek);
  EXPECT_NEAR(w.mean(), 1.0, 1e-12);
  for (std::size_t i = 0; i < ds.n(); ++i)
    if (!ds.units[i].r) {
      EXPECT_EQ(w[static_cast<Eigen::Index>(i)], 0.0);
    }
}

// sqrt(n) (tau_hat - tau) / sd(psi) should look standard normal.
TEST(ScorePsi, OracleStandardizedEstimateIsNormal) {
  std::vector<double> zs;
  for (std::uint64_t rep = 0; rep < 1000; ++rep) {
    const Dataset ds = generate(small(5000, 10000 + rep));
    const TauEstimate t = make_estimate(score_psi(ds, oracle_nuisance(ds), Normalization::hajek), "o");
    zs.push_back((t.tau_hat - 1.0) / t.se);
  }
  EXPECT_LT(anderson_darling(zs), 3.857);
}

// Moderate selection keeps the unclipped oracle weights light-tailed.
TEST(ScorePsi, RootNScaling) {
  auto rmse = [](int n) {
    double ss = 0;
    for (std::uint64_t rep = 0; rep < 400; ++rep) {
      SimConfig c = small(n, 20000 + rep * 7 + n);
      c.mnar_gamma_y = 0.5;
      const Dataset ds = generate(c);
      ss += std::pow(score_psi(ds, oracle_nuisance(ds), Normalization::hajek).mean() - 1.0, 2);
    }
    return std::sqrt(ss / 400);
  };
  const double ratio = rmse(800) / rmse(3200);
  EXPECT_GE(ratio, 1.6);
  EXPECT_LE(ratio, 2.5);
}

TEST(Proposed, OracleModeIsStageBypass) {
  const Dataset ds = generate(small(400, 65));
  ProposedConfig cfg;
  cfg.oracle_nuisance = true;
  const TauEstimate a = estimate_proposed(ds, cfg);
  const TauEstimate b = make_estimate(score_psi(ds, oracle_nuisance(ds), Normalization::hajek), "proposed");
  EXPECT_EQ(a.tau_hat, b.tau_hat);
  EXPECT_EQ(a.se, b.se);
}

TEST(Proposed, DefaultPipelineRuns) {
  SimConfig c;
  c.p = 200;
  c.seed = 66;
  const Dataset ds = generate(c);
  const TauEstimate t = estimate_proposed(ds);
  EXPECT_TRUE(std::isfinite(t.tau_hat));
  EXPECT_GT(t.se, 0);
  EXPECT_LT(t.ci_low, t.tau_hat);
  EXPECT_GT(t.ci_high, t.tau_hat);
  EXPECT_EQ(t.method, "proposed");
  for (const char* key : {"clip_rate", "selection_fallback", "pel_failures", "ess"}) EXPECT_EQ(t.diagnostics.count(key), 1u) << key;
  EXPECT_LE(t.diagnostics.at("clip_rate"), 0.05);
  EXPECT_EQ(t.psi_values.size(), 200);
}

TEST(Proposed, ErrorsCarryStageName) {
  const Dataset ds = generate(small(100, 67));
  ProposedConfig cfg;
  cfg.z_override = Matrix::Zero(50, 3);
  try {
    estimate_proposed(ds, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DimensionMismatch);
    EXPECT_EQ(e.detail().rfind("latent:", 0), 0u) << e.what();
  }
  ProposedConfig bad;
  bad.e_clip = 0.6;
  EXPECT_THROW(estimate_proposed(ds, bad), Error);
}

TEST(Proposed, RescoreAtFittedLatentReproducesPointEstimate) {
  SimConfig c = small(300, 68);
  const Dataset ds = generate(c);
  ProposedConfig cfg;
  const ProposedFit fit = fit_proposed(ds, cfg);
  EXPECT_NEAR(rescore_proposed(ds, fit, fit.z_tilde, cfg).tau_hat, fit.estimate.tau_hat, 1e-12);
}

// Treatment is confounded, so the complete-case contrast still weights by e.
TEST(NaiveIpw, McarAgreesWithCompleteCase) {
  Dataset ds = fully_observed(generate(small(3000, 69)));
  Rng rng = make_stream(69, 5);
  std::bernoulli_distribution keep(0.7);
  for (auto& u : ds.units)
    if (!keep(rng)) u.r = 0, u.y.reset();
  const TauEstimate t = estimate_naive_ipw(ds);
  const Vector e = fit_propensity(ds, fit_linear_latent(ds, 3).z_hat);
  const auto n = static_cast<Eigen::Index>(ds.n());
  const TauEstimate cc = detail::hajek_ipw(ds, detail::observed_outcomes(ds), Vector::Ones(n), e, "cc");
  EXPECT_LT(std::abs(t.tau_hat - cc.tau_hat), 2 * t.se);
  EXPECT_LT(std::abs(t.tau_hat - 1.0), 3 * t.se);
}

TEST(NaiveIpw, NoMissingnessIsTreatmentIpw) {
  const Dataset ds = fully_observed(generate(small(1000, 70)));
  const Vector e = fit_propensity(ds, fit_linear_latent(ds, 3).z_hat);
  double s1 = 0, w1 = 0, s0 = 0, w0 = 0;
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto& u = ds.units[i];
    const double ei = e[static_cast<Eigen::Index>(i)];
    if (u.a) s1 += *u.y / ei, w1 += 1 / ei;
    else s0 += *u.y / (1 - ei), w0 += 1 / (1 - ei);
  }
  EXPECT_NEAR(estimate_naive_ipw(ds).tau_hat, s1 / w1 - s0 / w0, 1e-12);
}

TEST(NaiveIpw, EmptyArm) {
  Dataset ds = generate(small(60, 71));
  for (auto& u : ds.units)
    if (u.a) u.r = 0, u.y.reset(), u.o.resize(0);
  try {
    detail::hajek_ipw(ds, detail::observed_outcomes(ds), Vector::Ones(60), Vector::Constant(60, 0.5), "x");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::EmptyArm);
  }
}

TEST(RobustAipw, CleanDataMatchesNaiveAipw) {
  const Dataset ds = generate(small(2000, 72));
  EXPECT_NEAR(estimate_robust_aipw(ds).tau_hat, estimate_mar_aipw(ds, false).tau_hat, 0.05);
}

TEST(RobustAipw, BoundedInfluenceOfOneUnit) {
  Dataset ds = generate(small(500, 73));
  const double before = estimate_robust_aipw(ds).tau_hat;
  for (auto& u : ds.units)
    if (u.r) {
      u.y = 1e6;
      break;
    }
  EXPECT_LT(std::abs(estimate_robust_aipw(ds).tau_hat - before), 0.5);
}

TEST(Qem, RichardsonExactOnLinearBias) {
  const std::vector<double> k{1, 2, 3};
  for (double a : {-1.5, 0.0, 2.25})
    for (double b : {0.3, -4.0}) EXPECT_NEAR(richardson_zero(k, {a + b, a + 2 * b, a + 3 * b}), a, 1e-10);
  EXPECT_THROW(richardson_zero({1, 1, 1}, {1, 2, 3}), Error);
  EXPECT_THROW(richardson_zero({1}, {1}), Error);
}

TEST(Qem, VanishingChannelNoiseMatchesNaiveIpw) {
  SimConfig c = small(800, 74);
  c.channel_gamma = 0;
  c.channel_noise = 1e-300;
  c.channel_k = 1;
  const Dataset ds = generate(c);
  const Vector y = qem_outcomes(ds);
  for (std::size_t i = 0; i < ds.n(); ++i)
    if (ds.units[i].r) {
      EXPECT_NEAR(y[static_cast<Eigen::Index>(i)], *ds.units[i].y, 1e-12 * (1 + std::abs(*ds.units[i].y)));
    }
  EXPECT_NEAR(estimate_qem_ipw(ds).tau_hat, estimate_naive_ipw(ds).tau_hat, 1e-12);
}

TEST(Qem, NeedsChannel) {
  Dataset ds = generate(small(50, 75));
  ds.channel.reset();
  EXPECT_THROW(qem_outcomes(ds), Error);
}

TEST(CvaeOnly, NoMissingnessMatchesDifferenceInMeans) {
  const Dataset ds = fully_observed(generate(small(600, 76)));
  BaselineConfig bc;
  bc.z_override = latent_matrix(ds).leftCols(3);
  bc.bootstrap = 100;
  const TauEstimate t = estimate_cvae_only(ds, bc);
  EXPECT_NEAR(t.tau_hat, diff_in_means(ds), 1e-10);
  EXPECT_GT(t.se, 0);
  EXPECT_GE(t.diagnostics.at("bootstrap_used"), 90);
}

TEST(CvaeOnly, TrainsLatentWhenNoOverride) {
  SimConfig c = small(150, 77);
  c.p = 10;
  const Dataset ds = generate(c);
  BaselineConfig bc;
  bc.cvae.epochs = 30;
  bc.bootstrap = 30;
  const TauEstimate t = estimate_cvae_only(ds, bc);
  EXPECT_TRUE(std::isfinite(t.tau_hat));
  EXPECT_EQ(t.z_hat.cols(), 3);
}

TEST(Estimators, InvariantToUnitOrder) {
  SimConfig c = small(400, 78);
  c.p = 30;
  const Dataset ds = generate(c);
  const Dataset pd = permuted(ds, 78);
  EXPECT_NEAR(estimate_naive_ipw(ds).tau_hat, estimate_naive_ipw(pd).tau_hat, 1e-9);
  EXPECT_NEAR(estimate_robust_aipw(ds).tau_hat, estimate_robust_aipw(pd).tau_hat, 1e-8);
  EXPECT_NEAR(estimate_proposed(ds).tau_hat, estimate_proposed(pd).tau_hat, 1e-6);
  BaselineConfig a, b;
  a.z_override = latent_matrix(ds).leftCols(3);
  b.z_override = latent_matrix(pd).leftCols(3);
  a.bootstrap = b.bootstrap = 20;
  EXPECT_NEAR(estimate_cvae_only(ds, a).tau_hat, estimate_cvae_only(pd, b).tau_hat, 1e-10);
}

TEST(Estimators, MethodNamesRoundTrip) {
  for (Method m : all_methods()) EXPECT_EQ(parse_method(method_name(m)), m);
  EXPECT_THROW(parse_method("bogus"), Error);
}
