#include "calm/simharness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "calm/rng.hpp"
#include "calm/stats.hpp"

namespace calm {

namespace {

std::uint64_t subject_stream(std::uint64_t trial_seed, const std::string& id) {
  return derive_stream(trial_seed, {fnv1a64("subject"), fnv1a64(id)});
}

std::string subject_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "s%06zu", i + 1);
  return buf;
}

std::vector<double> arm_probabilities(const DgpConfig& cfg) {
  std::vector<double> e(static_cast<std::size_t>(cfg.arm_count));
  e[0] = cfg.e1;
  const double rest = (1.0 - cfg.e1) / static_cast<double>(cfg.arm_count - 1);
  for (int a = 2; a <= cfg.arm_count; ++a) e[a - 1] = rest;
  return e;
}

struct ResolvedDgp {
  std::vector<std::vector<double>> beta;  // per arm
  std::vector<double> theta;              // per arm
  std::vector<double> e;                  // per arm
  std::vector<double> stratum_edges;      // thresholds on x_1
};

ResolvedDgp resolve(const DgpConfig& cfg) {
  cfg.validate();
  ResolvedDgp r;
  r.e = arm_probabilities(cfg);
  r.theta = cfg.theta.empty() ? std::vector<double>(cfg.arm_count, 1.0) : cfg.theta;
  if (!cfg.beta.empty()) {
    r.beta = cfg.beta;
  } else {
    // One coefficient vector on the seeded sphere, shared by every arm.
    Rng rng(derive_stream(cfg.seed, {fnv1a64("dgp_beta")}));
    std::vector<double> b(cfg.p);
    double norm2 = 0.0;
    for (double& v : b) {
      v = rng.normal();
      norm2 += v * v;
    }
    const double scale = norm2 > 0.0 ? cfg.beta_scale / std::sqrt(norm2) : 0.0;
    for (double& v : b) v *= scale;
    r.beta.assign(static_cast<std::size_t>(cfg.arm_count), b);
  }
  for (int s = 1; s < cfg.strata_count; ++s) {
    r.stratum_edges.push_back(
        normal_quantile(static_cast<double>(s) / static_cast<double>(cfg.strata_count)));
  }
  return r;
}

double dgp_mu(const ResolvedDgp& r, const DgpConfig& cfg, int arm,
              std::span<const double> x) {
  const auto& b = r.beta[static_cast<std::size_t>(arm - 1)];
  double v = cfg.quad * (x[0] * x[0] - 1.0);
  for (std::size_t j = 0; j < cfg.p; ++j) v += b[j] * x[j];
  if (arm == 1) v += cfg.tau0 + cfg.tau1 * x[0];
  return v;
}

int stratum_of(const ResolvedDgp& r, std::span<const double> x) {
  int s = 0;
  for (double edge : r.stratum_edges) s += (x[0] > edge) ? 1 : 0;
  return s;
}

double residual_sd_of(const ResolvedDgp& r, const DgpConfig& cfg, int arm) {
  const double th = r.theta[static_cast<std::size_t>(arm - 1)];
  return std::sqrt(th * th + cfg.sigma_y * cfg.sigma_y);
}

double rho_of(const ResolvedDgp& r, const DgpConfig& cfg, int arm,
              std::span<const double> x) {
  if (cfg.predictor.noise_sd == 0.0) return 0.0;  // degenerate predictor: rho convention
  if (!cfg.predictor.rho_by_stratum.empty() && !r.stratum_edges.empty()) {
    auto it = cfg.predictor.rho_by_stratum.find(stratum_of(r, x));
    if (it != cfg.predictor.rho_by_stratum.end()) {
      return it->second.at(static_cast<std::size_t>(arm - 1));
    }
  }
  if (cfg.predictor.rho_target.empty()) return 0.0;
  return cfg.predictor.rho_target.at(static_cast<std::size_t>(arm - 1));
}

double mix_a_of(const ResolvedDgp& r, const DgpConfig& cfg, int arm,
                std::span<const double> x) {
  return solve_mix(rho_of(r, cfg, arm, x), residual_sd_of(r, cfg, arm),
                   cfg.predictor.noise_sd)
      .a;
}

double dagger_sd_of(const ResolvedDgp& r, const DgpConfig& cfg, int arm) {
  return cfg.predictor.noise_sd < 0.0 ? residual_sd_of(r, cfg, arm)
                                      : cfg.predictor.noise_sd;
}

}  // namespace

void DgpConfig::validate() const {
  if (n < 4) throw DomainError("dgp: n must be at least 4");
  if (p < 1) throw DomainError("dgp: p must be at least 1");
  if (arm_count < 2) throw DomainError("dgp: arm count must be at least 2");
  if (!(sigma_y > 0.0)) throw DomainError("dgp: sigma_y must be positive");
  if (!(e1 > 0.01 && e1 < 0.99)) throw DomainError("dgp: e1 must respect overlap");
  if (!beta.empty() && static_cast<int>(beta.size()) != arm_count) {
    throw DomainError("dgp: beta must have one vector per arm");
  }
  for (const auto& b : beta) {
    if (b.size() != p) throw DomainError("dgp: beta dimension != p");
  }
  if (!theta.empty() && static_cast<int>(theta.size()) != arm_count) {
    throw DomainError("dgp: theta must have one entry per arm");
  }
  if (strata_count < 0 || strata_count > 64) {
    throw DomainError("dgp: strata_count outside 0..64");
  }
  for (double rho : predictor.rho_target) {
    if (std::fabs(rho) > 1.0) throw DomainError("dgp: |rho_target| > 1");
  }
}

int dgp_stratum(const DgpConfig& config, std::span<const double> x) {
  const ResolvedDgp r = resolve(config);
  return stratum_of(r, x);
}

DgpMoments moments_of(const DgpConfig& config) {
  auto r = std::make_shared<ResolvedDgp>(resolve(config));
  auto cfg = std::make_shared<DgpConfig>(config);
  DgpMoments m;
  m.arm_count = config.arm_count;
  m.p = config.p;
  m.draw_x = [p = config.p](Rng& rng, std::vector<double>& x) {
    x.resize(p);
    for (double& v : x) v = rng.normal();
  };
  m.mu = [r, cfg](int arm, std::span<const double> x) {
    return dgp_mu(*r, *cfg, arm, x);
  };
  m.var_y = [r, cfg](int arm, std::span<const double>) {
    const double s = residual_sd_of(*r, *cfg, arm);
    return s * s;
  };
  m.e = [r](int arm, std::span<const double>) {
    return r->e[static_cast<std::size_t>(arm - 1)];
  };
  m.rho = [r, cfg](int arm, std::span<const double> x) {
    return rho_of(*r, *cfg, arm, x);
  };
  m.cov_y = [r, cfg](int a, int b, std::span<const double>) {
    if (a == b) {
      const double s = residual_sd_of(*r, *cfg, a);
      return s * s;
    }
    // Shared latent g; outcome noise eps is independent across arms.
    return r->theta[static_cast<std::size_t>(a - 1)] *
           r->theta[static_cast<std::size_t>(b - 1)];
  };
  m.var_dagger = [r, cfg](int arm, std::span<const double>) {
    const double s = dagger_sd_of(*r, *cfg, arm);
    return s * s;
  };
  m.cov_dagger = [r, cfg, m](int a, int b, std::span<const double> x) -> double {
    if (a == b) {
      const double s = dagger_sd_of(*r, *cfg, a);
      return s * s;
    }
    return mix_a_of(*r, *cfg, a, x) * mix_a_of(*r, *cfg, b, x) * m.cov_y(a, b, x);
  };
  m.cov_dagger_y = [r, cfg, m](int a, int b, std::span<const double> x) {
    return mix_a_of(*r, *cfg, a, x) * m.cov_y(a, b, x);
  };
  m.density = [p = config.p](std::span<const double> x) {
    double f = 1.0;
    for (std::size_t j = 0; j < p; ++j) f *= normal_pdf(x[j]);
    return f;
  };
  return m;
}

TruthRecord truth_record(const DgpConfig& config) {
  const ResolvedDgp r = resolve(config);
  TruthRecord t;
  t.beta = r.beta;
  t.moments = moments_of(config);
  t.integration_draws = config.integration_draws;
  t.tau_at = [cfg = config, r](std::span<const double> x) {
    return dgp_mu(r, cfg, 1, x) - dgp_mu(r, cfg, 2, x);
  };

  Rng rng(derive_stream(config.seed, {fnv1a64("truth_integration")}));
  std::vector<double> x(config.p);
  std::vector<double> sums(static_cast<std::size_t>(config.arm_count), 0.0);
  for (std::size_t d = 0; d < config.integration_draws; ++d) {
    for (double& v : x) v = rng.normal();
    for (int a = 1; a <= config.arm_count; ++a) {
      sums[a - 1] += dgp_mu(r, config, a, x);
    }
  }
  t.mu_pop.resize(sums.size());
  for (std::size_t a = 0; a < sums.size(); ++a) {
    t.mu_pop[a] = sums[a] / static_cast<double>(config.integration_draws);
  }
  t.ate = t.mu_pop[0] - t.mu_pop[1];
  return t;
}

GeneratedTrial generate_trial(const DgpConfig& config, std::uint64_t seed) {
  const ResolvedDgp r = resolve(config);
  const std::size_t n = config.n;
  const std::size_t p = config.p;
  const int k = config.arm_count;

  std::vector<std::string> ids(n);
  std::vector<double> y(n);
  std::vector<int> t(n);
  std::vector<double> x(n * p);
  std::vector<std::string> z(n);
  std::vector<int> xc(n, 0);
  std::vector<double> g_latent(n);
  std::vector<std::vector<double>> resid(n, std::vector<double>(k));

  for (std::size_t i = 0; i < n; ++i) {
    ids[i] = subject_id(i);
    Rng rng(subject_stream(seed, ids[i]));
    for (std::size_t j = 0; j < p; ++j) x[i * p + j] = rng.normal();
    const double g = rng.normal();
    g_latent[i] = g;
    const double u = rng.uniform01();
    double cum = 0.0;
    int arm = k;
    for (int a = 1; a <= k; ++a) {
      cum += r.e[a - 1];
      if (u < cum) {
        arm = a;
        break;
      }
    }
    t[i] = arm;
    std::span<const double> xi{x.data() + i * p, p};
    for (int a = 1; a <= k; ++a) {
      const double eps = rng.normal();
      resid[i][a - 1] = r.theta[a - 1] * g + config.sigma_y * eps;
    }
    y[i] = dgp_mu(r, config, arm, xi) + resid[i][arm - 1];
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", g);
    z[i] = buf;
    if (config.strata_count > 0) xc[i] = stratum_of(r, xi);
  }

  std::optional<std::vector<int>> xc_opt;
  if (config.strata_count > 0) xc_opt = xc;
  RctDataset data(std::move(ids), std::move(y), std::move(t), std::move(x), p,
                  std::move(xc_opt), std::move(z), k,
                  PropensitySpec::constant(r.e));

  // Predictor hooks recompute the same residual realization from the subject
  // stream, so free-standing queries agree with the generated table.
  SyntheticPredictorConfig pcfg = config.predictor;
  pcfg.seed = derive_stream(seed, {fnv1a64("predictor")});
  SyntheticPredictor::Hooks hooks;
  const DgpConfig cfg_copy = config;
  hooks.conditional_mean = [r, cfg_copy](int arm, std::span<const double> xq) {
    return dgp_mu(r, cfg_copy, arm, xq);
  };
  hooks.residual = [r, cfg_copy, seed](std::string_view id, int arm,
                                       std::span<const double>, std::string_view zq) {
    Rng rng(subject_stream(seed, std::string(id)));
    for (std::size_t j = 0; j < cfg_copy.p; ++j) (void)rng.normal();  // x draws
    const double g = rng.normal();
    (void)rng.uniform01();  // treatment draw
    double eps = 0.0;
    for (int a = 1; a <= arm; ++a) eps = rng.normal();
    (void)zq;
    return r.theta[static_cast<std::size_t>(arm - 1)] * g + cfg_copy.sigma_y * eps;
  };
  hooks.residual_sd = [r, cfg_copy](int arm) { return residual_sd_of(r, cfg_copy, arm); };
  hooks.stratum = [r](std::span<const double> xq) { return stratum_of(r, xq); };

  auto predictor = std::make_shared<SyntheticPredictor>(pcfg, hooks);

  PredictionSet predictions = PredictionSet::zero_shot();
  std::vector<std::vector<double>> base(n, std::vector<double>(k));
  for (std::size_t i = 0; i < n; ++i) {
    const SubjectView s = data.subject(i);
    for (int a = 1; a <= k; ++a) {
      const double v = predictor->predict(s, a);
      base[i][a - 1] = v;
      predictions.set_zero_shot(data.ids()[i], a, v);
    }
  }
  predictor->register_base_values(std::move(base));

  return GeneratedTrial{std::move(data), std::move(predictions), truth_record(config),
                        std::move(predictor)};
}

std::string McEstimatorSpec::name() const {
  std::string base;
  switch (kind) {
    case Kind::aipw: base = "aipw"; break;
    case Kind::calm_zero: base = "calm-zero"; break;
    case Kind::calm_fs: base = "calm-fs"; break;
  }
  return base;
}

namespace {

struct RepOutcome {
  bool ok = false;
  double estimate = 0.0;
  double lo = 0.0, hi = 0.0;
};

RepOutcome run_spec_once(const GeneratedTrial& trial, const McEstimatorSpec& spec,
                         std::uint64_t rep_seed) {
  McEstimatorSpec s = spec;  // local copy to retarget seeds per replication
  s.est.seed = derive_stream(rep_seed, {fnv1a64("fold_seed")});
  s.fs.aggregation_seed = derive_stream(rep_seed, {fnv1a64("agg_seed")});
  RepOutcome out;
  EstimateReport rep;
  switch (s.kind) {
    case McEstimatorSpec::Kind::aipw:
      rep = (s.estimand == Estimand::mu_t)
                ? estimate_mu_aipw(trial.data, s.arm, s.est)
                : estimate_ate_aipw(trial.data, s.arm, s.arm_prime, s.est);
      break;
    case McEstimatorSpec::Kind::calm_zero:
      rep = (s.estimand == Estimand::mu_t)
                ? estimate_mu_calm(trial.data, trial.predictions, s.arm, s.est)
                : estimate_ate_calm(trial.data, trial.predictions, s.arm, s.arm_prime,
                                    s.est);
      break;
    case McEstimatorSpec::Kind::calm_fs:
      rep = (s.estimand == Estimand::mu_t)
                ? estimate_mu_calm_fs(trial.data, *trial.predictor, s.arm, s.fs, s.est)
                : estimate_ate_calm_fs(trial.data, *trial.predictor, s.arm, s.arm_prime,
                                       s.fs, s.est);
      break;
  }
  out.ok = true;
  out.estimate = rep.point;
  out.lo = rep.ci_lo;
  out.hi = rep.ci_hi;
  return out;
}

void parallel_over_reps(int R, int threads, const std::function<void(int)>& body) {
  int count = threads > 0 ? threads
                          : static_cast<int>(std::thread::hardware_concurrency());
  if (count < 1) count = 1;
  count = std::min(count, R);
  if (count <= 1) {
    for (int rep = 0; rep < R; ++rep) body(rep);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> workers;
  std::exception_ptr error;
  std::mutex error_mutex;
  for (int w = 0; w < count; ++w) {
    workers.emplace_back([&]() {
      for (;;) {
        const int rep = next.fetch_add(1);
        if (rep >= R) return;
        try {
          body(rep);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

std::vector<McMetrics> run_monte_carlo_suite(const DgpConfig& dgp,
                                             std::span<const McEstimatorSpec> specs,
                                             int R, std::uint64_t base_seed,
                                             int threads) {
  if (R < 2) throw DomainError("run_monte_carlo: R must be >= 2");
  if (specs.empty()) throw DomainError("run_monte_carlo: no estimator specs");

  const TruthRecord truth = truth_record(dgp);
  const std::size_t ns = specs.size();
  std::vector<std::vector<RepOutcome>> results(ns, std::vector<RepOutcome>(R));

  parallel_over_reps(R, threads, [&](int rep) {
    const std::uint64_t rep_seed =
        derive_stream(base_seed, {fnv1a64("mc_rep"), static_cast<std::uint64_t>(rep)});
    const GeneratedTrial trial = generate_trial(dgp, rep_seed);
    for (std::size_t s = 0; s < ns; ++s) {
      try {
        results[s][rep] = run_spec_once(trial, specs[s], rep_seed);
      } catch (const std::exception&) {
        results[s][rep].ok = false;
      }
    }
  });

  std::vector<McMetrics> metrics(ns);
  for (std::size_t s = 0; s < ns; ++s) {
    McMetrics& m = metrics[s];
    m.estimator = specs[s].name();
    m.estimand = estimand_name(specs[s].estimand);
    m.n = dgp.n;
    m.replications = R;
    m.truth = specs[s].estimand == Estimand::mu_t ? truth.mu_pop[specs[s].arm - 1]
                                                  : truth.ate;
    int covered = 0;
    double width = 0.0;
    for (int rep = 0; rep < R; ++rep) {
      const RepOutcome& o = results[s][rep];
      if (!o.ok) {
        m.failures += 1;
        continue;
      }
      m.estimates.push_back(o.estimate);
      m.ci_lo.push_back(o.lo);
      m.ci_hi.push_back(o.hi);
      covered += (o.lo <= m.truth && m.truth <= o.hi) ? 1 : 0;
      width += o.hi - o.lo;
    }
    if (m.failures * 20 > R) {
      throw DomainError("run_monte_carlo: estimator '" + m.estimator + "' failed in " +
                        std::to_string(m.failures) + " of " + std::to_string(R) +
                        " replications");
    }
    const std::size_t ok = m.estimates.size();
    if (ok >= 2) {
      m.mean_estimate = mean(m.estimates);
      m.abs_bias = std::fabs(m.mean_estimate - m.truth);
      m.sqrt_n_sd = std::sqrt(static_cast<double>(dgp.n)) * sample_sd(m.estimates);
      m.coverage = static_cast<double>(covered) / static_cast<double>(ok);
      m.coverage_se =
          std::sqrt(m.coverage * (1.0 - m.coverage) / static_cast<double>(ok));
      m.mean_ci_width = width / static_cast<double>(ok);
    }
  }
  return metrics;
}

McMetrics run_monte_carlo(const DgpConfig& dgp, const McEstimatorSpec& spec, int R,
                          std::uint64_t base_seed, int threads) {
  return run_monte_carlo_suite(dgp, {&spec, 1}, R, base_seed, threads)[0];
}

ReductionReport variance_reduction_report(const DgpConfig& dgp, int R,
                                          std::uint64_t base_seed, int threads) {
  if (dgp.strata_count < 1) {
    throw DomainError("variance_reduction_report: the DGP must define strata");
  }
  const TruthRecord truth = truth_record(dgp);
  (void)truth;
  const int S = dgp.strata_count;

  struct RepRow {
    std::vector<double> tau_calm, tau_aipw;  // per stratum, then global
    std::vector<double> omega_t, omega_tp;
    std::vector<int> counts;
    bool ok = false;
  };
  std::vector<RepRow> rows(static_cast<std::size_t>(R));

  parallel_over_reps(R, threads, [&](int rep) {
    const std::uint64_t rep_seed =
        derive_stream(base_seed, {fnv1a64("mc_rep"), static_cast<std::uint64_t>(rep)});
    const GeneratedTrial trial = generate_trial(dgp, rep_seed);
    EstimatorConfig cfg;
    cfg.weight = WeightKind::robust;
    cfg.seed = derive_stream(rep_seed, {fnv1a64("fold_seed")});
    EstimateReport c1 = estimate_mu_calm(trial.data, trial.predictions, 1, cfg);
    EstimateReport c2 = estimate_mu_calm(trial.data, trial.predictions, 2, cfg);
    EstimateReport a1 = estimate_mu_aipw(trial.data, 1, cfg);
    EstimateReport a2 = estimate_mu_aipw(trial.data, 2, cfg);

    RepRow row;
    row.tau_calm.assign(S + 1, 0.0);
    row.tau_aipw.assign(S + 1, 0.0);
    row.omega_t.assign(S + 1, 0.0);
    row.omega_tp.assign(S + 1, 0.0);
    row.counts.assign(S + 1, 0);
    const auto& strata = trial.data.x_coarse();
    for (std::size_t i = 0; i < trial.data.n(); ++i) {
      const int s = strata[i];
      row.tau_calm[s] += c1.influence[i] - c2.influence[i];
      row.tau_aipw[s] += a1.influence[i] - a2.influence[i];
      row.counts[s] += 1;
    }
    for (int s = 0; s < S; ++s) {
      row.tau_calm[S] += row.tau_calm[s];
      row.tau_aipw[S] += row.tau_aipw[s];
      row.counts[S] += row.counts[s];
    }
    for (int s = 0; s <= S; ++s) {
      if (row.counts[s] > 0) {
        row.tau_calm[s] /= row.counts[s];
        row.tau_aipw[s] /= row.counts[s];
      }
    }
    for (int s = 0; s < S; ++s) {
      auto it1 = c1.robust_weights.find(s);
      auto it2 = c2.robust_weights.find(s);
      row.omega_t[s] = it1 != c1.robust_weights.end() ? it1->second : 0.0;
      row.omega_tp[s] = it2 != c2.robust_weights.end() ? it2->second : 0.0;
    }
    row.ok = true;
    rows[rep] = std::move(row);
  });

  ReductionReport report;
  for (int s = 0; s <= S; ++s) {
    std::vector<double> tc, ta, ot, otp;
    double count_sum = 0.0;
    for (const RepRow& row : rows) {
      if (!row.ok || row.counts[s] == 0) continue;
      tc.push_back(row.tau_calm[s]);
      ta.push_back(row.tau_aipw[s]);
      ot.push_back(row.omega_t[s]);
      otp.push_back(row.omega_tp[s]);
      count_sum += row.counts[s];
    }
    if (tc.size() < 2) {
      if (s < S) {
        report.notes.push_back("stratum " + std::to_string(s) +
                               " omitted: present in fewer than 2 replications");
      }
      continue;
    }
    StratumReductionRow out;
    out.stratum = s < S ? s : -1;
    out.replications = static_cast<int>(tc.size());
    out.mean_count = count_sum / static_cast<double>(tc.size());
    out.omega_arm_t = mean(ot);
    out.omega_arm_t_prime = mean(otp);
    out.var_calm = sample_variance(tc);
    out.var_aipw = sample_variance(ta);
    out.reduction_pct =
        out.var_aipw > 0.0 ? (out.var_aipw - out.var_calm) / out.var_aipw * 100.0 : 0.0;
    report.rows.push_back(out);
  }
  return report;
}

std::string McMetrics::to_json() const {
  nlohmann::json j;
  j["estimator"] = estimator;
  j["estimand"] = estimand;
  j["n"] = n;
  j["replications"] = replications;
  j["truth"] = truth;
  j["mean_estimate"] = mean_estimate;
  j["abs_bias"] = abs_bias;
  j["sqrt_n_sd"] = sqrt_n_sd;
  j["coverage"] = coverage;
  j["coverage_se"] = coverage_se;
  j["mean_ci_width"] = mean_ci_width;
  j["failures"] = failures;
  j["estimates"] = estimates;
  j["ci_lo"] = ci_lo;
  j["ci_hi"] = ci_hi;
  return j.dump();
}

std::string ReductionReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"stratum", r.stratum},
                         {"mean_count", r.mean_count},
                         {"omega_arm_t", r.omega_arm_t},
                         {"omega_arm_t_prime", r.omega_arm_t_prime},
                         {"var_aipw", r.var_aipw},
                         {"var_calm", r.var_calm},
                         {"reduction_pct", r.reduction_pct},
                         {"replications", r.replications}});
  }
  nlohmann::json j;
  j["rows"] = rows_json;
  j["notes"] = notes;
  return j.dump();
}

std::string ReductionReport::to_csv() const {
  std::ostringstream out;
  out << "stratum,mean_count,omega_arm_t,omega_arm_t_prime,var_aipw,var_calm,"
         "reduction_pct,replications\n";
  char buf[64];
  for (const auto& r : rows) {
    out << r.stratum << ',';
    std::snprintf(buf, sizeof(buf), "%.17g", r.mean_count);
    out << buf << ',';
    std::snprintf(buf, sizeof(buf), "%.17g", r.omega_arm_t);
    out << buf << ',';
    std::snprintf(buf, sizeof(buf), "%.17g", r.omega_arm_t_prime);
    out << buf << ',';
    std::snprintf(buf, sizeof(buf), "%.17g", r.var_aipw);
    out << buf << ',';
    std::snprintf(buf, sizeof(buf), "%.17g", r.var_calm);
    out << buf << ',';
    std::snprintf(buf, sizeof(buf), "%.17g", r.reduction_pct);
    out << buf << ',' << r.replications << '\n';
  }
  for (const auto& note : notes) out << "# " << note << '\n';
  return out.str();
}

std::string dgp_to_json(const DgpConfig& c) {
  nlohmann::json j;
  j["n"] = c.n;
  j["p"] = c.p;
  j["arm_count"] = c.arm_count;
  j["e1"] = c.e1;
  j["beta"] = c.beta;
  j["beta_scale"] = c.beta_scale;
  j["tau0"] = c.tau0;
  j["tau1"] = c.tau1;
  j["quad"] = c.quad;
  j["theta"] = c.theta;
  j["sigma_y"] = c.sigma_y;
  j["strata_count"] = c.strata_count;
  j["seed"] = c.seed;
  j["integration_draws"] = c.integration_draws;
  nlohmann::json pred;
  pred["rho_target"] = c.predictor.rho_target;
  if (!c.predictor.rho_by_stratum.empty()) {
    nlohmann::json by = nlohmann::json::object();
    for (const auto& [s, rhos] : c.predictor.rho_by_stratum) {
      by[std::to_string(s)] = rhos;
    }
    pred["rho_by_stratum"] = by;
  }
  pred["additive_bias"] = c.predictor.additive_bias;
  pred["noise_sd"] = c.predictor.noise_sd;
  pred["fs_coef"] = c.predictor.fs_coef;
  pred["fs_bandwidth"] = c.predictor.fs_bandwidth;
  j["predictor"] = pred;
  return j.dump();
}

DgpConfig dgp_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw ParseError(std::string("dgp JSON: ") + e.what());
  }
  DgpConfig c;
  if (j.contains("n")) c.n = j.at("n").get<std::size_t>();
  if (j.contains("p")) c.p = j.at("p").get<std::size_t>();
  if (j.contains("arm_count")) c.arm_count = j.at("arm_count").get<int>();
  if (j.contains("e1")) c.e1 = j.at("e1").get<double>();
  if (j.contains("beta")) c.beta = j.at("beta").get<std::vector<std::vector<double>>>();
  if (j.contains("beta_scale")) c.beta_scale = j.at("beta_scale").get<double>();
  if (j.contains("tau0")) c.tau0 = j.at("tau0").get<double>();
  if (j.contains("tau1")) c.tau1 = j.at("tau1").get<double>();
  if (j.contains("quad")) c.quad = j.at("quad").get<double>();
  if (j.contains("theta")) c.theta = j.at("theta").get<std::vector<double>>();
  if (j.contains("sigma_y")) c.sigma_y = j.at("sigma_y").get<double>();
  if (j.contains("strata_count")) c.strata_count = j.at("strata_count").get<int>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("integration_draws")) {
    c.integration_draws = j.at("integration_draws").get<std::size_t>();
  }
  if (j.contains("predictor")) {
    const auto& pj = j.at("predictor");
    if (pj.contains("rho_target")) {
      c.predictor.rho_target = pj.at("rho_target").get<std::vector<double>>();
    }
    if (pj.contains("rho_by_stratum")) {
      for (auto it = pj.at("rho_by_stratum").begin(); it != pj.at("rho_by_stratum").end();
           ++it) {
        c.predictor.rho_by_stratum[std::stoi(it.key())] =
            it.value().get<std::vector<double>>();
      }
    }
    if (pj.contains("additive_bias")) {
      c.predictor.additive_bias = pj.at("additive_bias").get<double>();
    }
    if (pj.contains("noise_sd")) c.predictor.noise_sd = pj.at("noise_sd").get<double>();
    if (pj.contains("fs_coef")) c.predictor.fs_coef = pj.at("fs_coef").get<double>();
    if (pj.contains("fs_bandwidth")) {
      c.predictor.fs_bandwidth = pj.at("fs_bandwidth").get<double>();
    }
  }
  c.validate();
  return c;
}

std::string metrics_to_csv(std::span<const McMetrics> metrics,
                           const std::string& config_echo) {
  std::ostringstream out;
  out << "# " << config_echo << '\n';
  out << "estimator,estimand,n,replications,truth,mean_estimate,abs_bias,sqrt_n_sd,"
         "coverage,coverage_se,mean_ci_width,failures\n";
  char buf[64];
  for (const auto& m : metrics) {
    out << m.estimator << ',' << m.estimand << ',' << m.n << ',' << m.replications;
    for (double v : {m.truth, m.mean_estimate, m.abs_bias, m.sqrt_n_sd, m.coverage,
                     m.coverage_se, m.mean_ci_width}) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      out << ',' << buf;
    }
    out << ',' << m.failures << '\n';
  }
  return out.str();
}

}  // namespace calm
