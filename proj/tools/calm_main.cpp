// Command-line front end: analyze / simulate / test-efficiency /
// aggregate-predictions. Exit codes: 0 success, 2 input error, 3 runtime
// estimation error.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "calm/calibration.hpp"
#include "calm/data_model.hpp"
#include "calm/efftest.hpp"
#include "calm/errors.hpp"
#include "calm/estimators.hpp"
#include "calm/predictor.hpp"
#include "calm/simharness.hpp"

namespace {

constexpr std::uint64_t kDefaultSeed = 20240501;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw calm::ParseError("cannot open file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw calm::ParseError("cannot write file '" + path + "'");
  out << content;
}

std::uint64_t resolve_seed(std::uint64_t flag_seed, bool seed_given) {
  if (seed_given) return flag_seed;
  if (const char* env = std::getenv("CALM_SEED")) {
    return std::strtoull(env, nullptr, 10);
  }
  return kDefaultSeed;
}

calm::WeightKind parse_weight(const std::string& w) {
  if (w == "smooth") return calm::WeightKind::smooth;
  if (w == "robust") return calm::WeightKind::robust;
  if (w == "zero") return calm::WeightKind::zero;
  throw calm::DomainError("unknown weight kind '" + w + "' (smooth|robust|zero)");
}

calm::RegressorConfig::Family parse_family(const std::string& f) {
  using Family = calm::RegressorConfig::Family;
  if (f == "knn") return Family::knn;
  if (f == "kernel") return Family::kernel_smoother;
  if (f == "stumps") return Family::stump_ensemble;
  if (f == "linear") return Family::linear;
  throw calm::DomainError("unknown regressor family '" + f +
                          "' (knn|kernel|stumps|linear)");
}

void print_report_line(const calm::EstimateReport& r) {
  const double se = std::sqrt(r.variance / static_cast<double>(r.n));
  std::string estimand;
  if (r.estimand == calm::Estimand::mu_t) {
    estimand = "mu[" + std::to_string(r.arm) + "]";
  } else if (r.estimand == calm::Estimand::ate) {
    estimand = "ate[" + std::to_string(r.arm) + "-" + std::to_string(r.arm_prime) + "]";
  } else {
    estimand = "cate";
  }
  std::printf("%-12s %12.6f %10.6f [%10.6f, %10.6f]  %s/%s K=%d seed=%llu\n",
              estimand.c_str(), r.point, se, r.ci_lo, r.ci_hi, r.estimator.c_str(),
              r.weight_kind.c_str(), r.folds,
              static_cast<unsigned long long>(r.seed));
}

nlohmann::json config_echo_json(const CLI::App* cmd, std::uint64_t seed) {
  nlohmann::json j = nlohmann::json::object();
  for (const CLI::Option* opt : cmd->get_options()) {
    if (opt->get_name().empty() || opt->get_name() == "--help") continue;
    if (!opt->results().empty()) {
      j[opt->get_name()] = opt->results().size() == 1 ? opt->results()[0]
                                                      : CLI::detail::join(opt->results());
    }
  }
  j["seed"] = seed;
  return j;
}

struct AnalyzeArgs {
  std::string data_path, propensity_path, predictions_path, out_path, weights_out;
  std::string weight = "smooth";
  std::string coarsen = "auto";
  std::string regressor = "knn", moment_regressor = "knn";
  int knn_k = 0;
  int arm = 0;
  std::string contrast;
  std::string cate_at;
  int folds = 2;
  int fewshot_m = 0, fewshot_B = 200;
  double alpha = 0.05;
  std::uint64_t seed = kDefaultSeed;
  int threads = 0;
  int arm_count = 2;
};

int run_analyze(const AnalyzeArgs& a, bool seed_given, const CLI::App* cmd) {
  const std::uint64_t seed = resolve_seed(a.seed, seed_given);
  std::printf("seed: %llu\n", static_cast<unsigned long long>(seed));

  calm::PropensitySpec prop = calm::PropensitySpec::from_json(read_file(a.propensity_path));
  calm::ColumnSchema schema;
  schema.arm_count = prop.arm_count();
  calm::RctDataset data = calm::load_dataset_file(a.data_path, schema, prop);
  calm::PredictionSet preds = calm::PredictionSet::load_jsonl_file(a.predictions_path);

  calm::EstimatorConfig cfg;
  cfg.folds = a.folds;
  cfg.weight = parse_weight(a.weight);
  if (a.coarsen == "quartile") cfg.coarsening = calm::Coarsening::quartile;
  else if (a.coarsen == "column") cfg.coarsening = calm::Coarsening::column;
  else if (a.coarsen != "auto") throw calm::DomainError("--coarsen expects auto|quartile|column");
  cfg.alpha = a.alpha;
  cfg.seed = seed;
  cfg.mean_reg.family = parse_family(a.regressor);
  cfg.moment_reg.family = parse_family(a.moment_regressor);
  if (a.knn_k > 0) {
    cfg.mean_reg.selection = calm::RegressorConfig::Selection::fixed;
    cfg.mean_reg.k = a.knn_k;
    cfg.moment_reg.selection = calm::RegressorConfig::Selection::fixed;
    cfg.moment_reg.k = a.knn_k;
  }

  int arm_t = 0, arm_tp = 0;
  if (!a.contrast.empty()) {
    if (std::sscanf(a.contrast.c_str(), "%d,%d", &arm_t, &arm_tp) != 2) {
      throw calm::DomainError("--contrast expects 't,t''");
    }
  }

  calm::EstimateReport report;
  if (!a.cate_at.empty()) {
    if (arm_t == 0) throw calm::DomainError("--cate-at requires --contrast");
    std::vector<double> xq;
    std::stringstream ss(a.cate_at);
    std::string item;
    while (std::getline(ss, item, ',')) xq.push_back(std::stod(item));
    calm::CateConfig cate;
    report = calm::estimate_cate_calm(data, preds, arm_t, arm_tp, xq, cate, cfg);
  } else if (a.fewshot_m > 0) {
    if (preds.mode() != calm::PredictionSet::Mode::few_shot) {
      throw calm::DomainError("few-shot analysis needs a few-shot predictions file");
    }
    if (arm_t != 0) {
      report = calm::estimate_ate_calm_fs_set(data, preds, arm_t, arm_tp, cfg);
    } else {
      report = calm::estimate_mu_calm_fs_set(data, preds, a.arm, cfg);
    }
  } else if (arm_t != 0) {
    report = cfg.weight == calm::WeightKind::zero
                 ? calm::estimate_ate_aipw(data, arm_t, arm_tp, cfg)
                 : calm::estimate_ate_calm(data, preds, arm_t, arm_tp, cfg);
  } else {
    const int arm = a.arm > 0 ? a.arm : 1;
    report = cfg.weight == calm::WeightKind::zero
                 ? calm::estimate_mu_aipw(data, arm, cfg)
                 : calm::estimate_mu_calm(data, preds, arm, cfg);
  }

  std::printf("%-12s %12s %10s %25s  %s\n", "estimand", "estimate", "se", "95% CI",
              "method");
  print_report_line(report);

  if (!a.out_path.empty()) {
    nlohmann::json j = nlohmann::json::parse(report.to_json());
    j["config"] = config_echo_json(cmd, seed);
    write_file(a.out_path, j.dump(2) + "\n");
  }
  if (!a.weights_out.empty()) {
    nlohmann::json j;
    j["config"] = config_echo_json(cmd, seed);
    if (!report.robust_weights.empty()) {
      nlohmann::json table = nlohmann::json::object();
      for (const auto& [code, omega] : report.robust_weights) {
        table[std::to_string(code)] = omega;
      }
      j["kind"] = "robust";
      j["stratum_table"] = table;
    } else {
      // Grid diagnostics: a whole-sample smooth weight evaluated at the
      // quantiles of the first coordinate, other coordinates at their median.
      const int arm = a.arm > 0 ? a.arm : (arm_t > 0 ? arm_t : 1);
      std::vector<std::uint32_t> everyone(data.n());
      for (std::size_t i = 0; i < data.n(); ++i) everyone[i] = static_cast<std::uint32_t>(i);
      const std::vector<double> ydag = preds.mode() == calm::PredictionSet::Mode::zero_shot
                                           ? preds.bind_zero_shot(data, arm)
                                           : std::vector<double>(data.n(), 0.0);
      calm::NuisanceEntry entry = calm::fit_fold_entry(
          data, everyone, arm, ydag, cfg.mean_reg, cfg.moment_reg, true, true, true,
          "all");
      std::vector<double> d_arm;
      for (std::size_t i = 0; i < data.n(); ++i) {
        if (data.t()[i] == arm) d_arm.push_back(ydag[i]);
      }
      calm::CalibrationWeights w =
          calm::weight_smooth(entry, calm::default_eps_nu(d_arm));
      std::vector<double> col(data.n());
      std::vector<double> grid_flat;
      for (int m = 0; m < 20; ++m) {
        const double q = 0.05 + 0.90 * m / 19.0;
        for (std::size_t j2 = 0; j2 < data.p(); ++j2) {
          for (std::size_t i = 0; i < data.n(); ++i) col[i] = data.x_row(i)[j2];
          grid_flat.push_back(calm::quantile(col, j2 == 0 ? q : 0.5));
        }
      }
      j = nlohmann::json::parse(calm::weights_to_json(w, grid_flat, data.p()));
      j["config"] = config_echo_json(cmd, seed);
    }
    write_file(a.weights_out, j.dump(2) + "\n");
  }
  return 0;
}

struct SimulateArgs {
  std::string dgp = "default";
  int R = 300;
  std::size_t n = 0;
  std::size_t p = 0;
  std::string rho;
  double delta = std::numeric_limits<double>::quiet_NaN();
  double tau0 = std::numeric_limits<double>::quiet_NaN();
  double tau1 = std::numeric_limits<double>::quiet_NaN();
  double quad = std::numeric_limits<double>::quiet_NaN();
  double sigma_y = std::numeric_limits<double>::quiet_NaN();
  int strata = -1;
  std::string estimators = "aipw,calm-zero";
  std::string estimand = "ate";
  int arm = 1;
  std::string contrast = "1,2";
  int fewshot_m = 10, fewshot_B = 200;
  double alpha = 0.05;
  std::string weight = "smooth";
  std::uint64_t seed = kDefaultSeed;
  int threads = 0;
  std::string out = "calm_sim";
  bool reduction = false;
};

int run_simulate(const SimulateArgs& a, bool seed_given, const CLI::App* cmd) {
  const std::uint64_t seed = resolve_seed(a.seed, seed_given);
  std::printf("seed: %llu\n", static_cast<unsigned long long>(seed));

  calm::DgpConfig dgp;
  if (a.dgp != "default") dgp = calm::dgp_from_json(read_file(a.dgp));
  if (dgp.predictor.rho_target.empty()) {
    dgp.predictor.rho_target.assign(static_cast<std::size_t>(dgp.arm_count), 0.8);
  }
  if (a.n > 0) dgp.n = a.n;
  if (a.p > 0) dgp.p = a.p;
  if (!a.rho.empty()) {
    dgp.predictor.rho_target.clear();
    std::stringstream ss(a.rho);
    std::string item;
    while (std::getline(ss, item, ',')) dgp.predictor.rho_target.push_back(std::stod(item));
    if (dgp.predictor.rho_target.size() == 1) {
      dgp.predictor.rho_target.assign(static_cast<std::size_t>(dgp.arm_count),
                                      dgp.predictor.rho_target[0]);
    }
  }
  if (!std::isnan(a.delta)) dgp.predictor.additive_bias = a.delta;
  if (!std::isnan(a.tau0)) dgp.tau0 = a.tau0;
  if (!std::isnan(a.tau1)) dgp.tau1 = a.tau1;
  if (!std::isnan(a.quad)) dgp.quad = a.quad;
  if (!std::isnan(a.sigma_y)) dgp.sigma_y = a.sigma_y;
  if (a.strata >= 0) dgp.strata_count = a.strata;
  dgp.validate();

  const std::string dgp_echo = calm::dgp_to_json(dgp);

  if (a.reduction) {
    calm::ReductionReport report =
        calm::variance_reduction_report(dgp, a.R, seed, a.threads);
    write_file(a.out + ".csv", "# dgp: " + dgp_echo + "\n" + report.to_csv());
    nlohmann::json j = nlohmann::json::parse(report.to_json());
    j["dgp"] = nlohmann::json::parse(dgp_echo);
    j["seed"] = seed;
    j["config"] = config_echo_json(cmd, seed);
    write_file(a.out + ".json", j.dump(2) + "\n");
    std::printf("wrote %s.csv and %s.json (%zu rows)\n", a.out.c_str(), a.out.c_str(),
                report.rows.size());
    return 0;
  }

  int arm_t = 1, arm_tp = 2;
  if (std::sscanf(a.contrast.c_str(), "%d,%d", &arm_t, &arm_tp) != 2) {
    throw calm::DomainError("--contrast expects 't,t''");
  }
  std::vector<calm::McEstimatorSpec> specs;
  std::stringstream ss(a.estimators);
  std::string name;
  while (std::getline(ss, name, ',')) {
    calm::McEstimatorSpec spec;
    if (name == "aipw") {
      spec.kind = calm::McEstimatorSpec::Kind::aipw;
    } else if (name == "calm-zero") {
      spec.kind = calm::McEstimatorSpec::Kind::calm_zero;
    } else if (name == "calm-fs") {
      spec.kind = calm::McEstimatorSpec::Kind::calm_fs;
    } else {
      throw calm::DomainError("unknown estimator '" + name +
                              "' (aipw|calm-zero|calm-fs)");
    }
    spec.estimand = a.estimand == "mu" ? calm::Estimand::mu_t : calm::Estimand::ate;
    spec.arm = a.estimand == "mu" ? a.arm : arm_t;
    spec.arm_prime = arm_tp;
    spec.est.alpha = a.alpha;
    spec.est.weight = parse_weight(a.weight);
    spec.fs.m = a.fewshot_m;
    spec.fs.B = a.fewshot_B;
    specs.push_back(spec);
  }

  const std::vector<calm::McMetrics> metrics =
      calm::run_monte_carlo_suite(dgp, specs, a.R, seed, a.threads);

  const std::string echo =
      "dgp: " + dgp_echo + " seed: " + std::to_string(seed) + " R: " + std::to_string(a.R);
  write_file(a.out + ".csv", calm::metrics_to_csv(metrics, echo));

  nlohmann::json j;
  j["dgp"] = nlohmann::json::parse(dgp_echo);
  j["seed"] = seed;
  j["R"] = a.R;
  j["config"] = config_echo_json(cmd, seed);
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& m : metrics) rows.push_back(nlohmann::json::parse(m.to_json()));
  j["metrics"] = rows;
  write_file(a.out + ".json", j.dump(2) + "\n");

  std::ostringstream reps;
  reps << "# " << echo << "\nestimator,estimand,replication,estimate,ci_lo,ci_hi\n";
  char buf[64];
  for (const auto& m : metrics) {
    for (std::size_t r = 0; r < m.estimates.size(); ++r) {
      reps << m.estimator << ',' << m.estimand << ',' << r;
      for (double v : {m.estimates[r], m.ci_lo[r], m.ci_hi[r]}) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        reps << ',' << buf;
      }
      reps << '\n';
    }
  }
  write_file(a.out + "_reps.csv", reps.str());

  std::printf("%-10s %-6s %8s %10s %10s %9s %9s\n", "estimator", "estimand", "n",
              "abs_bias", "sqrt_n_sd", "coverage", "ci_width");
  for (const auto& m : metrics) {
    std::printf("%-10s %-6s %8zu %10.5f %10.5f %9.4f %9.5f\n", m.estimator.c_str(),
                m.estimand.c_str(), m.n, m.abs_bias, m.sqrt_n_sd, m.coverage,
                m.mean_ci_width);
  }
  return 0;
}

struct EffArgs {
  std::string data_path, propensity_path, predictions_path, out_path;
  int arm = 1;
  int grid = 20;
  int coordinate = 0;
  double h = 0.0;
  double alpha = 0.05;
  int n_sim = 5000;
  std::string engine = "gaussian";
  std::uint64_t seed = kDefaultSeed;
};

int run_efftest(const EffArgs& a, bool seed_given, const CLI::App* cmd) {
  const std::uint64_t seed = resolve_seed(a.seed, seed_given);
  std::printf("seed: %llu\n", static_cast<unsigned long long>(seed));

  calm::PropensitySpec prop = calm::PropensitySpec::from_json(read_file(a.propensity_path));
  calm::ColumnSchema schema;
  schema.arm_count = prop.arm_count();
  calm::RctDataset data = calm::load_dataset_file(a.data_path, schema, prop);
  calm::PredictionSet preds = calm::PredictionSet::load_jsonl_file(a.predictions_path);

  calm::EffTestConfig cfg;
  cfg.grid_size = a.grid;
  cfg.coordinate = a.coordinate;
  cfg.h = a.h;
  cfg.alpha = a.alpha;
  cfg.n_sim = a.n_sim;
  cfg.seed = seed;
  cfg.engine = a.engine == "multiplier" ? calm::EffTestConfig::Engine::multiplier_bootstrap
                                        : calm::EffTestConfig::Engine::gaussian_sim;

  const calm::EffTestReport report = calm::sup_test(data, preds, a.arm, cfg);
  std::printf("t_stat:          %.6f\n", report.t_stat);
  std::printf("critical value:  %.6f (alpha = %.3f)\n", report.critical_value,
              report.alpha);
  std::printf("p value:         %.6f\n", report.p_value);
  std::printf("decision:        %s\n",
              report.reject ? "reject H0 (efficiency gain expected)"
                            : "fail to reject H0 (no detected gain)");
  if (!a.out_path.empty()) {
    nlohmann::json j = nlohmann::json::parse(report.to_json());
    j["config"] = config_echo_json(cmd, seed);
    write_file(a.out_path, j.dump(2) + "\n");
  }
  return report.reject ? 0 : 0;
}

struct AggArgs {
  std::string predictions_path, out_path;
};

int run_aggregate(const AggArgs& a, const CLI::App* cmd) {
  calm::PredictionSet preds = calm::PredictionSet::load_jsonl_file(a.predictions_path);
  if (preds.mode() != calm::PredictionSet::Mode::few_shot) {
    throw calm::DomainError("aggregate-predictions expects a few-shot predictions file");
  }
  const calm::PredictionSet agg = preds.aggregated();
  std::ostringstream out;
  nlohmann::json meta;
  meta["_meta"] = config_echo_json(cmd, 0);
  out << meta.dump() << '\n';
  agg.save_jsonl(out);
  write_file(a.out_path, out.str());
  std::printf("aggregated %d draws per key into %s\n", preds.B(), a.out_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CALM: calibrated counterfactual-prediction estimators for RCTs"};
  app.require_subcommand(1);

  AnalyzeArgs an;
  CLI::App* analyze = app.add_subcommand("analyze", "estimate mu_t / ATE / CATE from files");
  analyze->add_option("--data", an.data_path, "dataset CSV")->required();
  analyze->add_option("--propensity", an.propensity_path, "propensity JSON")->required();
  analyze->add_option("--predictions", an.predictions_path, "predictions JSONL")->required();
  analyze->add_option("--arm", an.arm, "arm for mu_t");
  analyze->add_option("--contrast", an.contrast, "t,t' for ATE");
  analyze->add_option("--cate-at", an.cate_at, "comma-separated x for CATE");
  analyze->add_option("--weight", an.weight, "smooth|robust|zero");
  analyze->add_option("--coarsen", an.coarsen, "auto|quartile|column strata rule");
  analyze->add_option("--folds", an.folds, "fold count K");
  analyze->add_option("--fewshot-m", an.fewshot_m, "few-shot demonstration size");
  analyze->add_option("--fewshot-B", an.fewshot_B, "few-shot resample count");
  analyze->add_option("--alpha", an.alpha, "CI level alpha");
  analyze->add_option("--regressor", an.regressor, "knn|kernel|stumps|linear");
  analyze->add_option("--moment-regressor", an.moment_regressor, "moment smoother family");
  analyze->add_option("--knn-k", an.knn_k, "fixed knn k (disables CV)");
  analyze->add_option("--out", an.out_path, "report JSON path");
  analyze->add_option("--export-weights", an.weights_out, "weights JSON path");
  analyze->add_option("--threads", an.threads, "worker cap");
  CLI::Option* an_seed = analyze->add_option("--seed", an.seed, "RNG seed");

  SimulateArgs si;
  CLI::App* simulate = app.add_subcommand("simulate", "Monte Carlo metrics on the synthetic DGP");
  simulate->add_option("--dgp", si.dgp, "'default' or a DGP JSON file");
  simulate->add_option("--R", si.R, "replications");
  simulate->add_option("--n", si.n, "sample size override");
  simulate->add_option("--p", si.p, "covariate dimension override");
  simulate->add_option("--rho", si.rho, "predictor correlation target(s)");
  simulate->add_option("--delta", si.delta, "predictor additive bias");
  simulate->add_option("--tau0", si.tau0, "homogeneous effect");
  simulate->add_option("--tau1", si.tau1, "effect heterogeneity slope");
  simulate->add_option("--quad", si.quad, "shared nonlinearity coefficient");
  simulate->add_option("--sigma-y", si.sigma_y, "outcome noise sd");
  simulate->add_option("--strata", si.strata, "DGP stratum count");
  simulate->add_option("--estimators", si.estimators, "comma list: aipw,calm-zero,calm-fs");
  simulate->add_option("--estimand", si.estimand, "mu|ate");
  simulate->add_option("--arm", si.arm, "arm for mu");
  simulate->add_option("--contrast", si.contrast, "t,t' for ate");
  simulate->add_option("--fewshot-m", si.fewshot_m, "few-shot m");
  simulate->add_option("--fewshot-B", si.fewshot_B, "few-shot B");
  simulate->add_option("--alpha", si.alpha, "CI level");
  simulate->add_option("--weight", si.weight, "smooth|robust|zero");
  simulate->add_option("--out", si.out, "output file prefix");
  simulate->add_option("--threads", si.threads, "worker cap (0 = cores)");
  simulate->add_flag("--reduction", si.reduction, "per-stratum variance reduction report");
  CLI::Option* si_seed = simulate->add_option("--seed", si.seed, "RNG seed");

  EffArgs ef;
  CLI::App* efftest = app.add_subcommand("test-efficiency", "sup-test of zero conditional covariance");
  efftest->add_option("--data", ef.data_path, "dataset CSV")->required();
  efftest->add_option("--propensity", ef.propensity_path, "propensity JSON")->required();
  efftest->add_option("--predictions", ef.predictions_path, "predictions JSONL")->required();
  efftest->add_option("--arm", ef.arm, "treatment arm");
  efftest->add_option("--grid", ef.grid, "grid size");
  efftest->add_option("--coordinate", ef.coordinate, "covariate coordinate");
  efftest->add_option("--bandwidth", ef.h, "bandwidth (0 = rule of thumb)");
  efftest->add_option("--alpha", ef.alpha, "test level");
  efftest->add_option("--n-sim", ef.n_sim, "Gaussian simulation draws");
  efftest->add_option("--engine", ef.engine, "gaussian|multiplier");
  efftest->add_option("--out", ef.out_path, "report JSON path");
  CLI::Option* ef_seed = efftest->add_option("--seed", ef.seed, "RNG seed");

  AggArgs ag;
  CLI::App* aggregate = app.add_subcommand("aggregate-predictions",
                                           "collapse few-shot draws to their means");
  aggregate->add_option("--predictions", ag.predictions_path, "few-shot JSONL")->required();
  aggregate->add_option("--out", ag.out_path, "aggregated JSONL path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (analyze->parsed()) return run_analyze(an, an_seed->count() > 0, analyze);
    if (simulate->parsed()) return run_simulate(si, si_seed->count() > 0, simulate);
    if (efftest->parsed()) return run_efftest(ef, ef_seed->count() > 0, efftest);
    if (aggregate->parsed()) return run_aggregate(ag, aggregate);
  } catch (const calm::ParseError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return 2;
  } catch (const calm::DomainError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return 2;
  } catch (const calm::MissingPredictionError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return 2;
  } catch (const calm::UnstableQueryError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return 2;
  } catch (const calm::OutOfSupportError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "estimation error: %s\n", e.what());
    return 3;
  }
  return 0;
}
