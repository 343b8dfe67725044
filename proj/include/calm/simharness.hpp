#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calm/data_model.hpp"
#include "calm/estimators.hpp"
#include "calm/predictor.hpp"

namespace calm {

/// Parametric synthetic RCT with known ground truth. Outcomes follow
///   Y(t) = beta_t' x + (tau0 + tau1 x_1) 1{t=1} + theta_t g + sigma_y eps_t,
/// with x ~ N(0, I_p), latent g ~ N(0, 1) delivered to predictors through the
/// z payload (stringified), and independent per-arm noise. Predictions come
/// from the synthetic predictor with the configured quality knobs.
struct DgpConfig {
  std::size_t n = 2000;
  std::size_t p = 2;
  int arm_count = 2;
  double e1 = 0.5;  // P(T = 1); remaining mass is spread evenly over arms 2..k
  std::vector<std::vector<double>> beta;  // per arm; empty -> one seeded sphere draw
  double beta_scale = 1.0;
  double tau0 = 1.0;
  double tau1 = 0.0;  // tau(x) = tau0 + tau1 x_1 between arms 1 and 2
  double quad = 0.0;  // shared nonlinearity: + quad (x_1^2 - 1) in every arm
  std::vector<double> theta;  // per arm latent loading; empty -> all 1.0
  double sigma_y = 1.0;
  int strata_count = 0;  // 0 = no x_coarse column; else quantile bins of x_1
  SyntheticPredictorConfig predictor;
  std::uint64_t seed = 20240501;  // config-level seed (beta draw, truth record)
  std::size_t integration_draws = 1000000;

  void validate() const;
};

struct TruthRecord {
  std::vector<double> mu_pop;  // per arm, by 10^6-draw integration
  double ate = 0.0;            // arms (1, 2)
  std::vector<std::vector<double>> beta;  // resolved coefficients
  DgpMoments moments;
  std::function<double(std::span<const double>)> tau_at;
  std::size_t integration_draws = 0;
};

struct GeneratedTrial {
  RctDataset data;
  PredictionSet predictions;  // zero-shot, both arms, every subject
  TruthRecord truth;
  std::shared_ptr<SyntheticPredictor> predictor;  // for few-shot aggregation
};

GeneratedTrial generate_trial(const DgpConfig& config, std::uint64_t seed);

/// Deterministic stratum code of the DGP (quantile bins of x_1).
int dgp_stratum(const DgpConfig& config, std::span<const double> x);

/// Conditional-moment closures matching generate_trial exactly.
DgpMoments moments_of(const DgpConfig& config);

/// Population values integrated over fresh X draws (never trial data).
TruthRecord truth_record(const DgpConfig& config);

struct McEstimatorSpec {
  enum class Kind { aipw, calm_zero, calm_fs };
  Kind kind = Kind::calm_zero;
  Estimand estimand = Estimand::mu_t;
  int arm = 1;
  int arm_prime = 2;
  EstimatorConfig est;
  FewShotConfig fs;

  std::string name() const;
};

struct McMetrics {
  std::string estimator;
  std::string estimand;
  std::size_t n = 0;
  int replications = 0;
  double truth = 0.0;
  double mean_estimate = 0.0;
  double abs_bias = 0.0;
  double sqrt_n_sd = 0.0;
  double coverage = 0.0;
  double coverage_se = 0.0;
  double mean_ci_width = 0.0;
  int failures = 0;
  std::vector<double> estimates;  // per successful replication, in rep order
  std::vector<double> ci_lo, ci_hi;

  std::string to_json() const;
};

/// R independent trials; per-replication seeds derive from base_seed, so the
/// result is bitwise identical for any thread count. Estimator failures are
/// recorded and excluded; more than 5% failures is a harness error.
std::vector<McMetrics> run_monte_carlo_suite(const DgpConfig& dgp,
                                             std::span<const McEstimatorSpec> specs,
                                             int R, std::uint64_t base_seed,
                                             int threads = 0);

McMetrics run_monte_carlo(const DgpConfig& dgp, const McEstimatorSpec& spec, int R,
                          std::uint64_t base_seed, int threads = 0);

struct StratumReductionRow {
  int stratum = -1;  // -1 = all subjects
  double mean_count = 0.0;
  double omega_arm_t = 0.0;        // mean robust weight across replications
  double omega_arm_t_prime = 0.0;
  double var_aipw = 0.0;
  double var_calm = 0.0;
  double reduction_pct = 0.0;
  int replications = 0;
};

struct ReductionReport {
  std::vector<StratumReductionRow> rows;  // strata first, global row last
  std::vector<std::string> notes;         // omitted-stratum notes
  std::string to_json() const;
  std::string to_csv() const;
};

/// Per-stratum calibration-weight summary and percent variance reduction of
/// robust-weight CALM over AIPW for the (1,2) contrast.
ReductionReport variance_reduction_report(const DgpConfig& dgp, int R,
                                          std::uint64_t base_seed, int threads = 0);

/// CSV emit for the metrics table; one row per metrics entry, config echoed
/// in '#' comment lines.
std::string metrics_to_csv(std::span<const McMetrics> metrics,
                           const std::string& config_echo);

std::string dgp_to_json(const DgpConfig& config);
DgpConfig dgp_from_json(const std::string& text);

}  // namespace calm
