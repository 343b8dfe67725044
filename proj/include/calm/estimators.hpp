#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calm/calibration.hpp"
#include "calm/data_model.hpp"
#include "calm/nuisance.hpp"
#include "calm/predictor.hpp"
#include "calm/rng.hpp"
#include "calm/stats.hpp"

namespace calm {

enum class Estimand { mu_t, ate, cate_at_x };

const char* estimand_name(Estimand e);

struct EstimateReport {
  Estimand estimand = Estimand::mu_t;
  int arm = 0;
  int arm_prime = 0;  // contrast arm for ate / cate
  double point = 0.0;
  /// n * Var of the point estimate: the Step-5 V-hat for mu/ate, and the
  /// analogous n * sum w_i^2 (...)^2 for cate, so that the CI is always
  /// point +- z * sqrt(variance / n).
  double variance = 0.0;
  std::size_t n = 0;
  double alpha = 0.05;
  double ci_lo = 0.0, ci_hi = 0.0;
  std::vector<double> influence;

  // Config echo.
  std::string estimator;    // aipw | calm-zero | calm-fs
  std::string weight_kind;  // zero | smooth | robust | ate
  int folds = 0;
  std::uint64_t seed = 0;
  int fs_m = 0, fs_B = 0;

  // CATE extras.
  std::vector<double> x_query;
  double bandwidth = 0.0;
  double ess = 0.0;

  /// Robust runs only: stratum -> calibration weight, averaged across folds.
  std::map<int, double> robust_weights;

  std::string to_json() const;
};

/// Injected nuisance functions; any non-null member bypasses the fit.
struct NuisanceOverride {
  std::function<double(int arm, std::span<const double> x)> mu;
  std::function<double(int arm, std::span<const double> x)> mu_dagger;
  std::function<double(int arm, std::span<const double> x)> omega;
};

enum class Coarsening {
  auto_detect,  // xc column when present, else quartile bins
  quartile,     // always the quartile rule
  column,       // require the xc column
};

struct EstimatorConfig {
  int folds = 2;  // zero-shot default; the few-shot path always uses 3
  WeightKind weight = WeightKind::smooth;
  RegressorConfig mean_reg;
  RegressorConfig moment_reg;
  double alpha = 0.05;
  std::uint64_t seed = 0;
  double eps_nu_scale = 1e-8;
  Coarsening coarsening = Coarsening::auto_detect;
  NuisanceOverride inject;
};

struct FewShotConfig {
  int m = 10;
  int B = 200;
  /// Demo-resampling stream; defaults to a stream derived from the estimator
  /// seed so a run is fully reproducible from one seed.
  std::optional<std::uint64_t> aggregation_seed;
};

/// Step 4 influence value. mu_hat, mu_dagger_hat and omega_hat are the
/// cross-fitted functions already evaluated at this subject's x.
double influence_zero_shot(double y, int t_obs, double y_dagger, int arm, double e_t,
                           double mu_hat, double mu_dagger_hat, double omega_hat);

EstimateReport estimate_mu_calm(const RctDataset& data, const PredictionSet& predictions,
                                int arm, const EstimatorConfig& config);
/// Fold-explicit variant (property tests; also the K=3 zero-shot analogue).
EstimateReport estimate_mu_calm_with_folds(const RctDataset& data,
                                           std::span<const double> y_dagger, int arm,
                                           const EstimatorConfig& config,
                                           const FoldAssignment& folds);

/// CALM with omega forced to zero; never touches predictions.
EstimateReport estimate_mu_aipw(const RctDataset& data, int arm,
                                const EstimatorConfig& config);

EstimateReport estimate_mu_calm_fs(const RctDataset& data, const Predictor& predictor,
                                   int arm, const FewShotConfig& few_shot,
                                   const EstimatorConfig& config);

/// Few-shot estimation from a stored prediction set (file replay). Draws must
/// be tagged with donor folds matching split_folds(n, 3, config.seed).
EstimateReport estimate_mu_calm_fs_set(const RctDataset& data,
                                       const PredictionSet& few_shot_set, int arm,
                                       const EstimatorConfig& config);

EstimateReport estimate_ate_calm(const RctDataset& data, const PredictionSet& predictions,
                                 int arm_t, int arm_t_prime,
                                 const EstimatorConfig& config);
EstimateReport estimate_ate_calm_with_folds(const RctDataset& data,
                                            std::span<const double> y_dagger_t,
                                            std::span<const double> y_dagger_t_prime,
                                            int arm_t, int arm_t_prime,
                                            const EstimatorConfig& config,
                                            const FoldAssignment& folds);
EstimateReport estimate_ate_aipw(const RctDataset& data, int arm_t, int arm_t_prime,
                                 const EstimatorConfig& config);
EstimateReport estimate_ate_calm_fs(const RctDataset& data, const Predictor& predictor,
                                    int arm_t, int arm_t_prime,
                                    const FewShotConfig& few_shot,
                                    const EstimatorConfig& config);
EstimateReport estimate_ate_calm_fs_set(const RctDataset& data,
                                        const PredictionSet& few_shot_set, int arm_t,
                                        int arm_t_prime, const EstimatorConfig& config);

struct CateConfig {
  KernelKind kernel = KernelKind::gaussian;
  /// Absolute bandwidth applied to every coordinate; 0 selects the
  /// rule-of-thumb 1.06 sd_j n^{-1/(p+4)} shrunk by n^{-undersmooth}.
  double bandwidth = 0.0;
  double undersmooth = 0.05;
  double min_ess = 10.0;
};

EstimateReport estimate_cate_calm(const RctDataset& data, const PredictionSet& predictions,
                                  int arm_t, int arm_t_prime,
                                  std::span<const double> x_query, const CateConfig& cate,
                                  const EstimatorConfig& config);

/// Conditional-moment closures of a known data-generating process, enough to
/// evaluate the closed-form asymptotic variances by Monte Carlo integration
/// over X (never over data).
struct DgpMoments {
  int arm_count = 2;
  std::function<void(Rng&, std::vector<double>&)> draw_x;
  std::size_t p = 0;
  std::function<double(int arm, std::span<const double>)> mu;
  std::function<double(int arm, std::span<const double>)> var_y;
  std::function<double(int arm, std::span<const double>)> e;
  std::function<double(int arm, std::span<const double>)> rho;
  // Cross-arm structure for the ATE system.
  std::function<double(int a, int b, std::span<const double>)> cov_y;       // Cov(Y(a), Y(b) | x)
  std::function<double(int arm, std::span<const double>)> var_dagger;       // Var(Y+(t) | x)
  std::function<double(int a, int b, std::span<const double>)> cov_dagger;  // Cov(Y+(a), Y+(b) | x)
  std::function<double(int a, int b, std::span<const double>)> cov_dagger_y;// Cov(Y+(a), Y(b) | x)
  std::function<double(std::span<const double>)> density;                   // f_X(x), for CATE
};

struct TheoreticalVariance {
  double v_aipw = 0.0;
  double v_calm = 0.0;
  double mean_sq_term = 0.0;    // E (mu_t(X) - mu_t)^2, or the tau analogue
  double var_over_e_term = 0.0; // E Var(Y|X)/e (both arms summed for ate)
  double reduction_term = 0.0;  // v_aipw - v_calm
  // CATE extras (Corollary-3 constants at the query point).
  double kernel_l2sq = 0.0;
  double density_at_x = 0.0;
  double v_calm_at_x = 0.0;
  double v_aipw_at_x = 0.0;
};

TheoreticalVariance theoretical_variance_mu(const DgpMoments& dgp, int arm,
                                            std::size_t draws = 1000000,
                                            std::uint64_t seed = 1);
TheoreticalVariance theoretical_variance_ate(const DgpMoments& dgp, int arm_t,
                                             int arm_t_prime,
                                             std::size_t draws = 1000000,
                                             std::uint64_t seed = 1);
TheoreticalVariance theoretical_variance_cate(const DgpMoments& dgp, int arm_t,
                                              int arm_t_prime,
                                              std::span<const double> x_query,
                                              KernelKind kernel);

}  // namespace calm
