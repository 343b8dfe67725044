#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "calm/data_model.hpp"
#include "calm/nuisance.hpp"

namespace calm {

enum class WeightKind { smooth, robust, ate_vector, zero };

const char* weight_kind_name(WeightKind k);

/// Relative variance floor: weights are forced to 0 wherever the variance
/// denominator falls below eps_nu (the rho = 0 convention).
double default_eps_nu(std::span<const double> y_dagger_arm, double scale = 1e-8);

struct AteWeights {
  double w_t = 0.0;
  double w_t_prime = 0.0;
  bool ridge_used = false;
  double residual_norm = 0.0;  // || Sigma * w - cov || of the solve actually used
};

/// Solves the 2x2 system Sigma * w = cov with a ridge fallback when the
/// condition number exceeds 1e8 (or the matrix is not positive definite).
/// The ridge adds 1e-6 * trace / 2 to the diagonal.
AteWeights solve_ate_system(double s11, double s12, double s22, double c1, double c2);

struct CalibrationWeights {
  WeightKind kind = WeightKind::zero;
  double eps_nu = 0.0;

  MeanFn smooth;                              // x -> omega
  std::map<int, double> robust_table;         // stratum -> omega
  std::function<AteWeights(std::span<const double>)> ate;

  /// Robust lookup; strata unseen at estimation time get weight 0.
  double robust_at(int stratum, bool* missing = nullptr) const;
};

/// Plug-in smooth weight: omega(x) = gamma(x) / nu(x) when nu(x) >= eps_nu,
/// else 0. Requires gamma_hat and nu_hat in the entry.
CalibrationWeights weight_smooth(const NuisanceEntry& entry, double eps_nu);

/// Stratum-wise robust weight over the weight-estimation fold:
///   omega_R(s) = sum lambda_t (Y - mu)(Y+ - mu+) / sum lambda_t (Y+ - mu+)^2
/// over arm-t members of the fold with stratum code s; denominators below
/// eps_nu give weight 0.
CalibrationWeights weight_robust(const RctDataset& data,
                                 std::span<const std::uint32_t> fold_members, int arm,
                                 std::span<const int> strata,
                                 const std::function<double(std::span<const double>)>& mu_hat,
                                 const std::function<double(std::span<const double>)>& mu_dagger_hat,
                                 std::span<const double> y_dagger, double eps_nu);

/// ATE weight system over the training fold (all subjects):
///   V = (sqrt(lambda_t) Y+(t), sqrt(lambda_t') Y+(t'))',
///   Z = sqrt(lambda_t) 1{T=t}/e_t Y + sqrt(lambda_t') 1{T=t'}/e_t' Y,
/// conditional moments smoothed by the regressor config, solved pointwise
/// with the ridge fallback.
CalibrationWeights weight_ate(const RctDataset& data,
                              std::span<const std::uint32_t> fold_members, int arm_t,
                              int arm_t_prime, std::span<const double> y_dagger_t,
                              std::span<const double> y_dagger_t_prime,
                              const RegressorConfig& moment_config);

/// Diagnostics export: stratum table (robust) or grid evaluation (smooth/ate).
std::string weights_to_json(const CalibrationWeights& w,
                            std::span<const double> grid_flat, std::size_t p);

}  // namespace calm
