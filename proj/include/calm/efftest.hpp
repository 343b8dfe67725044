#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "calm/data_model.hpp"
#include "calm/predictor.hpp"
#include "calm/stats.hpp"

namespace calm {

/// Kernel estimate of gamma_t(x) = Cov(Y, Y+(t) | T=t, X=x) at one point,
/// with the plug-in standard error of sqrt(n_t h) * gamma_hat(x).
struct GammaAtX {
  double gamma = 0.0;
  double sigma = 0.0;
};

GammaAtX kernel_gamma(std::span<const double> x_reduced, std::span<const double> y,
                      std::span<const double> y_dagger, double x, double h,
                      KernelKind kernel = KernelKind::gaussian);

struct EffTestConfig {
  int coordinate = 0;   // multivariate x is reduced to this coordinate
  int grid_size = 20;   // equispaced quantiles q = 0.05..0.95 when grid empty
  std::vector<double> grid;  // explicit grid override
  double h = 0.0;       // 0 -> 1.06 sd n_t^{-1/5} * n_t^{-0.1} undersmoothing
  double alpha = 0.05;
  int n_sim = 5000;
  std::uint64_t seed = 0;
  KernelKind kernel = KernelKind::gaussian;
  enum class Engine { gaussian_sim, multiplier_bootstrap };
  Engine engine = Engine::gaussian_sim;
};

struct EffTestReport {
  std::vector<double> grid;
  std::vector<double> gamma_hat;
  std::vector<double> sigma_hat;
  std::vector<double> corr;  // row-major M x M correlation of the plug-in influence
  double t_stat = 0.0;
  double critical_value = 0.0;
  double p_value = 1.0;
  bool reject = false;
  double h = 0.0;
  int n_sim = 0;
  double alpha = 0.05;
  std::size_t n_arm = 0;
  std::string engine;

  std::string to_json() const;
};

/// Sup-test of H0: gamma_t(x) = 0 for all x. The critical value is the
/// empirical (1 - alpha) quantile of sup |G| over simulated G ~ N(0, R_hat),
/// where R_hat is the correlation matrix of the plug-in influence psi_hat
/// across the grid (eigenvalues clipped at zero when needed).
EffTestReport sup_test(const RctDataset& data, const PredictionSet& predictions,
                       int arm, const EffTestConfig& config);

EffTestReport sup_test(const RctDataset& data, std::span<const double> y_dagger,
                       int arm, const EffTestConfig& config);

}  // namespace calm
