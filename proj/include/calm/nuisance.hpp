#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <vector>

#include "calm/data_model.hpp"

namespace calm {

struct RegressorConfig {
  enum class Family { knn, kernel_smoother, stump_ensemble, linear };
  enum class Selection { fixed, cross_validated };

  Family family = Family::knn;
  Selection selection = Selection::cross_validated;
  int k = 25;                    // knn neighbor count when selection == fixed
  double bandwidth_scale = 1.06; // kernel smoother rule-of-thumb multiplier
  int tree_count = 300;          // stump ensemble rounds
  double shrinkage = 0.1;        // stump ensemble learning rate

  void validate() const;
};

using MeanFn = std::function<double(std::span<const double>)>;

/// Several conditional-mean smoothers sharing one training design. For knn
/// this shares standardization, the CV split, and the sorted-neighbor pass,
/// so adding responses is cheap; evaluation computes the neighbor order once
/// per query and serves every response from prefix means.
class SmootherSet {
public:
  static std::shared_ptr<SmootherSet> create(std::vector<double> x_rowmajor,
                                             std::size_t n, std::size_t p,
                                             RegressorConfig config);
  ~SmootherSet();

  /// Fits hyperparameters for this response now; returns a handle.
  int add_response(std::vector<double> r);
  /// knn only: registers the response with an explicit neighbor count.
  /// Conditional-moment ratios use this so every moment in a difference is
  /// computed on one shared neighborhood (a proper local sample moment).
  int add_response_fixed_k(std::vector<double> r, int k);
  /// The k the configured selection rule would pick for this response.
  int select_k(const std::vector<double>& r);

  std::size_t n_train() const { return n_; }
  std::size_t response_count() const;
  int chosen_k(int handle) const;  // knn only; 0 otherwise

  /// Evaluates every registered response at q; out must have response_count()
  /// slots.
  void predict_all(std::span<const double> q, double* out) const;
  double predict_one(int handle, std::span<const double> q) const;

  /// Self-contained closure for one response (keeps this set alive).
  MeanFn fn(int handle) const;

private:
  SmootherSet(std::vector<double> x, std::size_t n, std::size_t p, RegressorConfig cfg);
  struct Impl;
  std::shared_ptr<Impl> impl_;
  std::size_t n_ = 0;
};

/// Fits E[r | x] with the configured family. knn predictions are means of the
/// k nearest responses under Euclidean distance on standardized coordinates,
/// ties broken by training index; k >= n degenerates to the global mean.
MeanFn fit_conditional_mean(std::vector<double> x_rowmajor, std::size_t n, std::size_t p,
                            std::vector<double> r, const RegressorConfig& config);

/// Conditional second moments for calibration, all smoothed among the given
/// (arm-t) samples:
///   gamma(x) = m[y yd](x) - m[y](x) m[yd](x),
///   nu(x)    = max(0, m[yd^2](x) - m[yd](x)^2).
std::pair<MeanFn, MeanFn> fit_conditional_second_moments(
    std::vector<double> x_rowmajor, std::size_t n, std::size_t p,
    std::span<const double> y, std::span<const double> y_dagger,
    const RegressorConfig& config);

/// Cross-fitted nuisance functions for one arm. Entries are keyed by the
/// training fold; downstream evaluation always pulls the entry for the fold
/// that does NOT contain the evaluated subject (FoldAssignment::train_fold_for).
struct NuisanceEntry {
  MeanFn mu_hat;         // trained on arm-t subjects of the fold, response Y
  MeanFn mu_dagger_hat;  // trained on all subjects of the fold, response Y+
  MeanFn gamma_hat;      // optional conditional covariance (arm-t subjects)
  MeanFn nu_hat;         // optional conditional variance of Y+, floored at 0

  // Batched internals shared with estimators; null for non-knn paths is fine,
  // the MeanFn handles above are always valid.
  std::shared_ptr<SmootherSet> arm_set;
  int h_y = -1, h_d = -1, h_yd = -1, h_dd = -1;
  std::shared_ptr<SmootherSet> all_set;
  int h_dag = -1;
};

class NuisanceBundle {
public:
  const NuisanceEntry& at(int fold, int arm) const;
  NuisanceEntry& put(int fold, int arm);
  bool has(int fold, int arm) const;

private:
  std::map<std::pair<int, int>, NuisanceEntry> entries_;
};

/// Fits the nuisance functions of one training fold. mu_hat is trained on the
/// fold's arm-t subjects (response Y), mu_dagger_hat on all of the fold's
/// subjects (response Y+, which exists for everyone); second moments are
/// conditioned on T = t and use arm-t subjects only.
NuisanceEntry fit_fold_entry(const RctDataset& data,
                             std::span<const std::uint32_t> fold_members, int arm,
                             std::span<const double> y_dagger,
                             const RegressorConfig& mean_config,
                             const RegressorConfig& moment_config, bool with_mu,
                             bool with_mu_dagger, bool with_second_moments,
                             const std::string& fold_label);

/// Step 3 cross-fitting: fit_fold_entry applied to every fold.
NuisanceBundle cross_fit(const RctDataset& data, const FoldAssignment& folds,
                         std::span<const double> y_dagger, int arm,
                         const RegressorConfig& mean_config,
                         const RegressorConfig& moment_config,
                         bool with_second_moments, bool with_mu_dagger = true);

}  // namespace calm
