#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "calm/errors.hpp"

namespace calm {

/// Known assignment mechanism: either constant per-arm probabilities or a
/// stratum table keyed by the coarsened covariate code. Probabilities are
/// required inputs and are validated, never estimated or clipped.
class PropensitySpec {
public:
  static PropensitySpec constant(std::vector<double> e_by_arm, double eps_e = 0.01);
  static PropensitySpec stratified(std::map<int, std::vector<double>> table,
                                   double eps_e = 0.01);
  static PropensitySpec from_json(const std::string& text, double eps_e = 0.01);

  int arm_count() const { return arm_count_; }
  bool is_stratified() const { return !table_.empty(); }

  /// P(T = arm | stratum). `arm` is 1-based. Stratified specs require xc.
  double e(int arm, std::optional<int> x_coarse = std::nullopt) const;

  /// Propensity-score adjustment weight 1/e_t - 1; strictly positive.
  double lambda(int arm, std::optional<int> x_coarse = std::nullopt) const;

  std::string to_json() const;

private:
  PropensitySpec() = default;
  int arm_count_ = 0;
  std::vector<double> constant_;             // empty when stratified
  std::map<int, std::vector<double>> table_; // stratum -> per-arm probabilities
};

struct SubjectView {
  std::string_view id;
  std::span<const double> x;
  std::string_view z;
  /// Position within the owning dataset; npos for free-standing queries.
  std::size_t index = static_cast<std::size_t>(-1);
};

/// Immutable experiment table. Columnar storage; safe to share across threads.
class RctDataset {
public:
  RctDataset(std::vector<std::string> ids, std::vector<double> y, std::vector<int> t,
             std::vector<double> x_rowmajor, std::size_t p,
             std::optional<std::vector<int>> x_coarse, std::vector<std::string> z,
             int arm_count, PropensitySpec propensity);

  std::size_t n() const { return ids_.size(); }
  std::size_t p() const { return p_; }
  int arm_count() const { return arm_count_; }

  const std::vector<std::string>& ids() const { return ids_; }
  const std::vector<double>& y() const { return y_; }
  const std::vector<int>& t() const { return t_; }
  const std::vector<std::string>& z() const { return z_; }
  bool has_x_coarse() const { return x_coarse_.has_value(); }
  const std::vector<int>& x_coarse() const { return *x_coarse_; }

  std::span<const double> x_row(std::size_t i) const {
    return {x_.data() + i * p_, p_};
  }
  const std::vector<double>& x_flat() const { return x_; }

  SubjectView subject(std::size_t i) const {
    return {ids_[i], x_row(i), z_[i], i};
  }

  const PropensitySpec& propensity() const { return propensity_; }

  /// e_{arm}(X_i) for this subject, resolving the stratum when needed.
  double e_of(std::size_t i, int arm) const;
  double lambda_of(std::size_t i, int arm) const;

  std::vector<std::uint32_t> arm_members(int arm) const;

private:
  std::vector<std::string> ids_;
  std::vector<double> y_;
  std::vector<int> t_;
  std::vector<double> x_;  // n * p row-major
  std::size_t p_;
  std::optional<std::vector<int>> x_coarse_;
  std::vector<std::string> z_;
  int arm_count_;
  PropensitySpec propensity_;
};

/// Column-name configuration for CSV ingestion. x columns are discovered as
/// x_prefix followed by an integer (x1..xp) unless listed explicitly.
struct ColumnSchema {
  int arm_count = 2;
  std::string id_col = "id";
  std::string y_col = "y";
  std::string t_col = "t";
  std::string x_prefix = "x";
  std::vector<std::string> x_cols;  // explicit override of discovery
  std::string xc_col = "xc";        // used when present in the header
  std::string z_col = "z";          // used when present in the header
  double eps_e = 0.01;
};

RctDataset load_dataset(std::istream& source, const ColumnSchema& schema,
                        PropensitySpec propensity);
RctDataset load_dataset_file(const std::string& path, const ColumnSchema& schema,
                             PropensitySpec propensity);

/// Full-precision CSV emit; load_dataset(save_dataset_csv(d)) == d.
std::string save_dataset_csv(const RctDataset& d);

struct FoldAssignment {
  std::vector<int> fold_of;  // subject index -> fold label in 1..K
  int K = 0;
  std::uint64_t seed = 0;

  std::vector<std::vector<std::uint32_t>> members() const;
  /// Designated training fold for subjects evaluated in fold f: the cyclic
  /// predecessor. For K=2 this is the other fold; for K=3 it reproduces the
  /// rotation (l1,l2,l3) with l2 = train and l3 = evaluate.
  int train_fold_for(int eval_fold) const {
    return (eval_fold + K - 2) % K + 1;
  }
  /// Demonstration-donor fold for few-shot evaluation in fold f.
  int donor_fold_for(int eval_fold) const {
    return train_fold_for(train_fold_for(eval_fold));
  }
};

FoldAssignment split_folds(std::size_t n, int K, std::uint64_t seed);

/// Stratum codes for robust calibration: the xc column when the dataset has
/// one, otherwise per-coordinate quartile bins on the first min(p, 2)
/// coordinates, cross-producted (at most 16 strata).
std::vector<int> coarsen_strata(const RctDataset& d);
std::vector<int> quartile_strata(const RctDataset& d);

}  // namespace calm
