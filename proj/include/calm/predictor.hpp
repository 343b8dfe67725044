#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calm/data_model.hpp"

namespace calm {

struct DemoExample {
  std::span<const double> x;
  std::string_view z;
  double y = 0.0;
};

/// Counterfactual prediction source. Implementations must be deterministic
/// given their seed and the query, and safe for concurrent read-only use.
class Predictor {
public:
  virtual ~Predictor() = default;
  virtual double predict(const SubjectView& subject, int arm,
                         std::span<const DemoExample> demos = {}) const = 0;
};

/// Per-subject, per-arm counterfactual predictions; the few-shot variant adds
/// per-resample draws tagged by donor fold.
class PredictionSet {
public:
  enum class Mode { zero_shot, few_shot };

  static PredictionSet zero_shot();
  static PredictionSet few_shot(int m, int B);

  Mode mode() const { return mode_; }
  int B() const { return B_; }
  int m() const { return m_; }
  bool empty() const { return zero_.empty() && few_.empty(); }

  void set_zero_shot(const std::string& id, int arm, double value);
  std::optional<double> zero_shot_value(const std::string& id, int arm) const;

  /// Stores all B draws at once; partial draw sets are rejected.
  void set_few_shot_draws(const std::string& id, int arm, int donor_fold,
                          std::vector<double> draws);
  const std::vector<double>* few_shot_draws(const std::string& id, int arm,
                                            int donor_fold) const;
  std::optional<double> few_shot_mean(const std::string& id, int arm,
                                      int donor_fold) const;

  /// JSON lines: {"id":...,"arm":...,"value":...} or
  /// {"id":...,"arm":...,"donor_fold":...,"b":...,"value":...}.
  static PredictionSet load_jsonl(std::istream& in);
  static PredictionSet load_jsonl_file(const std::string& path);
  void save_jsonl(std::ostream& out) const;

  /// Collapses few-shot draws to their per-(id, arm, donor_fold) means.
  PredictionSet aggregated() const;

  /// Flat value-per-subject view for one arm; throws MissingPredictionError
  /// naming the first uncovered subject.
  std::vector<double> bind_zero_shot(const RctDataset& d, int arm) const;
  std::vector<double> bind_few_shot_means(const RctDataset& d, int arm, int donor_fold,
                                          std::span<const std::uint32_t> subjects) const;

private:
  Mode mode_ = Mode::zero_shot;
  int B_ = 0;
  int m_ = 0;
  std::map<std::pair<std::string, int>, double> zero_;
  struct FewKey {
    std::string id;
    int arm;
    int donor_fold;
    bool operator<(const FewKey& o) const {
      if (id != o.id) return id < o.id;
      if (arm != o.arm) return arm < o.arm;
      return donor_fold < o.donor_fold;
    }
  };
  std::map<FewKey, std::vector<double>> few_;
};

/// Replays stored zero-shot predictions; demos are ignored.
class FilePredictor : public Predictor {
public:
  explicit FilePredictor(PredictionSet values);
  double predict(const SubjectView& subject, int arm,
                 std::span<const DemoExample> demos = {}) const override;

private:
  PredictionSet values_;
};

/// Quality knobs for the synthetic oracle: the emitted prediction is
///   Y+(t) = mu_t(x) + delta + a * (Y(t) - mu_t(x)) + b * eta,
/// with (a, b) solved so that corr(Y(t), Y+(t) | X) = rho_target and the
/// conditional sd of Y+(t) equals noise_sd. noise_sd < 0 means "match the
/// outcome's conditional sd"; noise_sd == 0 degenerates to the exact
/// conditional mean (plus delta).
struct SyntheticPredictorConfig {
  std::vector<double> rho_target;                     // per arm, index arm-1
  std::map<int, std::vector<double>> rho_by_stratum;  // optional stratum -> per-arm rho
  double additive_bias = 0.0;
  double noise_sd = -1.0;
  std::uint64_t seed = 0;
  // Demonstration sensitivity: adds fs_coef * (proximity-weighted mean of the
  // demo outcomes) to the prediction when demos are supplied.
  double fs_coef = 0.0;
  double fs_bandwidth = 1.0;
};

/// Solved mixing coefficients for one query; exposed for verification.
struct MixCoefficients {
  double a = 0.0;
  double b = 0.0;
};
MixCoefficients solve_mix(double rho, double residual_sd, double noise_sd);

class SyntheticPredictor : public Predictor {
public:
  /// Closures supplied by whoever owns the data-generating process.
  struct Hooks {
    std::function<double(int arm, std::span<const double> x)> conditional_mean;
    /// Realized residual Y(t) - mu_t(x) for this subject; must be the same
    /// realization used to produce the observed outcome.
    std::function<double(std::string_view id, int arm, std::span<const double> x,
                         std::string_view z)>
        residual;
    std::function<double(int arm)> residual_sd;
    std::function<int(std::span<const double> x)> stratum;  // may be null
  };

  SyntheticPredictor(SyntheticPredictorConfig config, Hooks hooks);
  double predict(const SubjectView& subject, int arm,
                 std::span<const DemoExample> demos = {}) const override;

  const SyntheticPredictorConfig& config() const { return config_; }

  /// Precomputed demo-free prediction per (subject index, arm), keyed by the
  /// SubjectView index of one fixed dataset. Queries outside the table fall
  /// back to the hook-based computation (identical values, just slower).
  void register_base_values(std::vector<std::vector<double>> by_subject_then_arm);

  double base_value(const SubjectView& subject, int arm) const;

private:
  double rho_for(int arm, std::span<const double> x) const;
  SyntheticPredictorConfig config_;
  Hooks hooks_;
  std::vector<std::vector<double>> base_;  // [subject index][arm - 1]
};

/// POST-and-cache client for an external prediction service. Responses are
/// persisted to a JSONL cache so reruns are deterministic and offline.
class RemotePredictor : public Predictor {
public:
  RemotePredictor(std::string host, int port, std::string path,
                  std::string cache_path);
  ~RemotePredictor() override;

  double predict(const SubjectView& subject, int arm,
                 std::span<const DemoExample> demos = {}) const override;

  std::size_t cache_size() const;

private:
  std::string host_;
  int port_;
  std::string path_;
  std::string cache_path_;
  mutable std::mutex mutex_;
  mutable std::map<std::string, double> cache_;
};

/// Step 2' resampling aggregation: draws B ordered demonstration sets of size
/// m without replacement from the donor pool (shared across query subjects,
/// independent across b), queries the predictor, and records draws plus their
/// mean into `out` tagged with donor_fold_label.
void aggregate_few_shot(const Predictor& predictor, const RctDataset& data,
                        std::span<const std::uint32_t> donor_pool,
                        std::span<const std::uint32_t> query_subjects, int arm, int m,
                        int B, std::uint64_t seed, int donor_fold_label,
                        PredictionSet& out);

/// Means-only fast path, aligned with query_subjects.
std::vector<double> aggregate_few_shot_means(const Predictor& predictor,
                                             const RctDataset& data,
                                             std::span<const std::uint32_t> donor_pool,
                                             std::span<const std::uint32_t> query_subjects,
                                             int arm, int m, int B, std::uint64_t seed,
                                             int donor_fold_label);

}  // namespace calm
