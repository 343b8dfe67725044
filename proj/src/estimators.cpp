#include "calm/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include <nlohmann/json.hpp>

namespace calm {

const char* estimand_name(Estimand e) {
  switch (e) {
    case Estimand::mu_t: return "mu_t";
    case Estimand::ate: return "ate";
    case Estimand::cate_at_x: return "cate_at_x";
  }
  return "?";
}

double influence_zero_shot(double y, int t_obs, double y_dagger, int arm, double e_t,
                           double mu_hat, double mu_dagger_hat, double omega_hat) {
  if (!(e_t > 0.0 && e_t < 1.0)) {
    throw DomainError("influence: e_t must lie strictly inside (0, 1)");
  }
  if (!std::isfinite(y) || !std::isfinite(y_dagger) || !std::isfinite(mu_hat) ||
      !std::isfinite(mu_dagger_hat) || !std::isfinite(omega_hat)) {
    throw DomainError("influence: non-finite input");
  }
  const double ind = (t_obs == arm) ? 1.0 : 0.0;
  return ind * y / e_t +
         (1.0 - ind / e_t) * (mu_hat + omega_hat * (y_dagger - mu_dagger_hat));
}

namespace {

struct MuFoldPlan {
  int eval_fold = 0;
  int train_fold = 0;
  std::span<const double> y_dagger;
};

double smooth_omega_from(const std::vector<double>& outs, const NuisanceEntry& e,
                         double eps_nu) {
  const double nu = std::max(0.0, outs[e.h_dd] - outs[e.h_d] * outs[e.h_d]);
  if (nu < eps_nu) return 0.0;
  return (outs[e.h_yd] - outs[e.h_y] * outs[e.h_d]) / nu;
}

void finish_report(EstimateReport& r, std::vector<double> phi, double point,
                   double alpha) {
  const std::size_t n = phi.size();
  double ss = 0.0;
  for (double v : phi) ss += (v - point) * (v - point);
  r.point = point;
  r.variance = ss / static_cast<double>(n);
  r.n = n;
  r.alpha = alpha;
  const double half = z_two_sided(alpha) * std::sqrt(r.variance / static_cast<double>(n));
  r.ci_lo = point - half;
  r.ci_hi = point + half;
  r.influence = std::move(phi);
}

void warn_missing_strata(const std::set<int>& missing) {
  if (missing.empty()) return;
  std::string codes;
  for (int s : missing) {
    if (!codes.empty()) codes += ",";
    codes += std::to_string(s);
  }
  std::fprintf(stderr,
               "[calm] warning: strata {%s} absent from the weight-estimation fold; "
               "their calibration weight defaults to 0\n",
               codes.c_str());
}

EstimateReport mu_core(const RctDataset& data, const FoldAssignment& fa,
                       std::span<const MuFoldPlan> plans, int arm,
                       const EstimatorConfig& cfg, const char* tag) {
  if (arm < 1 || arm > data.arm_count()) {
    throw DomainError("estimate: arm " + std::to_string(arm) + " outside 1.." +
                      std::to_string(data.arm_count()));
  }
  const auto members = fa.members();
  const std::size_t n = data.n();
  const auto& inject = cfg.inject;
  const bool need_mu = !inject.mu;
  const bool need_mudag = cfg.weight != WeightKind::zero && !inject.mu_dagger;
  const bool need_moments = cfg.weight == WeightKind::smooth && !inject.omega;

  std::vector<int> strata;
  if (cfg.weight == WeightKind::robust && !inject.omega) {
    switch (cfg.coarsening) {
      case Coarsening::auto_detect:
        strata = coarsen_strata(data);
        break;
      case Coarsening::quartile:
        strata = quartile_strata(data);
        break;
      case Coarsening::column:
        if (!data.has_x_coarse()) {
          throw DomainError("robust weights: coarsening 'column' needs an xc column");
        }
        strata = data.x_coarse();
        break;
    }
  }

  std::vector<double> phi(n, 0.0);
  double total = 0.0;
  std::set<int> missing_strata;
  std::map<int, std::pair<double, int>> robust_sums;  // stratum -> (sum, folds)

  for (const MuFoldPlan& plan : plans) {
    const auto& train = members[plan.train_fold - 1];
    const auto& evals = members[plan.eval_fold - 1];

    NuisanceEntry entry;
    if (need_mu || need_mudag || need_moments) {
      entry = fit_fold_entry(data, train, arm, plan.y_dagger, cfg.mean_reg,
                             cfg.moment_reg, need_mu, need_mudag, need_moments,
                             std::to_string(plan.train_fold));
    }

    double eps_nu = 0.0;
    CalibrationWeights robust;
    if ((cfg.weight == WeightKind::smooth || cfg.weight == WeightKind::robust) &&
        !inject.omega) {
      std::vector<double> d_arm;
      for (std::uint32_t i : train) {
        if (data.t()[i] == arm) d_arm.push_back(plan.y_dagger[i]);
      }
      eps_nu = default_eps_nu(d_arm, cfg.eps_nu_scale);
    }
    if (cfg.weight == WeightKind::robust && !inject.omega) {
      MeanFn mu_fn = inject.mu
                         ? MeanFn([&inject, arm](std::span<const double> q) {
                             return inject.mu(arm, q);
                           })
                         : entry.mu_hat;
      MeanFn mudag_fn = inject.mu_dagger
                            ? MeanFn([&inject, arm](std::span<const double> q) {
                                return inject.mu_dagger(arm, q);
                              })
                            : entry.mu_dagger_hat;
      robust = weight_robust(data, train, arm, strata, mu_fn, mudag_fn, plan.y_dagger,
                             eps_nu);
      for (const auto& [code, omega] : robust.robust_table) {
        auto& [sum, count] = robust_sums[code];
        sum += omega;
        count += 1;
      }
    }

    std::vector<double> arm_out(entry.arm_set ? entry.arm_set->response_count() : 0);
    double fold_sum = 0.0;
    for (std::uint32_t i : evals) {
      const auto x = data.x_row(i);
      if (entry.arm_set) entry.arm_set->predict_all(x, arm_out.data());
      const double mu = inject.mu ? inject.mu(arm, x) : arm_out[entry.h_y];
      double mudag = 0.0, omega = 0.0, yd = 0.0;
      if (cfg.weight != WeightKind::zero) {
        yd = plan.y_dagger[i];
        mudag = inject.mu_dagger ? inject.mu_dagger(arm, x)
                                 : entry.all_set->predict_one(entry.h_dag, x);
        if (inject.omega) {
          omega = inject.omega(arm, x);
        } else if (cfg.weight == WeightKind::smooth) {
          omega = smooth_omega_from(arm_out, entry, eps_nu);
        } else {
          bool miss = false;
          omega = robust.robust_at(strata[i], &miss);
          if (miss) missing_strata.insert(strata[i]);
        }
      }
      const double value = influence_zero_shot(data.y()[i], data.t()[i], yd, arm,
                                               data.e_of(i, arm), mu, mudag, omega);
      phi[i] = value;
      fold_sum += value;
    }
    total += fold_sum;  // sum of fold sums / n == |I_f|/n-weighted fold means
  }
  warn_missing_strata(missing_strata);

  EstimateReport r;
  r.estimand = Estimand::mu_t;
  r.arm = arm;
  r.estimator = tag;
  r.weight_kind = weight_kind_name(cfg.weight);
  r.folds = fa.K;
  r.seed = cfg.seed;
  for (const auto& [code, sc] : robust_sums) {
    r.robust_weights[code] = sc.first / sc.second;
  }
  finish_report(r, std::move(phi), total / static_cast<double>(n), cfg.alpha);
  return r;
}

std::vector<MuFoldPlan> whole_sample_plans(const FoldAssignment& fa,
                                           std::span<const double> y_dagger) {
  std::vector<MuFoldPlan> plans;
  for (int f = 1; f <= fa.K; ++f) {
    plans.push_back({f, fa.train_fold_for(f), y_dagger});
  }
  return plans;
}

}  // namespace

EstimateReport estimate_mu_calm(const RctDataset& data, const PredictionSet& predictions,
                                int arm, const EstimatorConfig& config) {
  const FoldAssignment fa = split_folds(data.n(), config.folds, config.seed);
  const std::vector<double> ydag = predictions.bind_zero_shot(data, arm);
  return mu_core(data, fa, whole_sample_plans(fa, ydag), arm, config, "calm-zero");
}

EstimateReport estimate_mu_calm_with_folds(const RctDataset& data,
                                           std::span<const double> y_dagger, int arm,
                                           const EstimatorConfig& config,
                                           const FoldAssignment& folds) {
  if (folds.fold_of.size() != data.n()) {
    throw DomainError("estimate: fold assignment length mismatch");
  }
  if (y_dagger.size() != data.n()) {
    throw DomainError("estimate: prediction vector length mismatch");
  }
  return mu_core(data, folds, whole_sample_plans(folds, y_dagger), arm, config,
                 "calm-zero");
}

EstimateReport estimate_mu_aipw(const RctDataset& data, int arm,
                                const EstimatorConfig& config) {
  EstimatorConfig cfg = config;
  cfg.weight = WeightKind::zero;
  const FoldAssignment fa = split_folds(data.n(), cfg.folds, cfg.seed);
  const std::vector<double> zeros(data.n(), 0.0);
  return mu_core(data, fa, whole_sample_plans(fa, zeros), arm, cfg, "aipw");
}

EstimateReport estimate_mu_calm_fs(const RctDataset& data, const Predictor& predictor,
                                   int arm, const FewShotConfig& few_shot,
                                   const EstimatorConfig& config) {
  const FoldAssignment fa = split_folds(data.n(), 3, config.seed);
  const auto members = fa.members();
  const std::uint64_t agg_seed =
      few_shot.aggregation_seed
          ? *few_shot.aggregation_seed
          : derive_stream(config.seed, {fnv1a64("fs_aggregation")});

  std::vector<std::vector<double>> store(3, std::vector<double>(data.n(), 0.0));
  std::vector<MuFoldPlan> plans;
  for (int f = 1; f <= 3; ++f) {
    const int g = fa.train_fold_for(f);
    const int d = fa.donor_fold_for(f);
    std::vector<std::uint32_t> donor_pool;
    for (std::uint32_t i : members[d - 1]) {
      if (data.t()[i] == arm) donor_pool.push_back(i);
    }
    std::vector<std::uint32_t> queries(members[g - 1]);
    queries.insert(queries.end(), members[f - 1].begin(), members[f - 1].end());
    const std::vector<double> means = aggregate_few_shot_means(
        predictor, data, donor_pool, queries, arm, few_shot.m, few_shot.B, agg_seed, d);
    for (std::size_t j = 0; j < queries.size(); ++j) store[f - 1][queries[j]] = means[j];
    plans.push_back({f, g, store[f - 1]});
  }
  EstimateReport r = mu_core(data, fa, plans, arm, config, "calm-fs");
  r.fs_m = few_shot.m;
  r.fs_B = few_shot.B;
  return r;
}

EstimateReport estimate_mu_calm_fs_set(const RctDataset& data,
                                       const PredictionSet& few_shot_set, int arm,
                                       const EstimatorConfig& config) {
  if (few_shot_set.mode() != PredictionSet::Mode::few_shot) {
    throw DomainError("estimate_mu_calm_fs_set: prediction set is not few-shot");
  }
  const FoldAssignment fa = split_folds(data.n(), 3, config.seed);
  const auto members = fa.members();
  std::vector<std::vector<double>> store(3, std::vector<double>(data.n(), 0.0));
  std::vector<MuFoldPlan> plans;
  for (int f = 1; f <= 3; ++f) {
    const int g = fa.train_fold_for(f);
    const int d = fa.donor_fold_for(f);
    std::vector<std::uint32_t> queries(members[g - 1]);
    queries.insert(queries.end(), members[f - 1].begin(), members[f - 1].end());
    const std::vector<double> means =
        few_shot_set.bind_few_shot_means(data, arm, d, queries);
    for (std::size_t j = 0; j < queries.size(); ++j) store[f - 1][queries[j]] = means[j];
    plans.push_back({f, g, store[f - 1]});
  }
  EstimateReport r = mu_core(data, fa, plans, arm, config, "calm-fs");
  r.fs_m = few_shot_set.m();
  r.fs_B = few_shot_set.B();
  return r;
}

namespace {

struct AteFoldPlan {
  int eval_fold = 0;
  int train_fold = 0;
  std::span<const double> ydag_t;
  std::span<const double> ydag_tp;
};

// One training fold's models for the ATE: per-arm outcome smoothers plus a
// joint all-subject set carrying both prediction means and the omega_ATE
// moment responses, so evaluation costs three neighbor passes per query.
struct AteFoldModel {
  std::shared_ptr<SmootherSet> arm_set_t, arm_set_tp;
  std::shared_ptr<SmootherSet> joint;
  int h_dag_t = -1, h_dag_tp = -1;
  int hv1 = -1, hv2 = -1, hv11 = -1, hv22 = -1, hv12 = -1, hz = -1, hv1z = -1,
      hv2z = -1;
};

AteFoldModel build_ate_fold_model(const RctDataset& data,
                                  std::span<const std::uint32_t> train, int t, int tp,
                                  std::span<const double> ydag_t,
                                  std::span<const double> ydag_tp,
                                  const EstimatorConfig& cfg, const std::string& label) {
  const auto& inject = cfg.inject;
  const bool need_mu = !inject.mu;
  const bool need_mudag = cfg.weight != WeightKind::zero && !inject.mu_dagger;
  const bool need_weights = cfg.weight != WeightKind::zero && !inject.omega;
  const std::size_t p = data.p();

  AteFoldModel model;
  if (need_mu) {
    for (int which = 0; which < 2; ++which) {
      const int arm = which == 0 ? t : tp;
      std::vector<std::uint32_t> subjects;
      for (std::uint32_t i : train) {
        if (data.t()[i] == arm) subjects.push_back(i);
      }
      if (subjects.size() < 2) {
        throw DomainError("estimate_ate: fold " + label + " has fewer than 2 arm-" +
                          std::to_string(arm) + " subjects");
      }
      std::vector<double> x(subjects.size() * p), y(subjects.size());
      for (std::size_t j = 0; j < subjects.size(); ++j) {
        std::copy_n(data.x_row(subjects[j]).data(), p, x.data() + j * p);
        y[j] = data.y()[subjects[j]];
      }
      auto set = SmootherSet::create(std::move(x), subjects.size(), p, cfg.mean_reg);
      set->add_response(std::move(y));
      (which == 0 ? model.arm_set_t : model.arm_set_tp) = set;
    }
  }

  if (need_mudag || need_weights) {
    const std::size_t m = train.size();
    std::vector<double> x(m * p);
    std::vector<double> d1(m), d2(m);
    for (std::size_t j = 0; j < m; ++j) {
      const std::uint32_t i = train[j];
      std::copy_n(data.x_row(i).data(), p, x.data() + j * p);
      d1[j] = ydag_t[i];
      d2[j] = ydag_tp[i];
    }
    auto joint = SmootherSet::create(std::move(x), m, p, cfg.mean_reg);
    model.h_dag_t = joint->add_response(d1);
    model.h_dag_tp = joint->add_response(d2);
    if (need_weights) {
      std::vector<double> v1(m), v2(m), v11(m), v22(m), v12(m), z(m), v1z(m), v2z(m);
      for (std::size_t j = 0; j < m; ++j) {
        const std::uint32_t i = train[j];
        const double st = std::sqrt(data.lambda_of(i, t));
        const double stp = std::sqrt(data.lambda_of(i, tp));
        v1[j] = st * d1[j];
        v2[j] = stp * d2[j];
        v11[j] = v1[j] * v1[j];
        v22[j] = v2[j] * v2[j];
        v12[j] = v1[j] * v2[j];
        double zi = 0.0;
        if (data.t()[i] == t) zi = st / data.e_of(i, t) * data.y()[i];
        if (data.t()[i] == tp) zi = stp / data.e_of(i, tp) * data.y()[i];
        z[j] = zi;
        v1z[j] = v1[j] * zi;
        v2z[j] = v2[j] * zi;
      }
      model.hv1 = joint->add_response(std::move(v1));
      model.hv2 = joint->add_response(std::move(v2));
      model.hv11 = joint->add_response(std::move(v11));
      model.hv22 = joint->add_response(std::move(v22));
      model.hv12 = joint->add_response(std::move(v12));
      model.hz = joint->add_response(std::move(z));
      model.hv1z = joint->add_response(std::move(v1z));
      model.hv2z = joint->add_response(std::move(v2z));
    }
    model.joint = joint;
  }
  return model;
}

EstimateReport ate_core(const RctDataset& data, const FoldAssignment& fa,
                        std::span<const AteFoldPlan> plans, int t, int tp,
                        const EstimatorConfig& cfg, const char* tag) {
  if (t == tp) throw DomainError("estimate_ate: contrast arms must differ");
  for (int arm : {t, tp}) {
    if (arm < 1 || arm > data.arm_count()) {
      throw DomainError("estimate_ate: arm " + std::to_string(arm) + " outside 1.." +
                        std::to_string(data.arm_count()));
    }
  }
  const auto members = fa.members();
  const std::size_t n = data.n();
  const auto& inject = cfg.inject;

  std::vector<double> phi(n, 0.0);
  double total = 0.0;

  for (const AteFoldPlan& plan : plans) {
    const auto& train = members[plan.train_fold - 1];
    const auto& evals = members[plan.eval_fold - 1];
    const AteFoldModel model =
        build_ate_fold_model(data, train, t, tp, plan.ydag_t, plan.ydag_tp, cfg,
                             std::to_string(plan.train_fold));

    std::vector<double> joint_out(model.joint ? model.joint->response_count() : 0);
    double fold_sum = 0.0;
    for (std::uint32_t i : evals) {
      const auto x = data.x_row(i);
      double mu_t_val, mu_tp_val;
      if (inject.mu) {
        mu_t_val = inject.mu(t, x);
        mu_tp_val = inject.mu(tp, x);
      } else {
        mu_t_val = model.arm_set_t->predict_one(0, x);
        mu_tp_val = model.arm_set_tp->predict_one(0, x);
      }
      double mudag_t = 0.0, mudag_tp = 0.0, w_t = 0.0, w_tp = 0.0;
      double yd_t = 0.0, yd_tp = 0.0;
      if (cfg.weight != WeightKind::zero) {
        yd_t = plan.ydag_t[i];
        yd_tp = plan.ydag_tp[i];
        if (model.joint) model.joint->predict_all(x, joint_out.data());
        mudag_t = inject.mu_dagger ? inject.mu_dagger(t, x) : joint_out[model.h_dag_t];
        mudag_tp =
            inject.mu_dagger ? inject.mu_dagger(tp, x) : joint_out[model.h_dag_tp];
        if (inject.omega) {
          w_t = inject.omega(t, x);
          w_tp = inject.omega(tp, x);
        } else {
          const double s11 =
              joint_out[model.hv11] - joint_out[model.hv1] * joint_out[model.hv1];
          const double s22 =
              joint_out[model.hv22] - joint_out[model.hv2] * joint_out[model.hv2];
          const double s12 =
              joint_out[model.hv12] - joint_out[model.hv1] * joint_out[model.hv2];
          const double c1 =
              joint_out[model.hv1z] - joint_out[model.hv1] * joint_out[model.hz];
          const double c2 =
              joint_out[model.hv2z] - joint_out[model.hv2] * joint_out[model.hz];
          const AteWeights w = solve_ate_system(s11, s12, s22, c1, c2);
          w_t = w.w_t;
          w_tp = w.w_t_prime;
        }
      }
      const double phi_t = influence_zero_shot(data.y()[i], data.t()[i], yd_t, t,
                                               data.e_of(i, t), mu_t_val, mudag_t, w_t);
      const double phi_tp =
          influence_zero_shot(data.y()[i], data.t()[i], yd_tp, tp, data.e_of(i, tp),
                              mu_tp_val, mudag_tp, w_tp);
      const double diff = phi_t - phi_tp;
      phi[i] = diff;
      fold_sum += diff;
    }
    total += fold_sum;
  }

  EstimateReport r;
  r.estimand = Estimand::ate;
  r.arm = t;
  r.arm_prime = tp;
  r.estimator = tag;
  r.weight_kind = cfg.weight == WeightKind::zero ? "zero" : "ate";
  r.folds = fa.K;
  r.seed = cfg.seed;
  finish_report(r, std::move(phi), total / static_cast<double>(n), cfg.alpha);
  return r;
}

std::vector<AteFoldPlan> whole_sample_ate_plans(const FoldAssignment& fa,
                                                std::span<const double> ydag_t,
                                                std::span<const double> ydag_tp) {
  std::vector<AteFoldPlan> plans;
  for (int f = 1; f <= fa.K; ++f) {
    plans.push_back({f, fa.train_fold_for(f), ydag_t, ydag_tp});
  }
  return plans;
}

}  // namespace

EstimateReport estimate_ate_calm(const RctDataset& data, const PredictionSet& predictions,
                                 int arm_t, int arm_t_prime,
                                 const EstimatorConfig& config) {
  const FoldAssignment fa = split_folds(data.n(), config.folds, config.seed);
  const std::vector<double> ydag_t = predictions.bind_zero_shot(data, arm_t);
  const std::vector<double> ydag_tp = predictions.bind_zero_shot(data, arm_t_prime);
  return ate_core(data, fa, whole_sample_ate_plans(fa, ydag_t, ydag_tp), arm_t,
                  arm_t_prime, config, "calm-zero");
}

EstimateReport estimate_ate_calm_with_folds(const RctDataset& data,
                                            std::span<const double> y_dagger_t,
                                            std::span<const double> y_dagger_t_prime,
                                            int arm_t, int arm_t_prime,
                                            const EstimatorConfig& config,
                                            const FoldAssignment& folds) {
  if (folds.fold_of.size() != data.n()) {
    throw DomainError("estimate_ate: fold assignment length mismatch");
  }
  return ate_core(data, folds,
                  whole_sample_ate_plans(folds, y_dagger_t, y_dagger_t_prime), arm_t,
                  arm_t_prime, config, "calm-zero");
}

EstimateReport estimate_ate_aipw(const RctDataset& data, int arm_t, int arm_t_prime,
                                 const EstimatorConfig& config) {
  EstimatorConfig cfg = config;
  cfg.weight = WeightKind::zero;
  const FoldAssignment fa = split_folds(data.n(), cfg.folds, cfg.seed);
  const std::vector<double> zeros(data.n(), 0.0);
  return ate_core(data, fa, whole_sample_ate_plans(fa, zeros, zeros), arm_t,
                  arm_t_prime, cfg, "aipw");
}

EstimateReport estimate_ate_calm_fs(const RctDataset& data, const Predictor& predictor,
                                    int arm_t, int arm_t_prime,
                                    const FewShotConfig& few_shot,
                                    const EstimatorConfig& config) {
  const FoldAssignment fa = split_folds(data.n(), 3, config.seed);
  const auto members = fa.members();
  const std::uint64_t agg_seed =
      few_shot.aggregation_seed
          ? *few_shot.aggregation_seed
          : derive_stream(config.seed, {fnv1a64("fs_aggregation")});

  std::vector<std::vector<double>> store_t(3, std::vector<double>(data.n(), 0.0));
  std::vector<std::vector<double>> store_tp(3, std::vector<double>(data.n(), 0.0));
  std::vector<AteFoldPlan> plans;
  for (int f = 1; f <= 3; ++f) {
    const int g = fa.train_fold_for(f);
    const int d = fa.donor_fold_for(f);
    std::vector<std::uint32_t> queries(members[g - 1]);
    queries.insert(queries.end(), members[f - 1].begin(), members[f - 1].end());
    for (int which = 0; which < 2; ++which) {
      const int arm = which == 0 ? arm_t : arm_t_prime;
      std::vector<std::uint32_t> donor_pool;
      for (std::uint32_t i : members[d - 1]) {
        if (data.t()[i] == arm) donor_pool.push_back(i);
      }
      const std::vector<double> means =
          aggregate_few_shot_means(predictor, data, donor_pool, queries, arm,
                                   few_shot.m, few_shot.B, agg_seed, d);
      auto& store = which == 0 ? store_t[f - 1] : store_tp[f - 1];
      for (std::size_t j = 0; j < queries.size(); ++j) store[queries[j]] = means[j];
    }
    plans.push_back({f, g, store_t[f - 1], store_tp[f - 1]});
  }
  EstimateReport r = ate_core(data, fa, plans, arm_t, arm_t_prime, config, "calm-fs");
  r.fs_m = few_shot.m;
  r.fs_B = few_shot.B;
  return r;
}

EstimateReport estimate_ate_calm_fs_set(const RctDataset& data,
                                        const PredictionSet& few_shot_set, int arm_t,
                                        int arm_t_prime, const EstimatorConfig& config) {
  if (few_shot_set.mode() != PredictionSet::Mode::few_shot) {
    throw DomainError("estimate_ate_calm_fs_set: prediction set is not few-shot");
  }
  const FoldAssignment fa = split_folds(data.n(), 3, config.seed);
  const auto members = fa.members();
  std::vector<std::vector<double>> store_t(3, std::vector<double>(data.n(), 0.0));
  std::vector<std::vector<double>> store_tp(3, std::vector<double>(data.n(), 0.0));
  std::vector<AteFoldPlan> plans;
  for (int f = 1; f <= 3; ++f) {
    const int g = fa.train_fold_for(f);
    const int d = fa.donor_fold_for(f);
    std::vector<std::uint32_t> queries(members[g - 1]);
    queries.insert(queries.end(), members[f - 1].begin(), members[f - 1].end());
    const std::vector<double> means_t =
        few_shot_set.bind_few_shot_means(data, arm_t, d, queries);
    const std::vector<double> means_tp =
        few_shot_set.bind_few_shot_means(data, arm_t_prime, d, queries);
    for (std::size_t j = 0; j < queries.size(); ++j) {
      store_t[f - 1][queries[j]] = means_t[j];
      store_tp[f - 1][queries[j]] = means_tp[j];
    }
    plans.push_back({f, g, store_t[f - 1], store_tp[f - 1]});
  }
  EstimateReport r = ate_core(data, fa, plans, arm_t, arm_t_prime, config, "calm-fs");
  r.fs_m = few_shot_set.m();
  r.fs_B = few_shot_set.B();
  return r;
}

EstimateReport estimate_cate_calm(const RctDataset& data, const PredictionSet& predictions,
                                  int arm_t, int arm_t_prime,
                                  std::span<const double> x_query, const CateConfig& cate,
                                  const EstimatorConfig& config) {
  const std::size_t p = data.p();
  if (x_query.size() != p) {
    throw DomainError("estimate_cate: query dimension " + std::to_string(x_query.size()) +
                      " != p = " + std::to_string(p));
  }
  EstimateReport base = estimate_ate_calm(data, predictions, arm_t, arm_t_prime, config);
  const std::vector<double>& diff = base.influence;
  const std::size_t n = data.n();

  std::vector<double> h(p);
  if (cate.bandwidth > 0.0) {
    std::fill(h.begin(), h.end(), cate.bandwidth);
  } else {
    const double rate = -1.0 / (static_cast<double>(p) + 4.0) - cate.undersmooth;
    const double factor = 1.06 * std::pow(static_cast<double>(n), rate);
    for (std::size_t j = 0; j < p; ++j) {
      std::vector<double> col(n);
      for (std::size_t i = 0; i < n; ++i) col[i] = data.x_row(i)[j];
      h[j] = factor * sample_sd(col);
      if (h[j] <= 0.0) h[j] = factor;
    }
  }

  std::vector<double> w(n);
  double wsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double k = 1.0;
    const auto x = data.x_row(i);
    for (std::size_t j = 0; j < p; ++j) {
      k *= kernel_eval(cate.kernel, (x[j] - x_query[j]) / h[j]);
    }
    w[i] = k;
    wsum += k;
  }
  if (!(wsum > 0.0)) {
    throw UnstableQueryError("cate query has zero kernel mass (outside support)");
  }
  double tau = 0.0, w2sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] /= wsum;
    tau += w[i] * diff[i];
    w2sum += w[i] * w[i];
  }
  const double ess = 1.0 / w2sum;
  if (ess < cate.min_ess) {
    throw UnstableQueryError("cate query effective sample size " + std::to_string(ess) +
                             " below " + std::to_string(cate.min_ess));
  }
  double v = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    v += w[i] * w[i] * (diff[i] - tau) * (diff[i] - tau);
  }

  EstimateReport r;
  r.estimand = Estimand::cate_at_x;
  r.arm = arm_t;
  r.arm_prime = arm_t_prime;
  r.estimator = base.estimator;
  r.weight_kind = base.weight_kind;
  r.folds = base.folds;
  r.seed = config.seed;
  r.x_query.assign(x_query.begin(), x_query.end());
  r.bandwidth = h[0];
  r.ess = ess;
  r.n = n;
  r.alpha = config.alpha;
  r.point = tau;
  r.variance = static_cast<double>(n) * v;  // so that ci = +- z sqrt(variance/n)
  const double half = z_two_sided(config.alpha) * std::sqrt(v);
  r.ci_lo = tau - half;
  r.ci_hi = tau + half;
  r.influence = diff;
  return r;
}

std::string EstimateReport::to_json() const {
  nlohmann::json j;
  j["estimand"] = estimand_name(estimand);
  j["arm"] = arm;
  if (estimand != Estimand::mu_t) j["arm_prime"] = arm_prime;
  j["point"] = point;
  j["variance"] = variance;
  j["n"] = n;
  j["alpha"] = alpha;
  j["ci"] = {ci_lo, ci_hi};
  j["estimator"] = estimator;
  j["weight_kind"] = weight_kind;
  j["folds"] = folds;
  j["seed"] = seed;
  if (fs_B > 0) {
    j["fewshot_m"] = fs_m;
    j["fewshot_B"] = fs_B;
  }
  if (estimand == Estimand::cate_at_x) {
    j["x_query"] = x_query;
    j["bandwidth"] = bandwidth;
    j["ess"] = ess;
  }
  if (!robust_weights.empty()) {
    nlohmann::json table = nlohmann::json::object();
    for (const auto& [code, omega] : robust_weights) table[std::to_string(code)] = omega;
    j["robust_weights"] = table;
  }
  j["influence"] = influence;
  return j.dump();
}

namespace {

struct QuadForm {
  double value = 0.0;
};

double ate_reduction_at(const DgpMoments& dgp, int t, int tp,
                        std::span<const double> x) {
  const double et = dgp.e(t, x);
  const double etp = dgp.e(tp, x);
  const double lt = (1.0 - et) / et;
  const double ltp = (1.0 - etp) / etp;
  const double slt = std::sqrt(lt), sltp = std::sqrt(ltp);
  const double s11 = lt * dgp.var_dagger(t, x);
  const double s22 = ltp * dgp.var_dagger(tp, x);
  const double s12 = slt * sltp * dgp.cov_dagger(t, tp, x);
  const double c1 = lt * dgp.cov_dagger_y(t, t, x) + slt * sltp * dgp.cov_dagger_y(t, tp, x);
  const double c2 =
      slt * sltp * dgp.cov_dagger_y(tp, t, x) + ltp * dgp.cov_dagger_y(tp, tp, x);
  const AteWeights w = solve_ate_system(s11, s12, s22, c1, c2);
  return std::max(0.0, c1 * w.w_t + c2 * w.w_t_prime);
}

}  // namespace

TheoreticalVariance theoretical_variance_mu(const DgpMoments& dgp, int arm,
                                            std::size_t draws, std::uint64_t seed) {
  Rng rng(derive_stream(seed, {fnv1a64("theoretical_variance_mu")}));
  std::vector<double> x(dgp.p);
  double sum_mu = 0.0, sum_mu2 = 0.0, sum_voe = 0.0, sum_red = 0.0;
  for (std::size_t d = 0; d < draws; ++d) {
    dgp.draw_x(rng, x);
    const double m = dgp.mu(arm, x);
    const double v = dgp.var_y(arm, x);
    const double e = dgp.e(arm, x);
    const double rho = dgp.rho(arm, x);
    sum_mu += m;
    sum_mu2 += m * m;
    sum_voe += v / e;
    sum_red += (1.0 - e) / e * v * rho * rho;
  }
  const double inv = 1.0 / static_cast<double>(draws);
  TheoreticalVariance tv;
  tv.mean_sq_term = std::max(0.0, sum_mu2 * inv - (sum_mu * inv) * (sum_mu * inv));
  tv.var_over_e_term = sum_voe * inv;
  tv.reduction_term = sum_red * inv;
  tv.v_aipw = tv.mean_sq_term + tv.var_over_e_term;
  tv.v_calm = tv.v_aipw - tv.reduction_term;
  return tv;
}

TheoreticalVariance theoretical_variance_ate(const DgpMoments& dgp, int arm_t,
                                             int arm_t_prime, std::size_t draws,
                                             std::uint64_t seed) {
  Rng rng(derive_stream(seed, {fnv1a64("theoretical_variance_ate")}));
  std::vector<double> x(dgp.p);
  double sum_tau = 0.0, sum_tau2 = 0.0, sum_voe = 0.0, sum_red = 0.0;
  for (std::size_t d = 0; d < draws; ++d) {
    dgp.draw_x(rng, x);
    const double tau = dgp.mu(arm_t, x) - dgp.mu(arm_t_prime, x);
    sum_tau += tau;
    sum_tau2 += tau * tau;
    sum_voe += dgp.var_y(arm_t, x) / dgp.e(arm_t, x) +
               dgp.var_y(arm_t_prime, x) / dgp.e(arm_t_prime, x);
    sum_red += ate_reduction_at(dgp, arm_t, arm_t_prime, x);
  }
  const double inv = 1.0 / static_cast<double>(draws);
  TheoreticalVariance tv;
  tv.mean_sq_term = std::max(0.0, sum_tau2 * inv - (sum_tau * inv) * (sum_tau * inv));
  tv.var_over_e_term = sum_voe * inv;
  tv.reduction_term = sum_red * inv;
  tv.v_aipw = tv.mean_sq_term + tv.var_over_e_term;
  tv.v_calm = tv.v_aipw - tv.reduction_term;
  return tv;
}

TheoreticalVariance theoretical_variance_cate(const DgpMoments& dgp, int arm_t,
                                              int arm_t_prime,
                                              std::span<const double> x_query,
                                              KernelKind kernel) {
  TheoreticalVariance tv;
  tv.kernel_l2sq = std::pow(kernel_l2sq(kernel), static_cast<double>(dgp.p));
  tv.density_at_x = dgp.density ? dgp.density(x_query) : 0.0;
  const double voe = dgp.var_y(arm_t, x_query) / dgp.e(arm_t, x_query) +
                     dgp.var_y(arm_t_prime, x_query) / dgp.e(arm_t_prime, x_query);
  const double red = ate_reduction_at(dgp, arm_t, arm_t_prime, x_query);
  tv.v_aipw_at_x = voe;
  tv.v_calm_at_x = voe - red;
  tv.var_over_e_term = voe;
  tv.reduction_term = red;
  if (tv.density_at_x > 0.0) {
    tv.v_aipw = tv.kernel_l2sq * tv.v_aipw_at_x / tv.density_at_x;
    tv.v_calm = tv.kernel_l2sq * tv.v_calm_at_x / tv.density_at_x;
  }
  return tv;
}

}  // namespace calm
