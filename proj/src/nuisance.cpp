#include "calm/nuisance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>

#include <Eigen/Dense>

#include "calm/rng.hpp"
#include "calm/stats.hpp"

namespace calm {

void RegressorConfig::validate() const {
  if (family == Family::knn && selection == Selection::fixed && k <= 0) {
    throw DomainError("regressor: knn k must be positive");
  }
  if (bandwidth_scale <= 0.0) throw DomainError("regressor: bandwidth scale must be positive");
  if (tree_count <= 0) throw DomainError("regressor: tree count must be positive");
  if (shrinkage <= 0.0) throw DomainError("regressor: shrinkage must be positive");
}

namespace {

struct Stump {
  int coord = 0;
  double threshold = 0.0;
  double left = 0.0;
  double right = 0.0;
};

std::vector<int> knn_candidates(std::size_t n) {
  std::vector<int> cand = {5, 10, 25, 50,
                           static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))))};
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
  std::vector<int> out;
  for (int k : cand) {
    if (k >= 1) out.push_back(std::min<int>(k, static_cast<int>(n)));
  }
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace

struct SmootherSet::Impl {
  RegressorConfig cfg;
  std::size_t n = 0, p = 0;
  std::vector<double> xs;      // standardized, row-major
  std::vector<double> center;  // per coordinate
  std::vector<double> scale;   // 1/sd, 0 for zero-variance coordinates
  std::vector<std::vector<double>> responses;
  std::vector<double> global_mean;

  // knn
  std::vector<int> ks;  // per response
  int k_max = 0;
  // 5-fold CV split and, per training point, the neighbor prefix among
  // points outside its CV fold (self excluded). Built on first CV use.
  std::vector<int> cv_fold;
  std::vector<std::vector<std::uint32_t>> cv_neighbors;
  int cv_prefix = 0;

  // kernel smoother
  double bandwidth = 0.0;

  // stump ensemble
  std::vector<std::vector<Stump>> stump_models;
  std::vector<std::vector<double>> stump_thresholds;  // per coordinate
  std::vector<std::vector<int>> stump_bucket;         // per coordinate, per point

  // linear
  std::vector<Eigen::VectorXd> linear_coefs;

  void standardize_query(std::span<const double> q, double* out) const {
    for (std::size_t j = 0; j < p; ++j) {
      out[j] = (q[j] - center[j]) * scale[j];
    }
  }

  double dist2(const double* a, const double* b) const {
    double s = 0.0;
    for (std::size_t j = 0; j < p; ++j) {
      const double d = a[j] - b[j];
      s += d * d;
    }
    return s;
  }

  /// Indices of the `take` nearest training points to standardized query qs,
  /// sorted by (distance, index).
  void neighbor_prefix(const double* qs, std::size_t take,
                       std::vector<std::pair<double, std::uint32_t>>& scratch,
                       std::vector<std::uint32_t>& out) const {
    scratch.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      scratch[i] = {dist2(qs, xs.data() + i * p), static_cast<std::uint32_t>(i)};
    }
    take = std::min(take, n);
    std::nth_element(scratch.begin(), scratch.begin() + take - 1, scratch.end());
    std::sort(scratch.begin(), scratch.begin() + take);
    out.resize(take);
    for (std::size_t i = 0; i < take; ++i) out[i] = scratch[i].second;
  }

  void build_cv_tables() {
    if (!cv_fold.empty()) return;
    cv_fold.assign(n, 0);
    std::vector<std::uint32_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
    Rng rng(derive_stream(fnv1a64("knn_cv_split"), {n}));
    rng.shuffle(order.begin(), order.end());
    for (std::size_t pos = 0; pos < n; ++pos) cv_fold[order[pos]] = static_cast<int>(pos % 5);

    const auto cands = knn_candidates(n);
    cv_prefix = cands.back();
    const std::size_t cap = std::min(n, static_cast<std::size_t>(2 * cv_prefix + 16));
    cv_neighbors.assign(n, {});
    std::vector<std::pair<double, std::uint32_t>> scratch;
    std::vector<std::uint32_t> prefix;
    for (std::size_t i = 0; i < n; ++i) {
      neighbor_prefix(xs.data() + i * p, cap, scratch, prefix);
      auto& keep = cv_neighbors[i];
      keep.reserve(cv_prefix);
      for (std::uint32_t idx : prefix) {
        if (idx == i || cv_fold[idx] == cv_fold[i]) continue;
        keep.push_back(idx);
        if (static_cast<int>(keep.size()) == cv_prefix) break;
      }
    }
  }

  int choose_k_cv(const std::vector<double>& r) {
    build_cv_tables();
    const auto cands = knn_candidates(n);
    double best_sse = std::numeric_limits<double>::infinity();
    int best_k = cands.front();
    for (int k : cands) {
      double sse = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& nb = cv_neighbors[i];
        const std::size_t take = std::min<std::size_t>(k, nb.size());
        if (take == 0) continue;
        double s = 0.0;
        for (std::size_t j = 0; j < take; ++j) s += r[nb[j]];
        const double err = r[i] - s / static_cast<double>(take);
        sse += err * err;
      }
      if (std::getenv("CALM_DEBUG_CV")) {
        std::fprintf(stderr, "[cv] n=%zu k=%d sse=%.3f\n", n, k, sse);
      }
      // Strict improvement beyond a relative tolerance; ties keep the
      // smaller k (candidates ascend).
      if (sse + 1e-12 * (1.0 + sse) < best_sse) {
        best_sse = sse;
        best_k = k;
      }
    }
    return best_k;
  }

  void fit_stumps(const std::vector<double>& r, std::vector<Stump>& model) {
    if (stump_thresholds.empty()) {
      stump_thresholds.resize(p);
      stump_bucket.resize(p);
      for (std::size_t j = 0; j < p; ++j) {
        std::vector<double> col(n);
        for (std::size_t i = 0; i < n; ++i) col[i] = xs[i * p + j];
        std::vector<double> thr;
        for (int q = 1; q < 32; ++q) {
          thr.push_back(quantile(col, q / 32.0));
        }
        thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
        stump_thresholds[j] = thr;
        auto& bucket = stump_bucket[j];
        bucket.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
          bucket[i] = static_cast<int>(
              std::upper_bound(thr.begin(), thr.end(), col[i]) - thr.begin());
        }
      }
    }
    const double base = mean(r);
    std::vector<double> resid(n);
    for (std::size_t i = 0; i < n; ++i) resid[i] = r[i] - base;
    model.clear();
    model.push_back({-1, 0.0, base, base});  // intercept stored as a degenerate stump
    std::vector<double> bsum;
    std::vector<int> bcnt;
    for (int round = 0; round < cfg.tree_count; ++round) {
      double best_gain = 1e-12;
      Stump best;
      bool found = false;
      for (std::size_t j = 0; j < p; ++j) {
        const auto& thr = stump_thresholds[j];
        if (thr.empty()) continue;
        bsum.assign(thr.size() + 1, 0.0);
        bcnt.assign(thr.size() + 1, 0);
        for (std::size_t i = 0; i < n; ++i) {
          bsum[stump_bucket[j][i]] += resid[i];
          bcnt[stump_bucket[j][i]] += 1;
        }
        double lsum = 0.0;
        int lcnt = 0;
        double total = 0.0;
        for (double v : bsum) total += v;
        for (std::size_t c = 0; c < thr.size(); ++c) {
          lsum += bsum[c];
          lcnt += bcnt[c];
          const int rcnt = static_cast<int>(n) - lcnt;
          if (lcnt == 0 || rcnt == 0) continue;
          const double rsum = total - lsum;
          const double gain = lsum * lsum / lcnt + rsum * rsum / rcnt;
          if (gain > best_gain) {
            best_gain = gain;
            best = {static_cast<int>(j), thr[c], lsum / lcnt, rsum / rcnt};
            found = true;
          }
        }
      }
      if (!found) break;
      best.left *= cfg.shrinkage;
      best.right *= cfg.shrinkage;
      model.push_back(best);
      for (std::size_t i = 0; i < n; ++i) {
        resid[i] -= (xs[i * p + best.coord] <= best.threshold) ? best.left : best.right;
      }
    }
  }

  Eigen::VectorXd fit_linear(const std::vector<double>& r) const {
    Eigen::MatrixXd design(n, p + 1);
    Eigen::VectorXd rv(n);
    for (std::size_t i = 0; i < n; ++i) {
      design(i, 0) = 1.0;
      for (std::size_t j = 0; j < p; ++j) design(i, j + 1) = xs[i * p + j];
      rv(i) = r[i];
    }
    Eigen::MatrixXd gram = design.transpose() * design;
    gram.diagonal().array() += 1e-8;
    return gram.ldlt().solve(design.transpose() * rv);
  }

  double eval_response(std::size_t handle, const std::vector<std::uint32_t>& order) const {
    const auto& r = responses[handle];
    const int k = ks[handle];
    const std::size_t take = std::min<std::size_t>(k, order.size());
    if (take == 0) return global_mean[handle];
    double s = 0.0;
    for (std::size_t j = 0; j < take; ++j) s += r[order[j]];
    return s / static_cast<double>(take);
  }

  double eval_non_knn(std::size_t handle, const double* qs) const {
    switch (cfg.family) {
      case RegressorConfig::Family::kernel_smoother: {
        const auto& r = responses[handle];
        const double inv_h = 1.0 / bandwidth;
        double wsum = 0.0, vsum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          double k = 1.0;
          for (std::size_t j = 0; j < p; ++j) {
            k *= normal_pdf((xs[i * p + j] - qs[j]) * inv_h);
          }
          wsum += k;
          vsum += k * r[i];
        }
        return wsum > 1e-300 ? vsum / wsum : global_mean[handle];
      }
      case RegressorConfig::Family::stump_ensemble: {
        const auto& model = stump_models[handle];
        double v = model.front().left;  // intercept
        for (std::size_t s = 1; s < model.size(); ++s) {
          const Stump& st = model[s];
          v += (qs[st.coord] <= st.threshold) ? st.left : st.right;
        }
        return v;
      }
      case RegressorConfig::Family::linear: {
        const auto& coef = linear_coefs[handle];
        double v = coef(0);
        for (std::size_t j = 0; j < p; ++j) v += coef(j + 1) * qs[j];
        return v;
      }
      default:
        return global_mean[handle];
    }
  }
};

SmootherSet::SmootherSet(std::vector<double> x, std::size_t n, std::size_t p,
                         RegressorConfig cfg) {
  cfg.validate();
  if (n < 2) throw DomainError("smoother: need at least 2 training samples");
  if (p < 1 || x.size() != n * p) throw DomainError("smoother: inconsistent design shape");
  impl_ = std::make_shared<Impl>();
  n_ = n;
  impl_->cfg = cfg;
  impl_->n = n;
  impl_->p = p;
  impl_->center.assign(p, 0.0);
  impl_->scale.assign(p, 0.0);
  for (std::size_t j = 0; j < p; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += x[i * p + j];
    m /= static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = x[i * p + j] - m;
      ss += d * d;
    }
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));
    impl_->center[j] = m;
    impl_->scale[j] = sd > 0.0 ? 1.0 / sd : 0.0;  // zero-variance coordinates drop out
  }
  impl_->xs.resize(n * p);
  for (std::size_t i = 0; i < n; ++i) {
    impl_->standardize_query({x.data() + i * p, p}, impl_->xs.data() + i * p);
  }
  if (cfg.family == RegressorConfig::Family::kernel_smoother) {
    impl_->bandwidth = cfg.bandwidth_scale *
                       std::pow(static_cast<double>(n), -1.0 / (static_cast<double>(p) + 4.0));
  }
}

SmootherSet::~SmootherSet() = default;

std::shared_ptr<SmootherSet> SmootherSet::create(std::vector<double> x, std::size_t n,
                                                 std::size_t p, RegressorConfig cfg) {
  return std::shared_ptr<SmootherSet>(new SmootherSet(std::move(x), n, p, cfg));
}

int SmootherSet::add_response(std::vector<double> r) {
  auto& im = *impl_;
  if (r.size() != im.n) throw DomainError("smoother: response length mismatch");
  const int handle = static_cast<int>(im.responses.size());
  im.global_mean.push_back(mean(r));
  switch (im.cfg.family) {
    case RegressorConfig::Family::knn: {
      int k;
      if (im.cfg.selection == RegressorConfig::Selection::cross_validated) {
        k = im.choose_k_cv(r);
      } else {
        k = im.cfg.k;
      }
      im.ks.push_back(k);
      im.k_max = std::max(im.k_max, std::min<int>(k, static_cast<int>(im.n)));
      break;
    }
    case RegressorConfig::Family::stump_ensemble: {
      im.stump_models.emplace_back();
      im.fit_stumps(r, im.stump_models.back());
      break;
    }
    case RegressorConfig::Family::linear: {
      im.linear_coefs.push_back(im.fit_linear(r));
      break;
    }
    case RegressorConfig::Family::kernel_smoother:
      break;
  }
  im.responses.push_back(std::move(r));
  return handle;
}

std::size_t SmootherSet::response_count() const { return impl_->responses.size(); }

int SmootherSet::chosen_k(int handle) const {
  const auto& im = *impl_;
  if (im.cfg.family != RegressorConfig::Family::knn) return 0;
  return im.ks.at(handle);
}

void SmootherSet::predict_all(std::span<const double> q, double* out) const {
  const auto& im = *impl_;
  if (q.size() != im.p) throw DomainError("smoother: query dimension mismatch");
  std::vector<double> qs(im.p);
  im.standardize_query(q, qs.data());
  if (im.cfg.family == RegressorConfig::Family::knn) {
    thread_local std::vector<std::pair<double, std::uint32_t>> scratch;
    thread_local std::vector<std::uint32_t> order;
    im.neighbor_prefix(qs.data(), static_cast<std::size_t>(im.k_max), scratch, order);
    for (std::size_t h = 0; h < im.responses.size(); ++h) {
      out[h] = im.eval_response(h, order);
    }
  } else {
    for (std::size_t h = 0; h < im.responses.size(); ++h) {
      out[h] = im.eval_non_knn(h, qs.data());
    }
  }
}

double SmootherSet::predict_one(int handle, std::span<const double> q) const {
  const auto& im = *impl_;
  if (q.size() != im.p) throw DomainError("smoother: query dimension mismatch");
  std::vector<double> qs(im.p);
  im.standardize_query(q, qs.data());
  if (im.cfg.family == RegressorConfig::Family::knn) {
    thread_local std::vector<std::pair<double, std::uint32_t>> scratch;
    thread_local std::vector<std::uint32_t> order;
    im.neighbor_prefix(qs.data(),
                       static_cast<std::size_t>(std::min<int>(im.ks[handle],
                                                              static_cast<int>(im.n))),
                       scratch, order);
    return im.eval_response(static_cast<std::size_t>(handle), order);
  }
  return im.eval_non_knn(static_cast<std::size_t>(handle), qs.data());
}

MeanFn SmootherSet::fn(int handle) const {
  // The closure owns a copy of the set (shared impl), keeping the model alive.
  auto owned = std::make_shared<SmootherSet>(*this);
  return [owned, handle](std::span<const double> q) {
    return owned->predict_one(handle, q);
  };
}

MeanFn fit_conditional_mean(std::vector<double> x_rowmajor, std::size_t n, std::size_t p,
                            std::vector<double> r, const RegressorConfig& config) {
  if (n == 0) throw DomainError("fit_conditional_mean: empty sample");
  if (r.size() != n) throw DomainError("fit_conditional_mean: response length mismatch");
  auto set = SmootherSet::create(std::move(x_rowmajor), n, p, config);
  const int h = set->add_response(std::move(r));
  return set->fn(h);
}

std::pair<MeanFn, MeanFn> fit_conditional_second_moments(
    std::vector<double> x_rowmajor, std::size_t n, std::size_t p,
    std::span<const double> y, std::span<const double> y_dagger,
    const RegressorConfig& config) {
  if (n < 3) throw DomainError("fit_conditional_second_moments: need at least 3 samples");
  auto set = SmootherSet::create(std::move(x_rowmajor), n, p, config);
  std::vector<double> ry(y.begin(), y.end());
  std::vector<double> rd(y_dagger.begin(), y_dagger.end());
  std::vector<double> ryd(n), rdd(n);
  for (std::size_t i = 0; i < n; ++i) {
    ryd[i] = ry[i] * rd[i];
    rdd[i] = rd[i] * rd[i];
  }
  const int h_y = set->add_response(std::move(ry));
  const int h_d = set->add_response(std::move(rd));
  const int h_yd = set->add_response(std::move(ryd));
  const int h_dd = set->add_response(std::move(rdd));
  auto owned = std::make_shared<SmootherSet>(*set);
  MeanFn gamma = [owned, h_y, h_d, h_yd](std::span<const double> q) {
    std::vector<double> out(owned->response_count());
    owned->predict_all(q, out.data());
    return out[h_yd] - out[h_y] * out[h_d];
  };
  MeanFn nu = [owned, h_d, h_dd](std::span<const double> q) {
    std::vector<double> out(owned->response_count());
    owned->predict_all(q, out.data());
    return std::max(0.0, out[h_dd] - out[h_d] * out[h_d]);
  };
  return {std::move(gamma), std::move(nu)};
}

const NuisanceEntry& NuisanceBundle::at(int fold, int arm) const {
  auto it = entries_.find({fold, arm});
  if (it == entries_.end()) {
    throw DomainError("nuisance bundle: no entry for fold " + std::to_string(fold) +
                      ", arm " + std::to_string(arm));
  }
  return it->second;
}

NuisanceEntry& NuisanceBundle::put(int fold, int arm) { return entries_[{fold, arm}]; }

bool NuisanceBundle::has(int fold, int arm) const {
  return entries_.count({fold, arm}) > 0;
}

NuisanceEntry fit_fold_entry(const RctDataset& data,
                             std::span<const std::uint32_t> fold_members, int arm,
                             std::span<const double> y_dagger,
                             const RegressorConfig& mean_config,
                             const RegressorConfig& moment_config, bool with_mu,
                             bool with_mu_dagger, bool with_second_moments,
                             const std::string& fold_label) {
  const std::size_t p = data.p();
  std::vector<std::uint32_t> arm_subjects;
  for (std::uint32_t i : fold_members) {
    if (data.t()[i] == arm) arm_subjects.push_back(i);
  }
  const bool arm_side = with_mu || with_second_moments;
  if (arm_side && arm_subjects.size() < 2) {
    throw DomainError("cross_fit: fold " + fold_label + " has " +
                      std::to_string(arm_subjects.size()) + " arm-" +
                      std::to_string(arm) + " subjects, need at least 2");
  }
  if (with_second_moments && arm_subjects.size() < 3) {
    throw DomainError("cross_fit: fold " + fold_label + " needs at least 3 arm-" +
                      std::to_string(arm) + " subjects for second moments");
  }

  NuisanceEntry entry;
  if (arm_side) {
    std::vector<double> x_arm(arm_subjects.size() * p);
    std::vector<double> y_arm(arm_subjects.size());
    std::vector<double> d_arm(arm_subjects.size());
    for (std::size_t j = 0; j < arm_subjects.size(); ++j) {
      const std::uint32_t i = arm_subjects[j];
      std::copy_n(data.x_row(i).data(), p, x_arm.data() + j * p);
      y_arm[j] = data.y()[i];
      d_arm[j] = y_dagger[i];
    }
    // The arm-side design is shared between the mean fit and the second
    // moments only when both use the same config.
    const bool share_arm_set = !with_second_moments ||
                               (mean_config.family == moment_config.family &&
                                mean_config.selection == moment_config.selection &&
                                mean_config.k == moment_config.k);
    auto arm_set = SmootherSet::create(x_arm, arm_subjects.size(), p, mean_config);
    entry.h_y = arm_set->add_response(y_arm);
    if (with_second_moments && share_arm_set) {
      std::vector<double> yd(arm_subjects.size()), dd(arm_subjects.size());
      for (std::size_t j = 0; j < arm_subjects.size(); ++j) {
        yd[j] = y_arm[j] * d_arm[j];
        dd[j] = d_arm[j] * d_arm[j];
      }
      entry.h_d = arm_set->add_response(d_arm);
      entry.h_yd = arm_set->add_response(std::move(yd));
      entry.h_dd = arm_set->add_response(std::move(dd));
    }
    entry.arm_set = arm_set;
    entry.mu_hat = arm_set->fn(entry.h_y);
    if (with_second_moments) {
      if (share_arm_set) {
        const auto set = arm_set;
        const int h_y = entry.h_y, h_d = entry.h_d, h_yd = entry.h_yd, h_dd = entry.h_dd;
        entry.gamma_hat = [set, h_y, h_d, h_yd](std::span<const double> q) {
          std::vector<double> out(set->response_count());
          set->predict_all(q, out.data());
          return out[h_yd] - out[h_y] * out[h_d];
        };
        entry.nu_hat = [set, h_d, h_dd](std::span<const double> q) {
          std::vector<double> out(set->response_count());
          set->predict_all(q, out.data());
          return std::max(0.0, out[h_dd] - out[h_d] * out[h_d]);
        };
      } else {
        auto [gamma, nu] = fit_conditional_second_moments(
            std::move(x_arm), arm_subjects.size(), p, y_arm, d_arm, moment_config);
        entry.gamma_hat = std::move(gamma);
        entry.nu_hat = std::move(nu);
      }
    }
  }

  if (with_mu_dagger) {
    std::vector<double> x_all(fold_members.size() * p);
    std::vector<double> d_all(fold_members.size());
    for (std::size_t j = 0; j < fold_members.size(); ++j) {
      const std::uint32_t i = fold_members[j];
      std::copy_n(data.x_row(i).data(), p, x_all.data() + j * p);
      d_all[j] = y_dagger[i];
    }
    auto all_set = SmootherSet::create(std::move(x_all), fold_members.size(), p, mean_config);
    entry.h_dag = all_set->add_response(std::move(d_all));
    entry.all_set = all_set;
    entry.mu_dagger_hat = all_set->fn(entry.h_dag);
  }
  return entry;
}

NuisanceBundle cross_fit(const RctDataset& data, const FoldAssignment& folds,
                         std::span<const double> y_dagger, int arm,
                         const RegressorConfig& mean_config,
                         const RegressorConfig& moment_config,
                         bool with_second_moments, bool with_mu_dagger) {
  if (y_dagger.size() != data.n()) {
    throw DomainError("cross_fit: prediction vector length mismatch");
  }
  NuisanceBundle bundle;
  const auto members = folds.members();
  for (int fold = 1; fold <= folds.K; ++fold) {
    bundle.put(fold, arm) = fit_fold_entry(
        data, members[fold - 1], arm, y_dagger, mean_config, moment_config,
        /*with_mu=*/true, with_mu_dagger, with_second_moments, std::to_string(fold));
  }
  return bundle;
}

}  // namespace calm
