#include "calm/calibration.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "calm/stats.hpp"

namespace calm {

const char* weight_kind_name(WeightKind k) {
  switch (k) {
    case WeightKind::smooth: return "smooth";
    case WeightKind::robust: return "robust";
    case WeightKind::ate_vector: return "ate";
    case WeightKind::zero: return "zero";
  }
  return "?";
}

double default_eps_nu(std::span<const double> y_dagger_arm, double scale) {
  return scale * sample_variance(y_dagger_arm);
}

double CalibrationWeights::robust_at(int stratum, bool* missing) const {
  auto it = robust_table.find(stratum);
  if (it == robust_table.end()) {
    if (missing) *missing = true;
    return 0.0;
  }
  if (missing) *missing = false;
  return it->second;
}

CalibrationWeights weight_smooth(const NuisanceEntry& entry, double eps_nu) {
  if (!entry.gamma_hat || !entry.nu_hat) {
    throw DomainError("weight_smooth: nuisance entry lacks second moments");
  }
  CalibrationWeights w;
  w.kind = WeightKind::smooth;
  w.eps_nu = eps_nu;
  if (entry.arm_set && entry.h_yd >= 0) {
    // Batched path: one neighbor pass serves gamma and nu.
    auto set = entry.arm_set;
    const int h_y = entry.h_y, h_d = entry.h_d, h_yd = entry.h_yd, h_dd = entry.h_dd;
    w.smooth = [set, h_y, h_d, h_yd, h_dd, eps_nu](std::span<const double> q) {
      std::vector<double> out(set->response_count());
      set->predict_all(q, out.data());
      const double nu = std::max(0.0, out[h_dd] - out[h_d] * out[h_d]);
      if (nu < eps_nu) return 0.0;
      return (out[h_yd] - out[h_y] * out[h_d]) / nu;
    };
  } else {
    auto gamma = entry.gamma_hat;
    auto nu = entry.nu_hat;
    w.smooth = [gamma, nu, eps_nu](std::span<const double> q) {
      const double v = nu(q);
      if (v < eps_nu) return 0.0;
      return gamma(q) / v;
    };
  }
  return w;
}

CalibrationWeights weight_robust(
    const RctDataset& data, std::span<const std::uint32_t> fold_members, int arm,
    std::span<const int> strata,
    const std::function<double(std::span<const double>)>& mu_hat,
    const std::function<double(std::span<const double>)>& mu_dagger_hat,
    std::span<const double> y_dagger, double eps_nu) {
  std::map<int, std::pair<double, double>> sums;  // stratum -> (num, den)
  for (std::uint32_t i : fold_members) {
    if (data.t()[i] != arm) continue;
    const double lam = data.lambda_of(i, arm);
    const auto x = data.x_row(i);
    const double ry = data.y()[i] - mu_hat(x);
    const double rd = y_dagger[i] - mu_dagger_hat(x);
    auto& [num, den] = sums[strata[i]];
    num += lam * ry * rd;
    den += lam * rd * rd;
  }
  CalibrationWeights w;
  w.kind = WeightKind::robust;
  w.eps_nu = eps_nu;
  for (const auto& [code, nd] : sums) {
    w.robust_table[code] = (nd.second < eps_nu) ? 0.0 : nd.first / nd.second;
  }
  return w;
}

AteWeights solve_ate_system(double s11, double s12, double s22, double c1, double c2) {
  s11 = std::max(0.0, s11);
  s22 = std::max(0.0, s22);
  AteWeights out;

  const double tr = s11 + s22;
  const double det = s11 * s22 - s12 * s12;
  const double disc = std::sqrt(std::max(0.0, tr * tr - 4.0 * det));
  const double lam_max = 0.5 * (tr + disc);
  const double lam_min = 0.5 * (tr - disc);
  const bool ill = !(lam_min > 0.0) || lam_max / lam_min > 1e8;

  double a11 = s11, a22 = s22;
  if (ill) {
    out.ridge_used = true;
    const double ridge = 1e-6 * tr / 2.0;
    a11 += ridge;
    a22 += ridge;
  }
  const double d = a11 * a22 - s12 * s12;
  const double scale = std::max({std::fabs(a11), std::fabs(a22), std::fabs(s12), 1e-300});
  if (!(std::fabs(d) > 1e-14 * scale * scale)) {
    // Degenerate prediction variance in both arms; no information to borrow.
    return out;
  }
  out.w_t = (a22 * c1 - s12 * c2) / d;
  out.w_t_prime = (a11 * c2 - s12 * c1) / d;
  const double r1 = a11 * out.w_t + s12 * out.w_t_prime - c1;
  const double r2 = s12 * out.w_t + a22 * out.w_t_prime - c2;
  out.residual_norm = std::sqrt(r1 * r1 + r2 * r2);
  return out;
}

CalibrationWeights weight_ate(const RctDataset& data,
                              std::span<const std::uint32_t> fold_members, int arm_t,
                              int arm_t_prime, std::span<const double> y_dagger_t,
                              std::span<const double> y_dagger_t_prime,
                              const RegressorConfig& moment_config) {
  const std::size_t m = fold_members.size();
  const std::size_t p = data.p();
  if (m < 3) throw DomainError("weight_ate: need at least 3 training subjects");

  std::vector<double> x(m * p);
  std::vector<double> v1(m), v2(m), v11(m), v22(m), v12(m), z(m), v1z(m), v2z(m);
  for (std::size_t j = 0; j < m; ++j) {
    const std::uint32_t i = fold_members[j];
    std::copy_n(data.x_row(i).data(), p, x.data() + j * p);
    const double lt = data.lambda_of(i, arm_t);
    const double ltp = data.lambda_of(i, arm_t_prime);
    const double st = std::sqrt(lt);
    const double stp = std::sqrt(ltp);
    v1[j] = st * y_dagger_t[i];
    v2[j] = stp * y_dagger_t_prime[i];
    v11[j] = v1[j] * v1[j];
    v22[j] = v2[j] * v2[j];
    v12[j] = v1[j] * v2[j];
    double zi = 0.0;
    if (data.t()[i] == arm_t) zi = st / data.e_of(i, arm_t) * data.y()[i];
    if (data.t()[i] == arm_t_prime) zi = stp / data.e_of(i, arm_t_prime) * data.y()[i];
    z[j] = zi;
    v1z[j] = v1[j] * zi;
    v2z[j] = v2[j] * zi;
  }

  auto set = SmootherSet::create(std::move(x), m, p, moment_config);
  struct Handles {
    int v1, v2, v11, v22, v12, z, v1z, v2z;
  } h{};
  h.v1 = set->add_response(std::move(v1));
  h.v2 = set->add_response(std::move(v2));
  h.v11 = set->add_response(std::move(v11));
  h.v22 = set->add_response(std::move(v22));
  h.v12 = set->add_response(std::move(v12));
  h.z = set->add_response(std::move(z));
  h.v1z = set->add_response(std::move(v1z));
  h.v2z = set->add_response(std::move(v2z));

  CalibrationWeights w;
  w.kind = WeightKind::ate_vector;
  std::shared_ptr<SmootherSet> owned = set;
  w.ate = [owned, h](std::span<const double> q) {
    std::vector<double> out(owned->response_count());
    owned->predict_all(q, out.data());
    const double s11 = out[h.v11] - out[h.v1] * out[h.v1];
    const double s22 = out[h.v22] - out[h.v2] * out[h.v2];
    const double s12 = out[h.v12] - out[h.v1] * out[h.v2];
    const double c1 = out[h.v1z] - out[h.v1] * out[h.z];
    const double c2 = out[h.v2z] - out[h.v2] * out[h.z];
    return solve_ate_system(s11, s12, s22, c1, c2);
  };
  return w;
}

std::string weights_to_json(const CalibrationWeights& w, std::span<const double> grid_flat,
                            std::size_t p) {
  nlohmann::json j;
  j["kind"] = weight_kind_name(w.kind);
  j["eps_nu"] = w.eps_nu;
  if (w.kind == WeightKind::robust) {
    nlohmann::json table = nlohmann::json::object();
    for (const auto& [code, omega] : w.robust_table) {
      table[std::to_string(code)] = omega;
    }
    j["stratum_table"] = table;
  } else if (w.kind == WeightKind::smooth && w.smooth) {
    nlohmann::json rows = nlohmann::json::array();
    const std::size_t n = p > 0 ? grid_flat.size() / p : 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::span<const double> q{grid_flat.data() + i * p, p};
      rows.push_back({{"x", std::vector<double>(q.begin(), q.end())},
                      {"omega", w.smooth(q)}});
    }
    j["grid"] = rows;
  } else if (w.kind == WeightKind::ate_vector && w.ate) {
    nlohmann::json rows = nlohmann::json::array();
    const std::size_t n = p > 0 ? grid_flat.size() / p : 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::span<const double> q{grid_flat.data() + i * p, p};
      const AteWeights aw = w.ate(q);
      rows.push_back({{"x", std::vector<double>(q.begin(), q.end())},
                      {"omega_t", aw.w_t},
                      {"omega_t_prime", aw.w_t_prime}});
    }
    j["grid"] = rows;
  }
  return j.dump();
}

}  // namespace calm
