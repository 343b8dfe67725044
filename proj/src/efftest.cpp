#include "calm/efftest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "calm/rng.hpp"

namespace calm {

namespace {

struct ArmData {
  std::vector<double> xr, y, yd;
};

ArmData collect_arm(const RctDataset& data, std::span<const double> y_dagger, int arm,
                    int coordinate) {
  if (coordinate < 0 || static_cast<std::size_t>(coordinate) >= data.p()) {
    throw DomainError("efficiency test: coordinate index outside 0..p-1");
  }
  ArmData out;
  for (std::size_t i = 0; i < data.n(); ++i) {
    if (data.t()[i] != arm) continue;
    out.xr.push_back(data.x_row(i)[coordinate]);
    out.y.push_back(data.y()[i]);
    out.yd.push_back(y_dagger[i]);
  }
  return out;
}

double rot_bandwidth(std::span<const double> xr) {
  const double n = static_cast<double>(xr.size());
  // Rule of thumb shrunk by n^{-0.1} so the smoothing bias vanishes faster
  // than the sup-statistic's standard error.
  return 1.06 * sample_sd(xr) * std::pow(n, -0.2) * std::pow(n, -0.1);
}

}  // namespace

GammaAtX kernel_gamma(std::span<const double> x_reduced, std::span<const double> y,
                      std::span<const double> y_dagger, double x, double h,
                      KernelKind kernel) {
  const std::size_t n = x_reduced.size();
  if (n < 10) throw DomainError("kernel_gamma: need at least 10 arm subjects");
  if (!(h > 0.0)) throw DomainError("kernel_gamma: bandwidth must be positive");

  // NW means of Y and Y+ at the data points, shared bandwidth.
  std::vector<double> mu(n), mud(n);
  for (std::size_t i = 0; i < n; ++i) {
    double sw = 0.0, sy = 0.0, sd = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double k = kernel_eval(kernel, (x_reduced[j] - x_reduced[i]) / h);
      sw += k;
      sy += k * y[j];
      sd += k * y_dagger[j];
    }
    mu[i] = sy / sw;
    mud[i] = sd / sw;
  }

  double sw = 0.0, sy = 0.0, sd = 0.0, syd = 0.0;
  std::vector<double> kx(n);
  for (std::size_t i = 0; i < n; ++i) {
    kx[i] = kernel_eval(kernel, (x_reduced[i] - x) / h);
    sw += kx[i];
    sy += kx[i] * y[i];
    sd += kx[i] * y_dagger[i];
    syd += kx[i] * y[i] * y_dagger[i];
  }
  if (!(sw > 0.0)) {
    throw OutOfSupportError("kernel_gamma: zero kernel mass at x = " + std::to_string(x));
  }
  GammaAtX out;
  out.gamma = syd / sw - (sy / sw) * (sd / sw);

  const double fx = sw / (static_cast<double>(n) * h);
  double s2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double psi = kx[i] * (y[i] - mu[i]) * (y_dagger[i] - mud[i]) / fx;
    s2 += psi * psi;
  }
  out.sigma = std::sqrt(s2 / (static_cast<double>(n) * h));
  return out;
}

EffTestReport sup_test(const RctDataset& data, const PredictionSet& predictions,
                       int arm, const EffTestConfig& config) {
  const std::vector<double> ydag = predictions.bind_zero_shot(data, arm);
  return sup_test(data, ydag, arm, config);
}

EffTestReport sup_test(const RctDataset& data, std::span<const double> y_dagger,
                       int arm, const EffTestConfig& config) {
  if (config.n_sim < 1000) throw DomainError("sup_test: n_sim must be >= 1000");
  const ArmData ad = collect_arm(data, y_dagger, arm, config.coordinate);
  const std::size_t n = ad.xr.size();
  if (n < 10) throw DomainError("sup_test: need at least 10 arm subjects");

  const double h = config.h > 0.0 ? config.h : rot_bandwidth(ad.xr);

  std::vector<double> grid = config.grid;
  if (grid.empty()) {
    if (config.grid_size < 5) throw DomainError("sup_test: grid needs at least 5 points");
    for (int m = 0; m < config.grid_size; ++m) {
      const double q =
          0.05 + 0.90 * static_cast<double>(m) / static_cast<double>(config.grid_size - 1);
      grid.push_back(quantile(ad.xr, q));
    }
  }
  const std::size_t M = grid.size();
  if (M < 1) throw DomainError("sup_test: empty grid");

  // In-sample kernel means and centered cross residuals.
  std::vector<double> resid(n);
  {
    std::vector<double> mu(n), mud(n);
    for (std::size_t i = 0; i < n; ++i) {
      double sw = 0.0, sy = 0.0, sd = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double k = kernel_eval(config.kernel, (ad.xr[j] - ad.xr[i]) / h);
        sw += k;
        sy += k * ad.y[j];
        sd += k * ad.yd[j];
      }
      mu[i] = sy / sw;
      mud[i] = sd / sw;
    }
    for (std::size_t i = 0; i < n; ++i) {
      resid[i] = (ad.y[i] - mu[i]) * (ad.yd[i] - mud[i]);
    }
  }

  // Kernel weights, densities and gamma estimates per grid point.
  std::vector<std::vector<double>> kw(M, std::vector<double>(n));
  std::vector<double> fx(M), gamma(M);
  double fx_max = 0.0;
  for (std::size_t m = 0; m < M; ++m) {
    double sw = 0.0, sy = 0.0, sd = 0.0, syd = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double k = kernel_eval(config.kernel, (ad.xr[i] - grid[m]) / h);
      kw[m][i] = k;
      sw += k;
      sy += k * ad.y[i];
      sd += k * ad.yd[i];
      syd += k * ad.y[i] * ad.yd[i];
    }
    if (!(sw > 0.0)) {
      throw OutOfSupportError("sup_test: zero kernel mass at grid point " +
                              std::to_string(grid[m]));
    }
    gamma[m] = syd / sw - (sy / sw) * (sd / sw);
    fx[m] = sw / (static_cast<double>(n) * h);
    fx_max = std::max(fx_max, fx[m]);
  }
  const double fx_floor = 1e-3 * fx_max;

  // Plug-in influence matrix and its covariance across the grid.
  Eigen::MatrixXd psi(M, n);
  for (std::size_t m = 0; m < M; ++m) {
    const double f = std::max(fx[m], fx_floor);
    for (std::size_t i = 0; i < n; ++i) {
      psi(m, i) = kw[m][i] * resid[i] / f;
    }
  }
  const double scale = 1.0 / (static_cast<double>(n) * h);
  Eigen::MatrixXd sigma_mat = scale * (psi * psi.transpose());

  std::vector<double> sigma(M);
  for (std::size_t m = 0; m < M; ++m) sigma[m] = std::sqrt(std::max(0.0, sigma_mat(m, m)));

  const double root = std::sqrt(static_cast<double>(n) * h);
  double t_stat = 0.0;
  for (std::size_t m = 0; m < M; ++m) {
    const double tm = sigma[m] > 0.0 ? std::fabs(root * gamma[m] / sigma[m]) : 0.0;
    t_stat = std::max(t_stat, tm);
  }

  Eigen::MatrixXd corr = Eigen::MatrixXd::Identity(M, M);
  for (std::size_t a = 0; a < M; ++a) {
    for (std::size_t b = 0; b < M; ++b) {
      if (sigma[a] > 0.0 && sigma[b] > 0.0) {
        corr(a, b) = sigma_mat(a, b) / (sigma[a] * sigma[b]);
      } else {
        corr(a, b) = (a == b) ? 1.0 : 0.0;
      }
    }
  }

  Rng rng(derive_stream(config.seed, {fnv1a64("efftest_sim")}));
  std::vector<double> sups(static_cast<std::size_t>(config.n_sim));
  if (config.engine == EffTestConfig::Engine::gaussian_sim) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(corr);
    const Eigen::VectorXd& evals = eig.eigenvalues();
    if (evals.minCoeff() < -1e-8 * std::max(1.0, evals.maxCoeff())) {
      std::fprintf(stderr,
                   "[calm] warning: correlation matrix not PSD (min eigenvalue %.3e); "
                   "clipping at 0\n",
                   evals.minCoeff());
    }
    Eigen::MatrixXd half = eig.eigenvectors();
    for (std::size_t m = 0; m < M; ++m) {
      half.col(m) *= std::sqrt(std::max(0.0, evals(m)));
    }
    Eigen::VectorXd z(M), g(M);
    for (int s = 0; s < config.n_sim; ++s) {
      for (std::size_t m = 0; m < M; ++m) z(m) = rng.normal();
      g = half * z;
      sups[s] = g.cwiseAbs().maxCoeff();
    }
  } else {
    // Multiplier bootstrap: perturb the plug-in influence values directly.
    std::vector<double> xi(n);
    for (int s = 0; s < config.n_sim; ++s) {
      for (std::size_t i = 0; i < n; ++i) xi[i] = rng.normal();
      double sup = 0.0;
      for (std::size_t m = 0; m < M; ++m) {
        if (!(sigma[m] > 0.0)) continue;
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += xi[i] * psi(m, i);
        sup = std::max(sup, std::fabs(acc / (root * sigma[m])));
      }
      sups[s] = sup;
    }
  }

  std::vector<double> sorted = sups;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t k =
      static_cast<std::size_t>(std::floor((1.0 - config.alpha) * config.n_sim));
  const double critical = sorted[std::min(k, sorted.size() - 1)];
  std::size_t exceed = 0;
  for (double s : sups) {
    if (s >= t_stat) ++exceed;
  }

  EffTestReport report;
  report.grid = std::move(grid);
  report.gamma_hat = std::move(gamma);
  report.sigma_hat = std::move(sigma);
  report.corr.resize(M * M);
  for (std::size_t a = 0; a < M; ++a) {
    for (std::size_t b = 0; b < M; ++b) report.corr[a * M + b] = corr(a, b);
  }
  report.t_stat = t_stat;
  report.critical_value = critical;
  report.p_value = static_cast<double>(exceed) / static_cast<double>(config.n_sim);
  report.reject = t_stat > critical;
  report.h = h;
  report.n_sim = config.n_sim;
  report.alpha = config.alpha;
  report.n_arm = n;
  report.engine = config.engine == EffTestConfig::Engine::gaussian_sim
                      ? "gaussian_sim"
                      : "multiplier_bootstrap";
  return report;
}

std::string EffTestReport::to_json() const {
  nlohmann::json j;
  j["grid"] = grid;
  j["gamma_hat"] = gamma_hat;
  j["sigma_hat"] = sigma_hat;
  j["t_stat"] = t_stat;
  j["critical_value"] = critical_value;
  j["p_value"] = p_value;
  j["reject"] = reject;
  j["h"] = h;
  j["n_sim"] = n_sim;
  j["alpha"] = alpha;
  j["n_arm"] = n_arm;
  j["engine"] = engine;
  return j.dump();
}

}  // namespace calm
