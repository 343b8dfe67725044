#include "calm/predictor.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "calm/rng.hpp"

namespace calm {

PredictionSet PredictionSet::zero_shot() {
  PredictionSet p;
  p.mode_ = Mode::zero_shot;
  return p;
}

PredictionSet PredictionSet::few_shot(int m, int B) {
  if (B < 1) throw DomainError("PredictionSet: B must be >= 1");
  if (m < 1) throw DomainError("PredictionSet: m must be >= 1");
  PredictionSet p;
  p.mode_ = Mode::few_shot;
  p.m_ = m;
  p.B_ = B;
  return p;
}

void PredictionSet::set_zero_shot(const std::string& id, int arm, double value) {
  zero_[{id, arm}] = value;
}

std::optional<double> PredictionSet::zero_shot_value(const std::string& id, int arm) const {
  auto it = zero_.find({id, arm});
  if (it == zero_.end()) return std::nullopt;
  return it->second;
}

void PredictionSet::set_few_shot_draws(const std::string& id, int arm, int donor_fold,
                                       std::vector<double> draws) {
  if (mode_ != Mode::few_shot) throw DomainError("PredictionSet: not in few-shot mode");
  if (static_cast<int>(draws.size()) != B_) {
    throw DomainError("PredictionSet: expected all " + std::to_string(B_) +
                      " draws for (" + id + ", arm " + std::to_string(arm) +
                      ", donor fold " + std::to_string(donor_fold) + "), got " +
                      std::to_string(draws.size()));
  }
  few_[{id, arm, donor_fold}] = std::move(draws);
}

const std::vector<double>* PredictionSet::few_shot_draws(const std::string& id, int arm,
                                                         int donor_fold) const {
  auto it = few_.find({id, arm, donor_fold});
  if (it == few_.end()) return nullptr;
  return &it->second;
}

std::optional<double> PredictionSet::few_shot_mean(const std::string& id, int arm,
                                                   int donor_fold) const {
  const auto* draws = few_shot_draws(id, arm, donor_fold);
  if (!draws) return std::nullopt;
  return mean(*draws);
}

PredictionSet PredictionSet::load_jsonl(std::istream& in) {
  // Mode and B are inferred from the records; few-shot draw counts are
  // validated to be uniform.
  std::string line;
  std::size_t line_no = 0;
  bool any_few = false, any_zero = false;
  std::map<std::pair<std::string, int>, double> zero;
  std::map<std::tuple<std::string, int, int>, std::map<int, double>> few;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw ParseError("predictions line " + std::to_string(line_no) + ": " + e.what());
    }
    if (j.is_object() && j.contains("_meta")) continue;  // embedded config echo
    if (!j.contains("id") || !j.contains("arm") || !j.contains("value")) {
      throw ParseError("predictions line " + std::to_string(line_no) +
                       ": need id, arm, value");
    }
    const std::string id = j.at("id").is_string() ? j.at("id").get<std::string>()
                                                  : j.at("id").dump();
    const int arm = j.at("arm").get<int>();
    const double value = j.at("value").get<double>();
    if (j.contains("donor_fold")) {
      any_few = true;
      const int donor = j.at("donor_fold").get<int>();
      const int b = j.contains("b") ? j.at("b").get<int>() : 1;
      few[{id, arm, donor}][b] = value;
    } else {
      any_zero = true;
      zero[{id, arm}] = value;
    }
  }
  if (any_few && any_zero) {
    throw ParseError("predictions file mixes zero-shot and few-shot records");
  }
  if (!any_few) {
    PredictionSet p = PredictionSet::zero_shot();
    p.zero_ = std::move(zero);
    return p;
  }
  int B = 0;
  for (const auto& [key, draws] : few) {
    B = std::max(B, static_cast<int>(draws.size()));
  }
  PredictionSet p = PredictionSet::few_shot(/*m=*/1, B);
  for (auto& [key, draws] : few) {
    if (static_cast<int>(draws.size()) != B) {
      throw ParseError("predictions: (" + std::get<0>(key) + ", arm " +
                       std::to_string(std::get<1>(key)) + ", donor fold " +
                       std::to_string(std::get<2>(key)) + ") has " +
                       std::to_string(draws.size()) + " draws, expected " +
                       std::to_string(B));
    }
    std::vector<double> v;
    v.reserve(draws.size());
    for (const auto& [b, value] : draws) v.push_back(value);
    p.set_few_shot_draws(std::get<0>(key), std::get<1>(key), std::get<2>(key),
                         std::move(v));
  }
  return p;
}

PredictionSet PredictionSet::load_jsonl_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open predictions file '" + path + "'");
  return load_jsonl(in);
}

void PredictionSet::save_jsonl(std::ostream& out) const {
  for (const auto& [key, value] : zero_) {
    nlohmann::json j{{"id", key.first}, {"arm", key.second}, {"value", value}};
    out << j.dump() << '\n';
  }
  for (const auto& [key, draws] : few_) {
    for (std::size_t b = 0; b < draws.size(); ++b) {
      nlohmann::json j{{"id", key.id},
                       {"arm", key.arm},
                       {"donor_fold", key.donor_fold},
                       {"b", static_cast<int>(b + 1)},
                       {"value", draws[b]}};
      out << j.dump() << '\n';
    }
  }
}

PredictionSet PredictionSet::aggregated() const {
  if (mode_ == Mode::zero_shot) return *this;
  PredictionSet p = PredictionSet::few_shot(m_, 1);
  p.B_ = 1;
  for (const auto& [key, draws] : few_) {
    p.few_[{key.id, key.arm, key.donor_fold}] = {mean(draws)};
  }
  return p;
}

std::vector<double> PredictionSet::bind_zero_shot(const RctDataset& d, int arm) const {
  std::vector<double> out(d.n());
  for (std::size_t i = 0; i < d.n(); ++i) {
    auto v = zero_shot_value(d.ids()[i], arm);
    if (!v) {
      throw MissingPredictionError("no prediction for subject '" + d.ids()[i] +
                                   "', arm " + std::to_string(arm));
    }
    out[i] = *v;
  }
  return out;
}

std::vector<double> PredictionSet::bind_few_shot_means(
    const RctDataset& d, int arm, int donor_fold,
    std::span<const std::uint32_t> subjects) const {
  std::vector<double> out(subjects.size());
  for (std::size_t j = 0; j < subjects.size(); ++j) {
    const std::string& id = d.ids()[subjects[j]];
    auto v = few_shot_mean(id, arm, donor_fold);
    if (!v) {
      throw MissingPredictionError("no few-shot prediction for subject '" + id +
                                   "', arm " + std::to_string(arm) + ", donor fold " +
                                   std::to_string(donor_fold));
    }
    out[j] = *v;
  }
  return out;
}

FilePredictor::FilePredictor(PredictionSet values) : values_(std::move(values)) {}

double FilePredictor::predict(const SubjectView& subject, int arm,
                              std::span<const DemoExample>) const {
  auto v = values_.zero_shot_value(std::string(subject.id), arm);
  if (!v) {
    throw MissingPredictionError("no stored prediction for subject '" +
                                 std::string(subject.id) + "', arm " +
                                 std::to_string(arm));
  }
  return *v;
}

MixCoefficients solve_mix(double rho, double residual_sd, double noise_sd) {
  if (std::fabs(rho) > 1.0) throw DomainError("synthetic predictor: |rho_target| > 1");
  const double s_dag = noise_sd < 0.0 ? residual_sd : noise_sd;
  MixCoefficients c;
  if (s_dag == 0.0 || residual_sd == 0.0) return c;  // degenerate: exact mean
  c.a = rho * s_dag / residual_sd;
  c.b = s_dag * std::sqrt(std::max(0.0, 1.0 - rho * rho));
  return c;
}

SyntheticPredictor::SyntheticPredictor(SyntheticPredictorConfig config, Hooks hooks)
    : config_(std::move(config)), hooks_(std::move(hooks)) {
  for (double rho : config_.rho_target) {
    if (std::fabs(rho) > 1.0) throw DomainError("synthetic predictor: |rho_target| > 1");
  }
  if (config_.noise_sd > 0.0 && !(config_.noise_sd < 1e12)) {
    throw DomainError("synthetic predictor: noise_sd not finite");
  }
}

double SyntheticPredictor::rho_for(int arm, std::span<const double> x) const {
  if (!config_.rho_by_stratum.empty() && hooks_.stratum) {
    const int s = hooks_.stratum(x);
    auto it = config_.rho_by_stratum.find(s);
    if (it != config_.rho_by_stratum.end()) return it->second.at(arm - 1);
  }
  if (config_.rho_target.empty()) return 0.0;
  return config_.rho_target.at(arm - 1);
}

void SyntheticPredictor::register_base_values(
    std::vector<std::vector<double>> by_subject_then_arm) {
  base_ = std::move(by_subject_then_arm);
}

double SyntheticPredictor::base_value(const SubjectView& subject, int arm) const {
  if (subject.index < base_.size()) {
    return base_[subject.index][static_cast<std::size_t>(arm - 1)];
  }
  const double mu = hooks_.conditional_mean(arm, subject.x);
  const double resid = hooks_.residual(subject.id, arm, subject.x, subject.z);
  const double rho = rho_for(arm, subject.x);
  const MixCoefficients mix = solve_mix(rho, hooks_.residual_sd(arm), config_.noise_sd);

  double eta = 0.0;
  if (mix.b != 0.0) {
    Rng rng(derive_stream(config_.seed, {fnv1a64("synthetic_eta"), fnv1a64(subject.id),
                                         static_cast<std::uint64_t>(arm)}));
    eta = rng.normal();
  }
  return mu + config_.additive_bias + mix.a * resid + mix.b * eta;
}

double SyntheticPredictor::predict(const SubjectView& subject, int arm,
                                   std::span<const DemoExample> demos) const {
  double value = base_value(subject, arm);

  if (!demos.empty() && config_.fs_coef != 0.0) {
    // In-context effect: demonstrations pull the prediction toward the
    // outcomes of nearby examples.
    const double inv_two_bw2 = 1.0 / (2.0 * config_.fs_bandwidth * config_.fs_bandwidth);
    double wsum = 0.0, ysum = 0.0, plain = 0.0;
    for (const DemoExample& demo : demos) {
      double d2 = 0.0;
      const std::size_t dim = std::min(demo.x.size(), subject.x.size());
      for (std::size_t j = 0; j < dim; ++j) {
        const double diff = demo.x[j] - subject.x[j];
        d2 += diff * diff;
      }
      const double w = std::exp(-d2 * inv_two_bw2);
      wsum += w;
      ysum += w * demo.y;
      plain += demo.y;
    }
    const double demo_mean = wsum > 0.0 ? ysum / wsum
                                        : plain / static_cast<double>(demos.size());
    value += config_.fs_coef * demo_mean;
  }
  return value;
}

RemotePredictor::RemotePredictor(std::string host, int port, std::string path,
                                 std::string cache_path)
    : host_(std::move(host)), port_(port), path_(std::move(path)),
      cache_path_(std::move(cache_path)) {
  std::ifstream in(cache_path_, std::ios::binary);
  if (!in) return;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    cache_[j.at("key").get<std::string>()] = j.at("value").get<double>();
  }
}

RemotePredictor::~RemotePredictor() = default;

std::size_t RemotePredictor::cache_size() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return cache_.size();
}

double RemotePredictor::predict(const SubjectView& subject, int arm,
                                std::span<const DemoExample> demos) const {
  nlohmann::json body;
  body["x"] = std::vector<double>(subject.x.begin(), subject.x.end());
  body["z"] = std::string(subject.z);
  body["arm"] = arm;
  nlohmann::json jdemos = nlohmann::json::array();
  for (const DemoExample& demo : demos) {
    jdemos.push_back({{"x", std::vector<double>(demo.x.begin(), demo.x.end())},
                      {"z", std::string(demo.z)},
                      {"y", demo.y}});
  }
  body["demos"] = jdemos;
  const std::string payload = body.dump();

  char keybuf[64];
  std::snprintf(keybuf, sizeof(keybuf), "%s:%d:%016llx", std::string(subject.id).c_str(),
                arm, static_cast<unsigned long long>(fnv1a64(payload)));
  const std::string key = keybuf;

  {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
  }

  httplib::Client client(host_, port_);
  client.set_connection_timeout(5, 0);
  client.set_read_timeout(30, 0);
  auto res = client.Post(path_, payload, "application/json");
  if (!res) {
    throw RemoteError("remote predictor: transport failure talking to " + host_ + ":" +
                          std::to_string(port_),
                      /*retryable=*/true);
  }
  if (res->status != 200) {
    throw RemoteError("remote predictor: HTTP " + std::to_string(res->status),
                      /*retryable=*/false);
  }
  double value;
  try {
    value = nlohmann::json::parse(res->body).at("value").get<double>();
  } catch (const std::exception& e) {
    throw RemoteError(std::string("remote predictor: malformed response: ") + e.what(),
                      /*retryable=*/false);
  }
  if (!std::isfinite(value)) {
    throw RemoteError("remote predictor: non-finite value", /*retryable=*/false);
  }

  {
    std::lock_guard<std::mutex> lock(mutex_);
    cache_[key] = value;
    std::ofstream out(cache_path_, std::ios::binary | std::ios::app);
    if (out) {
      nlohmann::json j{{"key", key}, {"value", value}};
      out << j.dump() << '\n';
    }
  }
  return value;
}

namespace {

std::vector<std::vector<std::uint32_t>> draw_demo_sets(
    std::span<const std::uint32_t> donor_pool, int arm, int m, int B, std::uint64_t seed,
    int donor_fold_label) {
  if (static_cast<int>(donor_pool.size()) < m) {
    throw DomainError("few-shot aggregation: donor fold has " +
                      std::to_string(donor_pool.size()) + " arm-" + std::to_string(arm) +
                      " subjects, fewer than m = " + std::to_string(m));
  }
  if (B < 1) throw DomainError("few-shot aggregation: B must be >= 1");
  std::vector<std::vector<std::uint32_t>> sets(static_cast<std::size_t>(B));
  for (int b = 1; b <= B; ++b) {
    Rng rng(derive_stream(seed, {fnv1a64("fewshot_demos"),
                                 static_cast<std::uint64_t>(donor_fold_label),
                                 static_cast<std::uint64_t>(arm),
                                 static_cast<std::uint64_t>(b)}));
    auto local = rng.sample_without_replacement(
        static_cast<std::uint32_t>(donor_pool.size()), static_cast<std::uint32_t>(m));
    auto& set = sets[b - 1];
    set.reserve(local.size());
    for (std::uint32_t idx : local) set.push_back(donor_pool[idx]);
  }
  return sets;
}

}  // namespace

std::vector<double> aggregate_few_shot_means(const Predictor& predictor,
                                             const RctDataset& data,
                                             std::span<const std::uint32_t> donor_pool,
                                             std::span<const std::uint32_t> query_subjects,
                                             int arm, int m, int B, std::uint64_t seed,
                                             int donor_fold_label) {
  const auto sets = draw_demo_sets(donor_pool, arm, m, B, seed, donor_fold_label);
  std::vector<double> sums(query_subjects.size(), 0.0);
  std::vector<DemoExample> demos(static_cast<std::size_t>(m));
  for (const auto& set : sets) {
    for (int j = 0; j < m; ++j) {
      const std::uint32_t d = set[j];
      demos[j] = {data.x_row(d), data.z()[d], data.y()[d]};
    }
    for (std::size_t q = 0; q < query_subjects.size(); ++q) {
      sums[q] += predictor.predict(data.subject(query_subjects[q]), arm, demos);
    }
  }
  for (double& s : sums) s /= static_cast<double>(B);
  return sums;
}

void aggregate_few_shot(const Predictor& predictor, const RctDataset& data,
                        std::span<const std::uint32_t> donor_pool,
                        std::span<const std::uint32_t> query_subjects, int arm, int m,
                        int B, std::uint64_t seed, int donor_fold_label,
                        PredictionSet& out) {
  const auto sets = draw_demo_sets(donor_pool, arm, m, B, seed, donor_fold_label);
  std::vector<std::vector<double>> draws(query_subjects.size(),
                                         std::vector<double>(static_cast<std::size_t>(B)));
  std::vector<DemoExample> demos(static_cast<std::size_t>(m));
  for (int b = 0; b < B; ++b) {
    const auto& set = sets[b];
    for (int j = 0; j < m; ++j) {
      const std::uint32_t d = set[j];
      demos[j] = {data.x_row(d), data.z()[d], data.y()[d]};
    }
    for (std::size_t q = 0; q < query_subjects.size(); ++q) {
      draws[q][b] = predictor.predict(data.subject(query_subjects[q]), arm, demos);
    }
  }
  for (std::size_t q = 0; q < query_subjects.size(); ++q) {
    out.set_few_shot_draws(data.ids()[query_subjects[q]], arm, donor_fold_label,
                           std::move(draws[q]));
  }
}

}  // namespace calm
