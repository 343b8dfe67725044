#include "calm/data_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "calm/rng.hpp"
#include "calm/stats.hpp"

namespace calm {

namespace {

void validate_probs(const std::vector<double>& e, double eps_e, const std::string& where) {
  if (e.size() < 2) throw DomainError("propensity " + where + ": need k >= 2 arms");
  double sum = 0.0;
  for (double p : e) {
    if (!std::isfinite(p) || p < eps_e || p > 1.0 - eps_e) {
      throw DomainError("propensity " + where + ": probability " + std::to_string(p) +
                        " outside [" + std::to_string(eps_e) + ", " +
                        std::to_string(1.0 - eps_e) + "]");
    }
    sum += p;
  }
  if (std::fabs(sum - 1.0) > 1e-12) {
    throw DomainError("propensity " + where + ": probabilities sum to " +
                      std::to_string(sum) + ", not 1");
  }
}

std::vector<double> arm_map_to_vector(const nlohmann::json& obj, const std::string& where) {
  std::map<int, double> by_arm;
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    int arm;
    try {
      arm = std::stoi(it.key());
    } catch (...) {
      throw ParseError("propensity " + where + ": arm key '" + it.key() + "' is not an integer");
    }
    if (!it.value().is_number()) {
      throw ParseError("propensity " + where + ": value for arm " + it.key() + " is not numeric");
    }
    by_arm[arm] = it.value().get<double>();
  }
  const int k = static_cast<int>(by_arm.size());
  std::vector<double> e(k, 0.0);
  for (const auto& [arm, p] : by_arm) {
    if (arm < 1 || arm > k) {
      throw DomainError("propensity " + where + ": arm labels must be 1..k, got " +
                        std::to_string(arm));
    }
    e[arm - 1] = p;
  }
  return e;
}

}  // namespace

PropensitySpec PropensitySpec::constant(std::vector<double> e_by_arm, double eps_e) {
  validate_probs(e_by_arm, eps_e, "constant");
  PropensitySpec s;
  s.arm_count_ = static_cast<int>(e_by_arm.size());
  s.constant_ = std::move(e_by_arm);
  return s;
}

PropensitySpec PropensitySpec::stratified(std::map<int, std::vector<double>> table,
                                          double eps_e) {
  if (table.empty()) throw DomainError("propensity: empty stratum table");
  PropensitySpec s;
  s.arm_count_ = static_cast<int>(table.begin()->second.size());
  for (const auto& [code, e] : table) {
    if (static_cast<int>(e.size()) != s.arm_count_) {
      throw DomainError("propensity: stratum " + std::to_string(code) +
                        " has a different arm count");
    }
    validate_probs(e, eps_e, "stratum " + std::to_string(code));
  }
  s.table_ = std::move(table);
  return s;
}

PropensitySpec PropensitySpec::from_json(const std::string& text, double eps_e) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw ParseError(std::string("propensity JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("propensity JSON: expected an object");
  if (j.contains("type")) {
    const std::string type = j.at("type").get<std::string>();
    if (type == "constant") {
      return constant(arm_map_to_vector(j.at("e"), "constant"), eps_e);
    }
    if (type == "stratum") {
      std::map<int, std::vector<double>> table;
      for (auto it = j.at("table").begin(); it != j.at("table").end(); ++it) {
        table[std::stoi(it.key())] = arm_map_to_vector(it.value(), "stratum " + it.key());
      }
      return stratified(std::move(table), eps_e);
    }
    throw ParseError("propensity JSON: unknown type '" + type + "'");
  }
  // Shorthand: a plain arm -> probability map.
  return constant(arm_map_to_vector(j, "constant"), eps_e);
}

double PropensitySpec::e(int arm, std::optional<int> x_coarse) const {
  if (arm < 1 || arm > arm_count_) {
    throw DomainError("propensity: arm " + std::to_string(arm) + " outside 1.." +
                      std::to_string(arm_count_));
  }
  if (!is_stratified()) return constant_[arm - 1];
  if (!x_coarse) throw DomainError("propensity: stratified spec requires x_coarse");
  auto it = table_.find(*x_coarse);
  if (it == table_.end()) {
    throw DomainError("propensity: stratum " + std::to_string(*x_coarse) + " not in table");
  }
  return it->second[arm - 1];
}

double PropensitySpec::lambda(int arm, std::optional<int> x_coarse) const {
  return 1.0 / e(arm, x_coarse) - 1.0;
}

std::string PropensitySpec::to_json() const {
  nlohmann::json j;
  if (!is_stratified()) {
    j["type"] = "constant";
    nlohmann::json e = nlohmann::json::object();
    for (int a = 1; a <= arm_count_; ++a) e[std::to_string(a)] = constant_[a - 1];
    j["e"] = e;
  } else {
    j["type"] = "stratum";
    nlohmann::json table = nlohmann::json::object();
    for (const auto& [code, e] : table_) {
      nlohmann::json row = nlohmann::json::object();
      for (int a = 1; a <= arm_count_; ++a) row[std::to_string(a)] = e[a - 1];
      table[std::to_string(code)] = row;
    }
    j["table"] = table;
  }
  return j.dump();
}

RctDataset::RctDataset(std::vector<std::string> ids, std::vector<double> y,
                       std::vector<int> t, std::vector<double> x_rowmajor, std::size_t p,
                       std::optional<std::vector<int>> x_coarse,
                       std::vector<std::string> z, int arm_count, PropensitySpec propensity)
    : ids_(std::move(ids)),
      y_(std::move(y)),
      t_(std::move(t)),
      x_(std::move(x_rowmajor)),
      p_(p),
      x_coarse_(std::move(x_coarse)),
      z_(std::move(z)),
      arm_count_(arm_count),
      propensity_(std::move(propensity)) {
  const std::size_t n = ids_.size();
  if (arm_count_ < 2) throw DomainError("dataset: arm count k must be >= 2");
  if (p_ < 1) throw DomainError("dataset: covariate dimension p must be >= 1");
  if (y_.size() != n || t_.size() != n || z_.size() != n || x_.size() != n * p_ ||
      (x_coarse_ && x_coarse_->size() != n)) {
    throw DomainError("dataset: column lengths disagree");
  }
  if (propensity_.arm_count() != arm_count_) {
    throw DomainError("dataset: propensity arm count " +
                      std::to_string(propensity_.arm_count()) + " != k = " +
                      std::to_string(arm_count_));
  }
  if (propensity_.is_stratified() && !x_coarse_) {
    throw DomainError("dataset: stratified propensity requires an x_coarse column");
  }
  std::set<std::string_view> seen;
  for (std::size_t i = 0; i < n; ++i) {
    if (!seen.insert(ids_[i]).second) {
      throw DomainError("dataset: duplicate id '" + ids_[i] + "'");
    }
    if (t_[i] < 1 || t_[i] > arm_count_) {
      throw DomainError("dataset: subject '" + ids_[i] + "' has arm t=" +
                        std::to_string(t_[i]) + " outside 1.." + std::to_string(arm_count_));
    }
    if (!std::isfinite(y_[i])) {
      throw DomainError("dataset: subject '" + ids_[i] + "' has non-finite outcome");
    }
    for (std::size_t j = 0; j < p_; ++j) {
      if (!std::isfinite(x_[i * p_ + j])) {
        throw DomainError("dataset: subject '" + ids_[i] + "' has non-finite covariate x" +
                          std::to_string(j + 1));
      }
    }
    // Resolves the stratum row and validates it exists.
    for (int a = 1; a <= arm_count_; ++a) (void)e_of(i, a);
  }
}

double RctDataset::e_of(std::size_t i, int arm) const {
  std::optional<int> xc;
  if (x_coarse_) xc = (*x_coarse_)[i];
  return propensity_.e(arm, xc);
}

double RctDataset::lambda_of(std::size_t i, int arm) const {
  return 1.0 / e_of(i, arm) - 1.0;
}

std::vector<std::uint32_t> RctDataset::arm_members(int arm) const {
  std::vector<std::uint32_t> out;
  for (std::size_t i = 0; i < n(); ++i) {
    if (t_[i] == arm) out.push_back(static_cast<std::uint32_t>(i));
  }
  return out;
}

namespace {

// Minimal RFC-4180 row reader: quoted fields may contain commas, quotes
// (doubled) and newlines.
bool read_csv_row(std::istream& in, std::vector<std::string>& fields) {
  fields.clear();
  std::string field;
  bool in_quotes = false;
  bool any = false;
  int c;
  while ((c = in.get()) != EOF) {
    any = true;
    if (in_quotes) {
      if (c == '"') {
        if (in.peek() == '"') {
          field.push_back('"');
          in.get();
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(static_cast<char>(c));
      }
    } else if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      break;
    } else if (c == '\r') {
      // tolerate CRLF
    } else {
      field.push_back(static_cast<char>(c));
    }
  }
  if (!any) return false;
  fields.push_back(std::move(field));
  return true;
}

double parse_double(const std::string& s, const std::string& col, std::size_t row) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ParseError("row " + std::to_string(row) + ": column '" + col +
                     "' value '" + s + "' is not numeric");
  }
  return v;
}

long parse_int(const std::string& s, const std::string& col, std::size_t row) {
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ParseError("row " + std::to_string(row) + ": column '" + col +
                     "' value '" + s + "' is not an integer");
  }
  return v;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

}  // namespace

RctDataset load_dataset(std::istream& source, const ColumnSchema& schema,
                        PropensitySpec propensity) {
  std::vector<std::string> header;
  if (!read_csv_row(source, header)) throw ParseError("empty CSV input");

  auto find_col = [&](const std::string& name) -> int {
    for (std::size_t j = 0; j < header.size(); ++j) {
      if (header[j] == name) return static_cast<int>(j);
    }
    return -1;
  };

  const int id_idx = find_col(schema.id_col);
  const int y_idx = find_col(schema.y_col);
  const int t_idx = find_col(schema.t_col);
  if (id_idx < 0) throw ParseError("CSV header is missing column '" + schema.id_col + "'");
  if (y_idx < 0) throw ParseError("CSV header is missing column '" + schema.y_col + "'");
  if (t_idx < 0) throw ParseError("CSV header is missing column '" + schema.t_col + "'");

  std::vector<std::pair<int, std::string>> x_idx;  // column index, name
  if (!schema.x_cols.empty()) {
    for (const auto& name : schema.x_cols) {
      const int idx = find_col(name);
      if (idx < 0) throw ParseError("CSV header is missing covariate column '" + name + "'");
      x_idx.emplace_back(idx, name);
    }
  } else {
    std::vector<std::pair<long, std::pair<int, std::string>>> found;
    for (std::size_t j = 0; j < header.size(); ++j) {
      const std::string& name = header[j];
      if (name.size() <= schema.x_prefix.size() ||
          name.compare(0, schema.x_prefix.size(), schema.x_prefix) != 0) {
        continue;
      }
      const std::string tail = name.substr(schema.x_prefix.size());
      if (tail.find_first_not_of("0123456789") != std::string::npos) continue;
      found.push_back({std::stol(tail), {static_cast<int>(j), name}});
    }
    std::sort(found.begin(), found.end());
    for (auto& f : found) x_idx.push_back(f.second);
  }
  if (x_idx.empty()) {
    throw ParseError("CSV header has no covariate columns ('" + schema.x_prefix + "1'...)");
  }
  const std::size_t p = x_idx.size();

  const int xc_idx = find_col(schema.xc_col);
  const int z_idx = find_col(schema.z_col);

  std::vector<std::string> ids, z;
  std::vector<double> y, x;
  std::vector<int> t;
  std::vector<int> xc;

  std::vector<std::string> row;
  std::size_t row_no = 0;
  while (read_csv_row(source, row)) {
    ++row_no;
    if (row.size() == 1 && row[0].empty()) continue;  // blank trailing line
    if (row.size() != header.size()) {
      throw ParseError("row " + std::to_string(row_no) + ": expected " +
                       std::to_string(header.size()) + " fields, got " +
                       std::to_string(row.size()));
    }
    ids.push_back(row[id_idx]);
    y.push_back(parse_double(row[y_idx], schema.y_col, row_no));
    t.push_back(static_cast<int>(parse_int(row[t_idx], schema.t_col, row_no)));
    for (const auto& [idx, name] : x_idx) {
      x.push_back(parse_double(row[idx], name, row_no));
    }
    if (xc_idx >= 0) {
      xc.push_back(static_cast<int>(parse_int(row[xc_idx], schema.xc_col, row_no)));
    }
    z.push_back(z_idx >= 0 ? row[z_idx] : std::string());
  }

  std::optional<std::vector<int>> xc_opt;
  if (xc_idx >= 0) xc_opt = std::move(xc);
  return RctDataset(std::move(ids), std::move(y), std::move(t), std::move(x), p,
                    std::move(xc_opt), std::move(z), schema.arm_count,
                    std::move(propensity));
}

RctDataset load_dataset_file(const std::string& path, const ColumnSchema& schema,
                             PropensitySpec propensity) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open dataset file '" + path + "'");
  return load_dataset(in, schema, std::move(propensity));
}

std::string save_dataset_csv(const RctDataset& d) {
  std::ostringstream out;
  out << "id,y,t";
  for (std::size_t j = 1; j <= d.p(); ++j) out << ",x" << j;
  if (d.has_x_coarse()) out << ",xc";
  out << ",z\n";
  char buf[40];
  for (std::size_t i = 0; i < d.n(); ++i) {
    out << csv_escape(d.ids()[i]);
    std::snprintf(buf, sizeof(buf), "%.17g", d.y()[i]);
    out << ',' << buf << ',' << d.t()[i];
    for (double v : d.x_row(i)) {
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      out << ',' << buf;
    }
    if (d.has_x_coarse()) out << ',' << d.x_coarse()[i];
    out << ',' << csv_escape(d.z()[i]) << '\n';
  }
  return out.str();
}

FoldAssignment split_folds(std::size_t n, int K, std::uint64_t seed) {
  if (K < 2) throw DomainError("split_folds: K must be >= 2");
  if (static_cast<std::size_t>(K) > n) {
    throw DomainError("split_folds: K = " + std::to_string(K) + " exceeds n = " +
                      std::to_string(n));
  }
  std::vector<std::uint32_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
  Rng rng(derive_stream(seed, {fnv1a64("split_folds"), n, static_cast<std::uint64_t>(K)}));
  rng.shuffle(order.begin(), order.end());

  FoldAssignment fa;
  fa.K = K;
  fa.seed = seed;
  fa.fold_of.assign(n, 0);
  for (std::size_t pos = 0; pos < n; ++pos) {
    fa.fold_of[order[pos]] = static_cast<int>(pos % K) + 1;
  }
  return fa;
}

std::vector<std::vector<std::uint32_t>> FoldAssignment::members() const {
  std::vector<std::vector<std::uint32_t>> out(static_cast<std::size_t>(K));
  for (std::size_t i = 0; i < fold_of.size(); ++i) {
    out[fold_of[i] - 1].push_back(static_cast<std::uint32_t>(i));
  }
  return out;
}

std::vector<int> quartile_strata(const RctDataset& d) {
  const std::size_t coords = std::min<std::size_t>(d.p(), 2);
  std::vector<std::vector<double>> thresholds(coords);
  for (std::size_t j = 0; j < coords; ++j) {
    std::vector<double> col(d.n());
    for (std::size_t i = 0; i < d.n(); ++i) col[i] = d.x_row(i)[j];
    thresholds[j] = {quantile(col, 0.25), quantile(col, 0.5), quantile(col, 0.75)};
  }
  std::vector<int> strata(d.n());
  for (std::size_t i = 0; i < d.n(); ++i) {
    int code = 0;
    int mult = 1;
    for (std::size_t j = 0; j < coords; ++j) {
      const double v = d.x_row(i)[j];
      int bin = 0;
      for (double thr : thresholds[j]) bin += (v > thr) ? 1 : 0;
      code += mult * bin;
      mult *= 4;
    }
    strata[i] = code;
  }
  return strata;
}

std::vector<int> coarsen_strata(const RctDataset& d) {
  if (d.has_x_coarse()) return d.x_coarse();
  return quartile_strata(d);
}

}  // namespace calm
