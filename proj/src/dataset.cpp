#include "crfrail/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace crfrail {

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& s, int row, const std::string& col) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("non-numeric field '" + s + "' in column " + col + " at row " +
                    std::to_string(row));
  }
}

int parse_int(const std::string& s, int row, const std::string& col) {
  double v = parse_double(s, row, col);
  int i = static_cast<int>(std::lround(v));
  if (std::abs(v - i) > 1e-12)
    throw DataError("expected integer in column " + col + " at row " + std::to_string(row));
  return i;
}

std::string fmt_full(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

StudyDataset::StudyDataset(std::vector<SurvivalUnit> units, int num_causes)
    : units_(std::move(units)), num_causes_(num_causes) {
  if (units_.empty()) throw DataError("dataset has no units");
  if (num_causes_ < 1) throw DataError("num_causes must be >= 1");

  std::stable_sort(units_.begin(), units_.end(), [](const SurvivalUnit& a, const SurvivalUnit& b) {
    return a.cluster_id != b.cluster_id ? a.cluster_id < b.cluster_id : a.unit_id < b.unit_id;
  });

  covariate_dim_ = static_cast<int>(units_.front().covariates.size());
  predictor_dim_ = 0;
  std::map<int, int> sizes;
  for (std::size_t u = 0; u < units_.size(); ++u) {
    const auto& unit = units_[u];
    if (!(unit.time > 0.0))
      throw DataError("time must be > 0 for unit (" + std::to_string(unit.cluster_id) + "," +
                      std::to_string(unit.unit_id) + ")");
    if (unit.censor_indicator != 0 && unit.censor_indicator != 1)
      throw DataError("delta must be 0 or 1");
    if (unit.event_type) {
      if (unit.censor_indicator == 0)
        throw DataError("event type present for censored unit (" +
                        std::to_string(unit.cluster_id) + "," + std::to_string(unit.unit_id) + ")");
      if (*unit.event_type < 1 || *unit.event_type > num_causes_)
        throw DataError("event type " + std::to_string(*unit.event_type) + " outside 1.." +
                        std::to_string(num_causes_));
    }
    if (static_cast<int>(unit.covariates.size()) != covariate_dim_)
      throw DataError("inconsistent covariate dimension");
    if (unit.predictors) {
      int q = static_cast<int>(unit.predictors->size());
      if (predictor_dim_ == 0) predictor_dim_ = q;
      if (q != predictor_dim_) throw DataError("inconsistent predictor dimension");
    }
    sizes[unit.cluster_id]++;
  }

  // Cluster ids must be exactly 1..N.
  num_clusters_ = static_cast<int>(sizes.size());
  std::string missing;
  for (int i = 1; i <= num_clusters_; ++i)
    if (!sizes.count(i)) missing += (missing.empty() ? "" : ", ") + std::to_string(i);
  if (!missing.empty()) throw DataError("missing cluster ids: " + missing);

  cluster_sizes_.resize(num_clusters_);
  for (int i = 1; i <= num_clusters_; ++i) cluster_sizes_[i - 1] = sizes[i];
  cluster_index_.resize(units_.size());
  for (std::size_t u = 0; u < units_.size(); ++u) cluster_index_[u] = units_[u].cluster_id - 1;

  // Duplicate (cluster, unit) pairs would silently corrupt index maps.
  for (std::size_t u = 1; u < units_.size(); ++u)
    if (units_[u].cluster_id == units_[u - 1].cluster_id &&
        units_[u].unit_id == units_[u - 1].unit_id)
      throw DataError("duplicate unit (" + std::to_string(units_[u].cluster_id) + "," +
                      std::to_string(units_[u].unit_id) + ")");
}

int StudyDataset::unit_position(int cluster_id, int unit_id) const {
  SurvivalUnit key;
  key.cluster_id = cluster_id;
  key.unit_id = unit_id;
  auto it = std::lower_bound(units_.begin(), units_.end(), key,
                             [](const SurvivalUnit& a, const SurvivalUnit& b) {
                               return a.cluster_id != b.cluster_id ? a.cluster_id < b.cluster_id
                                                                   : a.unit_id < b.unit_id;
                             });
  if (it == units_.end() || it->cluster_id != cluster_id || it->unit_id != unit_id)
    throw DataError("unit (" + std::to_string(cluster_id) + "," + std::to_string(unit_id) +
                    ") not found");
  return static_cast<int>(it - units_.begin());
}

int StudyDataset::risk_set_indicator(int cluster_id, int unit_id, double t) const {
  if (!(t > 0.0)) throw DataError("risk_set_indicator requires t > 0");
  return units_[unit_position(cluster_id, unit_id)].time >= t ? 1 : 0;
}

bool StudyDataset::complete_types() const {
  for (const auto& u : units_)
    if (u.censor_indicator == 1 && !u.event_type) return false;
  return true;
}

EventProbabilityMatrix::EventProbabilityMatrix(std::vector<int> unit_positions,
                                               Eigen::MatrixXd probs)
    : unit_positions_(std::move(unit_positions)), probs_(std::move(probs)) {
  if (static_cast<int>(unit_positions_.size()) != probs_.rows())
    throw DataError("probability matrix rows do not match unit positions");
  for (int r = 0; r < probs_.rows(); ++r) {
    double sum = probs_.row(r).sum();
    if (std::abs(sum - 1.0) > 1e-10)
      throw DataError("probability row " + std::to_string(r) + " sums to " + std::to_string(sum));
    for (int k = 0; k < probs_.cols(); ++k)
      if (probs_(r, k) < 0.0 || probs_(r, k) > 1.0)
        throw DataError("probability outside [0,1] at row " + std::to_string(r));
  }
}

void EventProbabilityMatrix::validate_against(const StudyDataset& data) const {
  std::vector<int> expected;
  for (int u = 0; u < data.num_units(); ++u)
    if (data.units()[u].censor_indicator == 1) expected.push_back(u);
  if (expected != unit_positions_)
    throw DataError("probability rows do not match the dataset's Delta=1 units");
  if (num_causes() != data.num_causes())
    throw DataError("probability matrix has wrong number of causes");
}

Eigen::MatrixXd effective_weights(const StudyDataset& data, WeightMode mode,
                                  const EventProbabilityMatrix* probs,
                                  const EventAssignment* imputed) {
  const int K = data.num_causes();
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(data.num_units(), K);
  switch (mode) {
    case WeightMode::Complete:
      for (int u = 0; u < data.num_units(); ++u) {
        const auto& unit = data.units()[u];
        if (unit.censor_indicator == 0) continue;
        if (!unit.event_type)
          throw DataError("complete mode requires event types on all Delta=1 units");
        w(u, *unit.event_type - 1) = 1.0;
      }
      break;
    case WeightMode::Weighted: {
      if (!probs) throw DataError("weighted mode requires event probabilities");
      probs->validate_against(data);
      for (std::size_t r = 0; r < probs->unit_positions().size(); ++r)
        w.row(probs->unit_positions()[r]) = probs->probs().row(static_cast<int>(r));
      break;
    }
    case WeightMode::Imputed: {
      if (!imputed) throw DataError("imputed mode requires an event-type assignment");
      std::vector<char> seen(data.num_units(), 0);
      for (std::size_t r = 0; r < imputed->unit_positions.size(); ++r) {
        int u = imputed->unit_positions[r];
        int k = imputed->labels[r];
        if (data.units()[u].censor_indicator == 0)
          throw DataError("imputed label supplied for a censored unit");
        if (k < 1 || k > K) throw DataError("imputed label outside 1..K");
        w(u, k - 1) = 1.0;
        seen[u] = 1;
      }
      for (int u = 0; u < data.num_units(); ++u)
        if (data.units()[u].censor_indicator == 1 && !seen[u])
          throw DataError("Delta=1 unit (" + std::to_string(data.units()[u].cluster_id) + "," +
                          std::to_string(data.units()[u].unit_id) + ") has no imputed label");
      break;
    }
  }
  return w;
}

StudyDataset load_dataset(const std::string& path, int num_causes) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty file: " + path);

  auto header = split_csv(line);
  for (auto& h : header) h = trim(h);
  const std::vector<std::string> fixed = {"cluster_id", "unit_id", "time", "delta", "event_type"};
  if (header.size() < fixed.size())
    throw DataError("header has too few columns in " + path);
  for (std::size_t c = 0; c < fixed.size(); ++c)
    if (header[c] != fixed[c])
      throw DataError("expected header column '" + fixed[c] + "', found '" + header[c] + "'");
  int p = 0, q = 0;
  std::size_t c = fixed.size();
  while (c < header.size() && header[c] == "x" + std::to_string(p + 1)) { ++p; ++c; }
  while (c < header.size() && header[c] == "w" + std::to_string(q + 1)) { ++q; ++c; }
  if (c != header.size())
    throw DataError("unrecognized header column '" + header[c] + "' in " + path);

  std::vector<SurvivalUnit> units;
  int row = 1;
  int max_type = 0;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    auto f = split_csv(line);
    if (f.size() != header.size())
      throw DataError("row " + std::to_string(row) + " has " + std::to_string(f.size()) +
                      " fields, expected " + std::to_string(header.size()));
    SurvivalUnit u;
    u.cluster_id = parse_int(trim(f[0]), row, "cluster_id");
    u.unit_id = parse_int(trim(f[1]), row, "unit_id");
    u.time = parse_double(trim(f[2]), row, "time");
    u.censor_indicator = parse_int(trim(f[3]), row, "delta");
    std::string et = trim(f[4]);
    if (!et.empty()) {
      int k = parse_int(et, row, "event_type");
      if (u.censor_indicator == 0)
        throw DataError("event type present for censored unit at row " + std::to_string(row));
      u.event_type = k;
      max_type = std::max(max_type, k);
    }
    u.covariates.resize(p);
    for (int j = 0; j < p; ++j)
      u.covariates[j] = parse_double(trim(f[5 + j]), row, "x" + std::to_string(j + 1));
    if (q > 0) {
      Eigen::VectorXd w(q);
      for (int j = 0; j < q; ++j)
        w[j] = parse_double(trim(f[5 + p + j]), row, "w" + std::to_string(j + 1));
      u.predictors = std::move(w);
    }
    units.push_back(std::move(u));
  }
  if (units.empty()) throw DataError("no data rows in " + path);
  if (num_causes == 0) num_causes = std::max(max_type, 1);
  return StudyDataset(std::move(units), num_causes);
}

void write_dataset(const StudyDataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  const int p = data.covariate_dim();
  const int q = data.predictor_dim();
  out << "cluster_id,unit_id,time,delta,event_type";
  for (int j = 0; j < p; ++j) out << ",x" << j + 1;
  for (int j = 0; j < q; ++j) out << ",w" << j + 1;
  out << "\n";
  for (const auto& u : data.units()) {
    out << u.cluster_id << "," << u.unit_id << "," << fmt_full(u.time) << ","
        << u.censor_indicator << ",";
    if (u.event_type) out << *u.event_type;
    for (int j = 0; j < p; ++j) out << "," << fmt_full(u.covariates[j]);
    if (q > 0) {
      if (!u.predictors) throw DataError("unit without predictors in a predictor-bearing dataset");
      for (int j = 0; j < q; ++j) out << "," << fmt_full((*u.predictors)[j]);
    }
    out << "\n";
  }
}

void write_probabilities(const StudyDataset& data, const EventProbabilityMatrix& probs,
                         const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  out << "cluster_id,unit_id";
  for (int k = 1; k <= probs.num_causes(); ++k) out << ",p" << k;
  out << "\n";
  for (std::size_t r = 0; r < probs.unit_positions().size(); ++r) {
    const auto& u = data.units()[probs.unit_positions()[r]];
    out << u.cluster_id << "," << u.unit_id;
    for (int k = 0; k < probs.num_causes(); ++k)
      out << "," << fmt_full(probs.probs()(static_cast<int>(r), k));
    out << "\n";
  }
}

}  // namespace crfrail
