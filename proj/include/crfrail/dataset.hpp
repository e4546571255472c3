#pragma once

#include <Eigen/Core>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace crfrail {

/// Raised on malformed input files or invariant violations in the data model.
class DataError : public std::runtime_error {
public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// One observed unit (e.g. one ear): follow-up time, censoring status,
/// event type when known, covariates for the hazard model and optional
/// predictors for the event-type classifier.
struct SurvivalUnit {
  int cluster_id = 0;  // 1-based
  int unit_id = 0;     // 1-based within cluster
  double time = 0.0;
  int censor_indicator = 0;               // Delta: 1 = event observed, 0 = censored
  std::optional<int> event_type;          // delta in 1..K; absent = unknown or censored
  Eigen::VectorXd covariates;             // X, length p
  std::optional<Eigen::VectorXd> predictors;  // W, length q
};

/// Clustered competing-risks data. Units are canonicalized (sorted by
/// cluster_id then unit_id) at construction; every downstream index map
/// (the v-vector layout in particular) references this canonical order.
/// Immutable after construction and safe to share across threads.
class StudyDataset {
public:
  StudyDataset(std::vector<SurvivalUnit> units, int num_causes);

  const std::vector<SurvivalUnit>& units() const { return units_; }
  int num_clusters() const { return num_clusters_; }
  const std::vector<int>& cluster_sizes() const { return cluster_sizes_; }
  int num_causes() const { return num_causes_; }
  int covariate_dim() const { return covariate_dim_; }
  int predictor_dim() const { return predictor_dim_; }  // 0 if no unit has predictors
  int num_units() const { return static_cast<int>(units_.size()); }

  /// 0-based cluster index of unit u (canonical order).
  int cluster_index(int u) const { return cluster_index_[u]; }

  /// Y_{i'j'}(t) = I(T_{i'j'} >= t), closed at the event time.
  int risk_set_indicator(int cluster_id, int unit_id, double t) const;

  /// Position of unit (cluster_id, unit_id) in canonical order; throws if absent.
  int unit_position(int cluster_id, int unit_id) const;

  /// True when every Delta=1 unit carries an event type.
  bool complete_types() const;

private:
  std::vector<SurvivalUnit> units_;
  std::vector<int> cluster_index_;
  std::vector<int> cluster_sizes_;
  int num_clusters_ = 0;
  int num_causes_ = 0;
  int covariate_dim_ = 0;
  int predictor_dim_ = 0;
};

/// Conditional event-type probabilities P(delta_ij = k | W_ij, Delta_ij = 1)
/// for exactly the Delta=1 units of a dataset. Row r corresponds to unit
/// position unit_positions()[r] in the dataset's canonical order.
class EventProbabilityMatrix {
public:
  EventProbabilityMatrix(std::vector<int> unit_positions, Eigen::MatrixXd probs);

  const std::vector<int>& unit_positions() const { return unit_positions_; }
  const Eigen::MatrixXd& probs() const { return probs_; }
  int num_causes() const { return static_cast<int>(probs_.cols()); }

  /// Validates row sums and the row set against the dataset's Delta=1 units.
  void validate_against(const StudyDataset& data) const;

private:
  std::vector<int> unit_positions_;
  Eigen::MatrixXd probs_;
};

enum class WeightMode { Complete, Weighted, Imputed };

/// Hard event-type assignment for Delta=1 units (parallel to an
/// EventProbabilityMatrix's rows).
struct EventAssignment {
  std::vector<int> unit_positions;
  std::vector<int> labels;  // 1..K
};

/// Per-unit, per-cause weights w_ijk entering the estimating equations:
/// complete -> I(delta=k), weighted -> P(delta=k), imputed -> I(delta_hat=k).
/// Censored units get all-zero rows.
Eigen::MatrixXd effective_weights(const StudyDataset& data, WeightMode mode,
                                  const EventProbabilityMatrix* probs = nullptr,
                                  const EventAssignment* imputed = nullptr);

/// CSV I/O. Header: cluster_id,unit_id,time,delta,event_type,x1..xp[,w1..wq]
/// event_type blank for unknown/censored; the predictor block is optional.
StudyDataset load_dataset(const std::string& path, int num_causes);
void write_dataset(const StudyDataset& data, const std::string& path);

/// Writes probabilities as cluster_id,unit_id,p1,...,pK.
void write_probabilities(const StudyDataset& data, const EventProbabilityMatrix& probs,
                         const std::string& path);

}  // namespace crfrail
