#pragma once

#include "lidet/attacks.hpp"
#include "lidet/characteristics.hpp"
#include "lidet/common.hpp"
#include "lidet/neighborhood.hpp"
#include "lidet/network.hpp"

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace lidet {

enum class FeatureKind { lid, kd, bu, kd_bu, combined };
enum class Provenance { normal, noisy, adversarial };

std::string to_string(FeatureKind kind);
FeatureKind feature_kind_from_string(const std::string& name);
std::string to_string(Provenance p);
Provenance provenance_from_string(const std::string& name);

/// Per-example characteristic scores. Labels are implied by provenance:
/// adversarial rows are positive, normal and noisy rows negative.
struct FeatureMatrix {
  RowMatrix values;
  std::vector<Provenance> provenance;
  /// Dataset id of the normal example each row was derived from.
  std::vector<std::size_t> source_ids;
  FeatureKind kind = FeatureKind::lid;

  Eigen::Index rows() const { return values.rows(); }
  Eigen::Index cols() const { return values.cols(); }
  bool positive(Eigen::Index row) const { return provenance[static_cast<std::size_t>(row)] == Provenance::adversarial; }
  std::size_t count_positive() const;

  void append(const FeatureMatrix& other);
  FeatureMatrix select_rows(std::span<const Eigen::Index> rows) const;
  FeatureMatrix select_columns(std::span<const Eigen::Index> cols) const;
};

/// Parameters of the characteristic estimators.
struct FeatureParams {
  std::size_t k = 20;
  double sigma = 1.0;
  BuConfig bu{};
};

/// B_norm with its adversarial and noisy counterparts.
struct Counterparts {
  std::vector<std::size_t> ids;
  RowMatrix normal;
  std::vector<int> labels;
  std::vector<AttackOutcome> outcomes;
  RowMatrix adversarial;
  RowMatrix noisy;
  AttackKind attack = AttackKind::fgm;

  std::size_t size() const { return ids.size(); }
  std::size_t successes() const;
};

/// Attacks every member of the normal batch and draws a magnitude-matched
/// noisy copy of it. A failed attack gets noise at the batch's mean
/// successful perturbation norm. `noise` defaults to minmax_pixels for JSMA
/// and gaussian_l2 otherwise. Throws EmptyClassError if every attack fails.
Counterparts craft_counterparts(const Network& net, const Minibatch& normal_batch, std::span<const int> labels,
                                const AttackConfig& attack, Seed seed, std::size_t workers = 1,
                                std::optional<NoiseStyle> noise = std::nullopt);

/// Output of feature extraction for one batch.
struct ExtractionResult {
  /// Rows of successful attacks plus every normal and noisy row.
  FeatureMatrix features;
  /// Unfiltered N x F blocks in batch order. Rows of failed attacks whose
  /// profile is degenerate hold NaN in the adversarial block.
  RowMatrix normal_block;
  RowMatrix adversarial_block;
  RowMatrix noisy_block;
  /// Source ids of adversarial rows dropped for unsuccessful attacks.
  std::vector<std::size_t> dropped_ids;
};

/// Column count of a feature kind for a network with `feature_layers` layers.
Eigen::Index feature_columns(FeatureKind kind, std::size_t feature_layers);

/// Characteristic scores of counterparts measured against the batch's own
/// normal activations, one column per feature layer (BU is a single column).
/// Normal rows exclude themselves from their neighborhoods.
ExtractionResult compute_features(const Network& net, const Counterparts& parts, FeatureKind kind,
                                  const FeatureParams& params, std::size_t workers = 1);

/// LID blocks for several neighborhood sizes from one pass of distance
/// computation. Result[i] is the filtered LID matrix for ks[i].
std::vector<FeatureMatrix> compute_lid_for_ks(const Network& net, const Counterparts& parts,
                                              std::span<const std::size_t> ks, std::size_t workers = 1);

/// craft_counterparts followed by compute_features.
ExtractionResult extract_features(const Network& net, const Minibatch& normal_batch, std::span<const int> labels,
                                  const AttackConfig& attack, FeatureKind kind, const FeatureParams& params,
                                  Seed seed, std::size_t workers = 1);

struct LogRegConfig {
  std::size_t epochs = 5000;
  double learning_rate = 0.5;
  double l2_penalty = 1e-4;
  double tolerance = 1e-8;
  Seed seed = 0;
};

struct DetectorModel {
  Vector weights;
  double bias = 0.0;
  /// Scaler over the kept columns, frozen at training time.
  Vector mean;
  Vector stddev;
  std::vector<Eigen::Index> kept_columns;
  std::vector<Eigen::Index> dropped_columns;
  Eigen::Index input_columns = 0;
  FeatureKind kind = FeatureKind::lid;
  std::string training_attack;
};

/// Standardizes with a scaler fitted on `features`, drops zero-variance
/// columns, and fits L2-regularized logistic regression by full-batch
/// gradient descent until the loss changes by less than cfg.tolerance.
DetectorModel train_detector(const FeatureMatrix& features, const LogRegConfig& cfg,
                             const std::string& training_attack = "");

/// Logit of the positive class for each row, using the frozen scaler.
Vector decision_function(const DetectorModel& model, const RowMatrix& values);
/// Probabilities in (0, 1).
Vector score(const DetectorModel& model, const RowMatrix& values);

/// Mann-Whitney AUC: fraction of (pos, neg) pairs ordered correctly, ties
/// counting one half.
double auc(std::span<const double> scores_pos, std::span<const double> scores_neg);

/// AUC of the model's decision values on labeled features.
double evaluate_auc(const DetectorModel& model, const FeatureMatrix& features);

/// Same as evaluate_auc, but checks that the feature kinds match.
double transfer_evaluate(const DetectorModel& model, const FeatureMatrix& test_features);

/// Raw-score AUC of each column on its own.
std::vector<std::pair<std::size_t, double>> layerwise_auc(const FeatureMatrix& features);

enum class TunedParameter { k, sigma };

struct TuningResult {
  TunedParameter parameter = TunedParameter::k;
  std::vector<double> grid;
  std::vector<std::string> attacks;
  /// per_attack_auc[a][g]: CV AUC of attack a at grid cell g.
  std::vector<std::vector<double>> per_attack_auc;
  std::vector<double> mean_auc;
  std::size_t selected_index = 0;
  double selected = 0.0;
};

struct TuneOptions {
  TunedParameter parameter = TunedParameter::k;
  std::vector<double> grid;
  FeatureKind kind = FeatureKind::lid;
  FeatureParams base{};
  std::size_t folds = 3;
  LogRegConfig logreg{};
  Seed seed = 0;
  std::size_t workers = 1;
};

/// Mean K-fold cross-validated AUC of a detector trained on the features
/// (folds grouped by source id). Throws ValidationError when a fold lacks
/// one of the classes.
double cross_validated_auc(const FeatureMatrix& features, std::size_t folds, const LogRegConfig& cfg, Seed seed);

/// Grid search over precrafted counterparts. `batches[a]` holds the
/// counterpart batches of attack a.
TuningResult tune_parameter(const Network& net, const std::vector<std::vector<Counterparts>>& batches,
                            const std::vector<std::string>& attack_names, const TuneOptions& options);

/// Arg-max of mean_auc; ties go to the smaller grid value.
std::size_t select_best(const std::vector<double>& grid, const std::vector<double>& mean_auc);

struct FailureRates {
  double scenario1 = 0.0;  // detector on LID of every feature layer
  double scenario2 = 0.0;  // detector on the pre-softmax LID only
  std::size_t inputs = 0;
  std::size_t attack_failures = 0;
  std::size_t detected_scenario1 = 0;
  std::size_t detected_scenario2 = 0;
};

/// An outcome counts as a failure when the attack did not misclassify or
/// the detector flags its LID features (probability > 0.5). LID is measured
/// against `refs` (normal inputs) at each layer.
FailureRates detection_failure_rates(const Network& net, const DetectorModel& all_layers,
                                     const DetectorModel& pre_softmax, std::span<const AttackOutcome> outcomes,
                                     const Minibatch& refs, std::size_t k);

/// Runs adaptive_opt_lid on every input and scores the outcomes.
FailureRates adaptive_failure_rate(const Network& net, const DetectorModel& all_layers,
                                   const DetectorModel& pre_softmax, const Dataset& inputs, const Minibatch& refs,
                                   const AttackConfig& cfg, std::size_t workers = 1,
                                   std::vector<AttackOutcome>* outcomes = nullptr);

void save_features_csv(const FeatureMatrix& features, const std::string& path);
/// Reads the CSV layout written by save_features_csv.
FeatureMatrix load_features_csv(const std::string& path, FeatureKind kind);

std::string detector_to_json(const DetectorModel& model);
DetectorModel detector_from_json(const std::string& text);
void save_detector(const DetectorModel& model, const std::string& path);
DetectorModel load_detector(const std::string& path);

}  // namespace lidet
