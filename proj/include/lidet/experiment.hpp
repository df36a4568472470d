#pragma once

#include "lidet/config.hpp"
#include "lidet/detector.hpp"

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace lidet {

enum class Recipe { table1, table2, table4, table5, fig2, fig3, fig4 };

std::string to_string(Recipe recipe);
Recipe recipe_from_string(const std::string& name);

struct AucRow {
  std::string dataset;
  std::string attack;
  std::string feature_kind;
  double auc = 0.0;
  std::size_t train_rows = 0;
  std::size_t test_rows = 0;
  bool operator==(const AucRow&) const = default;
};

struct AttackRow {
  std::string attack;
  std::size_t attempted = 0;
  std::size_t successes = 0;
  /// Mean L2 perturbation over successful attacks.
  double mean_l2 = 0.0;
  /// Fraction of attacked examples the network still classifies correctly.
  double post_attack_accuracy = 0.0;
  bool operator==(const AttackRow&) const = default;
};

struct TransferRow {
  std::string train_attack;
  std::string test_attack;
  std::string feature_kind;
  double auc = 0.0;
  bool operator==(const TransferRow&) const = default;
};

struct FailureRow {
  std::string scenario;
  double rate = 0.0;
  std::size_t inputs = 0;
  std::size_t attack_failures = 0;
  std::size_t detected = 0;
  bool operator==(const FailureRow&) const = default;
};

/// One point of a plot-ready curve.
struct SeriesPoint {
  std::string series;
  double x = 0.0;
  double y = 0.0;
  bool operator==(const SeriesPoint&) const = default;
};

/// Id-disjointness check between the examples a stage trained on and the
/// ones it was evaluated on.
struct SplitCheck {
  std::string stage;
  std::size_t train_ids = 0;
  std::size_t test_ids = 0;
  std::size_t overlap = 0;
  bool operator==(const SplitCheck&) const = default;
};

struct ExperimentReport {
  std::string recipe;
  std::vector<std::pair<std::string, std::string>> config;
  std::map<std::string, Seed> seeds;
  std::map<std::string, std::string> environment;
  std::vector<AucRow> auc_table;
  std::vector<AttackRow> attacks;
  std::vector<TransferRow> transfer;
  std::vector<FailureRow> failure_rates;
  std::vector<SeriesPoint> series;
  std::vector<SplitCheck> splits;
  std::map<std::string, double> metrics;
  /// Dropped features, failed attacks, resampled batches, calibration flags.
  std::vector<std::string> notes;
  bool operator==(const ExperimentReport&) const = default;
};

/// Throws NumericOverflowError when a reported number is NaN or infinite.
void check_finite(const ExperimentReport& report);

std::string report_to_json(const ExperimentReport& report);
ExperimentReport report_from_json(const std::string& text);
/// Writes report.json plus auc_table.csv, attacks.csv, transfer.csv,
/// failure_rates.csv, series.csv (x,y,series) and splits.csv into `dir`.
void save_report(const ExperimentReport& report, const std::string& dir);
ExperimentReport load_report(const std::string& dir);

/// Network-training rows, the pre-test pool and the detector split of the
/// pool's correctly classified rows. Ids index rows of `pretest`.
struct Pipeline {
  Dataset train;
  Dataset pretest;
  Network net;
  std::vector<std::size_t> correct_ids;
  std::vector<std::size_t> train_ids;
  std::vector<std::size_t> test_ids;
};

/// Loads or generates the data, trains (or loads) the network and splits the
/// correctly classified pre-test rows 80/20. Seeds and split checks are
/// recorded in `report`.
Pipeline prepare_pipeline(const ExperimentConfig& cfg, ExperimentReport& report);

/// Records the overlap of two id sets under `stage` and throws Error when
/// they intersect.
void assert_disjoint(ExperimentReport& report, const std::string& stage, const std::vector<std::size_t>& train_ids,
                     const std::vector<std::size_t>& test_ids);

/// Partitions `ids` into max(1, |ids| / size) contiguous groups whose sizes
/// differ by at most one.
std::vector<std::vector<std::size_t>> partition_ids(const std::vector<std::size_t>& ids, std::size_t size);

/// Rows [begin, end) of a counterpart batch.
Counterparts slice_counterparts(const Counterparts& parts, std::size_t begin, std::size_t end);

/// Attack batch file: id, attack_kind, success, iterations, l2_perturbation,
/// then the adversarial feature values.
void save_attack_csv(const std::vector<std::size_t>& ids, const std::vector<AttackOutcome>& outcomes, AttackKind kind,
                     const std::string& path);

/// Runs a recipe end to end and, when cfg.output_dir is set, saves the report
/// there. Module errors are rethrown with the recipe stage prefixed.
ExperimentReport run_recipe(Recipe recipe, const ExperimentConfig& cfg);

}  // namespace lidet
