#pragma once

#include "lidet/attacks.hpp"
#include "lidet/common.hpp"
#include "lidet/data.hpp"
#include "lidet/detector.hpp"
#include "lidet/network.hpp"

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace lidet {

/// Flat `key = value` configuration text.
///
///   # comment
///   dataset.name = two_moons
///   attack.kinds = fgm, bim_a, opt     # trailing comments allowed
///
/// Keys are dotted identifiers ([A-Za-z0-9_.]); values run to the end of the
/// line or to a `#`. Blank lines are ignored. A repeated key is a ParseError.
class ConfigMap {
 public:
  struct Entry {
    std::string value;
    std::size_t line = 0;  // 0 for values set programmatically
  };

  static ConfigMap parse(std::string_view text);
  static ConfigMap load(const std::string& path);

  /// Inserts or overrides a value.
  void set(const std::string& key, std::string value);
  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;
  const std::map<std::string, Entry>& entries() const { return entries_; }

 private:
  std::map<std::string, Entry> entries_;
};

/// Comma-separated list with surrounding whitespace removed.
std::vector<std::string> split_list(std::string_view value);

/// Where the examples come from. `name` is a generator or "csv".
struct DatasetConfig {
  std::string name = "two_moons";
  std::string path;
  /// Rows used to train the network and rows of the pre-test pool that feeds
  /// attacks and detectors. A CSV is split in this order.
  std::size_t train_n = 2000;
  std::size_t test_n = 500;
  Eigen::Index ambient_d = 8;
  Eigen::Index manifold_d = 2;
  double noise = 0.1;
  int num_classes = 2;
  double blob_std = 0.05;
};

struct NetworkConfig {
  std::vector<Eigen::Index> hidden{64, 64};
  double dropout = 0.1;
  /// Pretrained network JSON; empty means train in-recipe.
  std::string path;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  NetworkConfig network;
  SgdConfig train{150, 0.02, 32, 0.9, 0};

  std::vector<AttackKind> attacks{AttackKind::fgm, AttackKind::bim_a, AttackKind::bim_b, AttackKind::jsma,
                                  AttackKind::opt};
  double clip_min = 0.0;
  double clip_max = 1.0;
  double fgm_epsilon = 0.3;
  bool fgm_sign = false;
  double bim_epsilon = 0.3;
  std::size_t bim_max_iters = 50;
  std::size_t jsma_max_iters = 50;
  ConstantSearch opt_search{};
  std::size_t opt_iterations = 300;
  double opt_learning_rate = 0.01;
  ConstantSearch alpha_search{1e-3, 1e6, 1.0, 8};
  std::size_t adaptive_k = 20;
  /// Test-split inputs attacked by the table4 recipe.
  std::size_t adaptive_inputs = 100;
  /// table4 also runs the adaptive attack with alpha pinned to its minimum
  /// next to plain Opt at c = alpha_min.
  bool alpha_min_control = true;
  AttackKind transfer_train_attack = AttackKind::fgm;

  std::vector<FeatureKind> feature_kinds{FeatureKind::kd, FeatureKind::bu, FeatureKind::kd_bu, FeatureKind::lid};
  FeatureParams features{};
  std::size_t minibatch_size = 100;

  std::vector<double> k_grid{10, 20, 30, 40, 50, 60, 70, 80, 90};
  std::vector<double> sigma_grid{0.01, 0.0316, 0.1, 0.316, 1.0, 3.16};
  std::size_t folds = 3;
  std::vector<std::size_t> fig4_minibatch_sizes{100, 1000};

  LogRegConfig logreg{};
  Seed seed = 0;
  std::size_t workers = 1;
  std::string output_dir;

  /// Attack parameters for one kind, seeded from the experiment seed.
  AttackConfig attack_config(AttackKind kind) const;
  /// Network architecture for the given input width and class count.
  std::vector<LayerSpec> layers(Eigen::Index input_dim, Eigen::Index classes) const;

  /// Throws ValidationError on inconsistent settings (e.g. minibatch_size
  /// <= k, missing files).
  void validate() const;

  /// Every setting as `key = value` pairs, in the grammar `apply` accepts.
  std::vector<std::pair<std::string, std::string>> describe() const;
};

/// Applies every entry of `config` on top of `base`. An unknown key or an
/// unparsable value is a ValidationError naming the key and its line.
ExperimentConfig apply_config(const ConfigMap& config, ExperimentConfig base = {});

}  // namespace lidet
