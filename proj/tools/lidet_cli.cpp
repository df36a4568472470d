// lidet command line: data generation, training, attacks, features,
// detectors, tuning and experiment recipes.

#include "CLI11.hpp"
#include "lidet/config.hpp"
#include "lidet/data.hpp"
#include "lidet/detector.hpp"
#include "lidet/experiment.hpp"
#include "lidet/parallel.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace {

using namespace lidet;

struct Common {
  std::string config;
  std::optional<Seed> seed;
  std::string out;
  std::optional<std::size_t> workers;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
  cmd->add_option("--config", c.config, "key = value configuration file");
  cmd->add_option("--seed", c.seed, "experiment seed (u64)");
  auto* out = cmd->add_option("--out", c.out, "output directory");
  if (out_required) out->required();
  cmd->add_option("--workers", c.workers, "worker threads")->check(CLI::PositiveNumber);
}

ExperimentConfig resolve(const Common& c) {
  ConfigMap map = c.config.empty() ? ConfigMap{} : ConfigMap::load(c.config);
  if (c.seed) map.set("seed", std::to_string(*c.seed));
  if (c.workers) map.set("workers", std::to_string(*c.workers));
  if (!c.out.empty()) map.set("output_dir", c.out);
  return apply_config(map);
}

std::filesystem::path out_path(const Common& c, const std::string& file) {
  std::filesystem::create_directories(c.out);
  return std::filesystem::path(c.out) / file;
}

/// Rows the network classifies correctly, as dataset ids.
std::vector<std::size_t> correctly_classified(const Network& net, const Dataset& data) {
  std::vector<std::size_t> ids;
  for (Eigen::Index i = 0; i < data.size(); ++i)
    if (predict(net, data.features.row(i).transpose()) == data.labels[static_cast<std::size_t>(i)])
      ids.push_back(static_cast<std::size_t>(i));
  return ids;
}

Minibatch batch_of(const Dataset& data, const std::vector<std::size_t>& ids) {
  RowMatrix rows(static_cast<Eigen::Index>(ids.size()), data.dim());
  for (std::size_t i = 0; i < ids.size(); ++i) rows.row(static_cast<Eigen::Index>(i)) = data.features.row(static_cast<Eigen::Index>(ids[i]));
  return Minibatch(ids, std::move(rows));
}

std::vector<int> labels_of(const Dataset& data, const std::vector<std::size_t>& ids) {
  std::vector<int> out;
  for (std::size_t id : ids) out.push_back(data.labels[id]);
  return out;
}

std::vector<Counterparts> craft_all(const Network& net, const Dataset& data, const ExperimentConfig& cfg,
                                    AttackKind kind) {
  const auto ids = correctly_classified(net, data);
  std::vector<Counterparts> out;
  const auto groups = partition_ids(ids, cfg.minibatch_size);
  for (std::size_t b = 0; b < groups.size(); ++b) {
    AttackConfig attack = cfg.attack_config(kind);
    attack.seed = cfg.seed + b;
    out.push_back(craft_counterparts(net, batch_of(data, groups[b]), labels_of(data, groups[b]), attack, attack.seed,
                                     cfg.workers));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LID-based adversarial example detection"};
  app.require_subcommand(1);

  Common common;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset (data.csv)");
  add_common(gen, common);
  std::optional<std::string> generator;
  std::optional<std::size_t> gen_n;
  std::optional<Eigen::Index> ambient, manifold;
  gen->add_option("--generator", generator, "two_moons | gaussian_blobs | uniform_manifold");
  gen->add_option("--n", gen_n, "number of rows");
  gen->add_option("--ambient-d", ambient, "ambient dimension");
  gen->add_option("--manifold-d", manifold, "manifold dimension (uniform_manifold)");

  auto* train_net = app.add_subcommand("train-net", "train the classifier (network.json)");
  add_common(train_net, common);
  std::string data_path;
  train_net->add_option("--data", data_path, "training CSV")->required()->check(CLI::ExistingFile);

  auto* attack = app.add_subcommand("attack", "attack correctly classified rows (attacks.csv)");
  add_common(attack, common);
  std::string network_path, kind_name, refs_path;
  attack->add_option("--network", network_path, "network JSON")->required()->check(CLI::ExistingFile);
  attack->add_option("--data", data_path, "input CSV")->required()->check(CLI::ExistingFile);
  attack->add_option("--kind", kind_name, "fgm | bim_a | bim_b | jsma | opt | adaptive_opt")->required();
  attack->add_option("--refs", refs_path, "normal reference CSV for adaptive_opt")->check(CLI::ExistingFile);

  auto* extract = app.add_subcommand("extract-features", "characteristics of a batch triple (features.csv)");
  add_common(extract, common);
  std::string feature_name = "lid";
  extract->add_option("--network", network_path, "network JSON")->required()->check(CLI::ExistingFile);
  extract->add_option("--data", data_path, "input CSV")->required()->check(CLI::ExistingFile);
  extract->add_option("--kind", kind_name, "attack kind")->required();
  extract->add_option("--features", feature_name, "lid | kd | bu | kd_bu | combined");

  auto* train_det = app.add_subcommand("train-detector", "fit the logistic-regression detector (detector.json)");
  add_common(train_det, common);
  std::string features_path, attack_label;
  train_det->add_option("--features", features_path, "feature CSV")->required()->check(CLI::ExistingFile);
  train_det->add_option("--feature-kind", feature_name, "feature kind of the CSV");
  train_det->add_option("--attack", attack_label, "attack the features came from");

  auto* evaluate = app.add_subcommand("evaluate", "AUC of a detector on a feature CSV");
  add_common(evaluate, common, false);
  std::string detector_path;
  evaluate->add_option("--detector", detector_path, "detector JSON")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--features", features_path, "feature CSV")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--feature-kind", feature_name, "feature kind of the CSV");

  auto* tune = app.add_subcommand("tune", "grid search of k (LID) or sigma (KD) (tuning.csv)");
  add_common(tune, common);
  std::string parameter = "k";
  tune->add_option("--network", network_path, "network JSON")->required()->check(CLI::ExistingFile);
  tune->add_option("--data", data_path, "input CSV")->required()->check(CLI::ExistingFile);
  tune->add_option("--parameter", parameter, "k | sigma")->check(CLI::IsMember({"k", "sigma"}));

  auto* recipe = app.add_subcommand("recipe", "run an experiment recipe and write its report");
  add_common(recipe, common);
  std::string recipe_name;
  recipe->add_option("name", recipe_name, "table1 | table2 | table4 | table5 | fig2 | fig3 | fig4")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const ExperimentConfig cfg = resolve(common);

    if (gen->parsed()) {
      SyntheticSpec spec;
      spec.generator = generator_from_string(generator.value_or(cfg.dataset.name));
      spec.n = gen_n.value_or(cfg.dataset.train_n + cfg.dataset.test_n);
      spec.seed = cfg.seed;
      spec.embed_seed = cfg.seed + 1;
      spec.ambient_dim = ambient.value_or(cfg.dataset.ambient_d);
      spec.manifold_dim = manifold.value_or(cfg.dataset.manifold_d);
      spec.noise = cfg.dataset.noise;
      spec.num_classes = cfg.dataset.num_classes;
      spec.blob_std = cfg.dataset.blob_std;
      const auto path = out_path(common, "data.csv");
      save_csv(gen_synthetic(spec), path.string());
      std::cout << path.string() << '\n';
    } else if (train_net->parsed()) {
      const Dataset data = load_csv(data_path);
      SgdConfig sgd = cfg.train;
      sgd.seed = cfg.seed;
      const Network net = train_sgd(data, cfg.layers(data.dim(), std::max(2, data.num_classes())), sgd);
      const auto path = out_path(common, "network.json");
      save_network(net, path.string());
      std::cout << "train accuracy " << accuracy(net, data) << '\n' << path.string() << '\n';
    } else if (attack->parsed()) {
      const Network net = load_network(network_path);
      const Dataset data = load_csv(data_path);
      const AttackKind kind = attack_kind_from_string(kind_name);
      std::optional<Minibatch> refs;
      if (kind == AttackKind::adaptive_opt) {
        if (refs_path.empty()) throw ValidationError("adaptive_opt needs --refs");
        const Dataset r = load_csv(refs_path);
        std::vector<std::size_t> ids(static_cast<std::size_t>(r.size()));
        for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
        refs.emplace(ids, r.features);
      }
      const auto ids = correctly_classified(net, data);
      std::vector<AttackOutcome> outcomes(ids.size());
      AttackConfig ac = cfg.attack_config(kind);
      parallel_for(ids.size(), cfg.workers, [&](std::size_t i) {
        AttackConfig c = ac;
        c.seed = cfg.seed + i;
        outcomes[i] = run_attack(net, data.features.row(static_cast<Eigen::Index>(ids[i])).transpose(),
                                 data.labels[ids[i]], c, refs ? &*refs : nullptr);
      });
      const auto path = out_path(common, "attacks.csv");
      save_attack_csv(ids, outcomes, kind, path.string());
      std::size_t ok = 0;
      for (const auto& o : outcomes) ok += o.success ? 1 : 0;
      std::cout << ok << " of " << ids.size() << " attacks succeeded (" << data.size() - static_cast<Eigen::Index>(ids.size())
                << " misclassified rows skipped)\n"
                << path.string() << '\n';
    } else if (extract->parsed()) {
      const Network net = load_network(network_path);
      const Dataset data = load_csv(data_path);
      const FeatureKind fk = feature_kind_from_string(feature_name);
      FeatureMatrix all;
      for (const Counterparts& parts : craft_all(net, data, cfg, attack_kind_from_string(kind_name)))
        all.append(compute_features(net, parts, fk, cfg.features, cfg.workers).features);
      const auto path = out_path(common, "features.csv");
      save_features_csv(all, path.string());
      std::cout << all.rows() << " rows, " << all.count_positive() << " adversarial\n" << path.string() << '\n';
    } else if (train_det->parsed()) {
      const FeatureKind fk = feature_kind_from_string(feature_name);
      LogRegConfig lr = cfg.logreg;
      lr.seed = cfg.seed;
      const DetectorModel model = train_detector(load_features_csv(features_path, fk), lr, attack_label);
      const auto path = out_path(common, "detector.json");
      save_detector(model, path.string());
      if (!model.dropped_columns.empty())
        std::cerr << "warning: dropped " << model.dropped_columns.size() << " zero-variance feature columns\n";
      std::cout << path.string() << '\n';
    } else if (evaluate->parsed()) {
      const DetectorModel model = load_detector(detector_path);
      const double a = transfer_evaluate(model, load_features_csv(features_path, feature_kind_from_string(feature_name)));
      std::cout << "auc " << format_double(a) << '\n';
      if (!common.out.empty()) {
        std::ofstream(out_path(common, "evaluation.json")) << "{\"auc\": " << format_double(a) << "}\n";
      }
    } else if (tune->parsed()) {
      const Network net = load_network(network_path);
      const Dataset data = load_csv(data_path);
      TuneOptions options;
      options.parameter = parameter == "k" ? TunedParameter::k : TunedParameter::sigma;
      options.kind = parameter == "k" ? FeatureKind::lid : FeatureKind::kd;
      options.grid = parameter == "k" ? cfg.k_grid : cfg.sigma_grid;
      options.base = cfg.features;
      options.folds = cfg.folds;
      options.logreg = cfg.logreg;
      options.seed = cfg.seed;
      options.workers = cfg.workers;
      std::vector<std::vector<Counterparts>> batches;
      std::vector<std::string> names;
      for (AttackKind kind : cfg.attacks) {
        batches.push_back(craft_all(net, data, cfg, kind));
        names.push_back(to_string(kind));
      }
      const TuningResult result = tune_parameter(net, batches, names, options);
      const auto path = out_path(common, "tuning.csv");
      std::ofstream out(path);
      out << "x,y,series\n";
      for (std::size_t g = 0; g < result.grid.size(); ++g) {
        for (std::size_t a = 0; a < names.size(); ++a)
          out << format_double(result.grid[g]) << ',' << format_double(result.per_attack_auc[a][g]) << ',' << names[a] << '\n';
        out << format_double(result.grid[g]) << ',' << format_double(result.mean_auc[g]) << ",mean\n";
      }
      std::cout << "selected " << parameter << " = " << format_double(result.selected) << '\n' << path.string() << '\n';
    } else if (recipe->parsed()) {
      const ExperimentReport report = run_recipe(recipe_from_string(recipe_name), cfg);
      std::cout << "recipe " << report.recipe << " written to " << cfg.output_dir << '\n';
    }
    return 0;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
