#include "lidet/experiment.hpp"

#include "json.hpp"
#include "lidet/data.hpp"
#include "lidet/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace lidet {

namespace {

using json = nlohmann::json;

Seed derive(Seed seed, std::uint64_t stream) {
  Seed z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename Fn>
auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ValidationError& e) {
    throw ValidationError(name + ": " + e.what());
  } catch (const Error& e) {
    throw Error(name + ": " + e.what());
  }
}

std::string join_ids(const std::vector<std::size_t>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) out += (i ? " " : "") + std::to_string(ids[i]);
  return out;
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

enum class Split { train, test };

const char* to_cstr(Split s) { return s == Split::train ? "train" : "test"; }

/// Shared state of one recipe run: the prepared pipeline plus memoized
/// counterpart batches per (attack, split).
class Context {
 public:
  Context(const ExperimentConfig& cfg, ExperimentReport& report)
      : cfg_(cfg), report_(report), pipe_(stage("prepare", [&] { return prepare_pipeline(cfg, report); })) {
    attack_seed_ = derive(cfg.seed, 5);
    logreg_ = cfg.logreg;
    logreg_.seed = derive(cfg.seed, 6);
    report_.seeds["attack"] = attack_seed_;
    report_.seeds["logreg"] = logreg_.seed;
    report_.seeds["bu_base"] = cfg.features.bu.base_seed;
  }

  const ExperimentConfig& cfg() const { return cfg_; }
  const Pipeline& pipe() const { return pipe_; }
  ExperimentReport& report() { return report_; }
  const LogRegConfig& logreg() const { return logreg_; }

  const std::vector<std::size_t>& ids(Split s) const { return s == Split::train ? pipe_.train_ids : pipe_.test_ids; }

  const std::vector<Counterparts>& batches(AttackKind kind, Split split) {
    const auto key = std::make_pair(kind, split);
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    const std::string name = "craft " + to_string(kind) + "/" + to_cstr(split);
    auto built = stage(name, [&] { return build_batches(kind, split); });
    return cache_.emplace(key, std::move(built)).first->second;
  }

  /// Features of every batch of one split, stacked.
  FeatureMatrix features(AttackKind kind, Split split, FeatureKind fk, const FeatureParams& params) {
    const auto& parts = batches(kind, split);
    return stage("extract " + to_string(fk) + "/" + to_string(kind) + "/" + to_cstr(split), [&] {
      FeatureMatrix out;
      for (const Counterparts& p : parts) out.append(compute_features(pipe_.net, p, fk, params, cfg_.workers).features);
      return out;
    });
  }

  /// Trains on `train`, scores `test`, and records the split check.
  double train_and_score(const std::string& name, const FeatureMatrix& train, const FeatureMatrix& test,
                         const std::string& attack, DetectorModel* model_out = nullptr) {
    assert_disjoint(report_, name, train.source_ids, test.source_ids);
    return stage(name, [&] {
      DetectorModel model = train_detector(train, logreg_, attack);
      note_dropped(name, model);
      const double a = transfer_evaluate(model, test);
      if (model_out) *model_out = std::move(model);
      return a;
    });
  }

  void note_dropped(const std::string& name, const DetectorModel& model) {
    if (model.dropped_columns.empty()) return;
    std::string cols;
    for (Eigen::Index c : model.dropped_columns) cols += (cols.empty() ? "" : " ") + std::to_string(c);
    report_.notes.push_back(name + ": dropped zero-variance feature columns " + cols);
  }

 private:
  Counterparts craft(AttackKind kind, const std::vector<std::size_t>& ids, Seed seed) const {
    const Minibatch batch = batch_of(pipe_.pretest, ids);
    const auto labels = labels_of(pipe_.pretest, ids);
    AttackConfig attack = cfg_.attack_config(kind);
    attack.seed = seed;
    return craft_counterparts(pipe_.net, batch, labels, attack, seed, cfg_.workers);
  }

  bool degenerate(const Counterparts& parts) const {
    try {
      compute_features(pipe_.net, parts, FeatureKind::lid, cfg_.features, cfg_.workers);
      return false;
    } catch (const DegenerateProfileError&) {
      return true;
    } catch (const InfiniteEstimateError&) {
      return true;
    }
  }

  std::vector<Counterparts> build_batches(AttackKind kind, Split split) {
    const auto& all = ids(split);
    if (all.size() < cfg_.features.k + 1)
      throw ValidationError(std::string(to_cstr(split)) + " split has " + std::to_string(all.size()) +
                            " examples, fewer than features.k + 1");
    const auto groups = partition_ids(all, cfg_.minibatch_size);
    const Seed base = derive(attack_seed_, static_cast<std::uint64_t>(kind) * 2 + (split == Split::train ? 0 : 1));
    std::vector<Counterparts> out;
    for (std::size_t b = 0; b < groups.size(); ++b) {
      Counterparts parts = craft(kind, groups[b], derive(base, b));
      if (degenerate(parts)) {
        // Resample once from the same split.
        const auto pick = sample_indices(all.size(), groups[b].size(), derive(base, 1000003 + b));
        std::vector<std::size_t> redrawn;
        for (std::size_t p : pick) redrawn.push_back(all[p]);
        report_.notes.push_back(to_string(kind) + "/" + to_cstr(split) + " batch " + std::to_string(b) +
                                ": degenerate LID profile, minibatch resampled");
        parts = craft(kind, redrawn, derive(base, 2000003 + b));
        if (degenerate(parts)) throw DegenerateProfileError("degenerate LID profile after resampling a minibatch");
      }
      std::vector<std::size_t> failed;
      for (std::size_t i = 0; i < parts.size(); ++i)
        if (!parts.outcomes[i].success) failed.push_back(parts.ids[i]);
      if (!failed.empty())
        report_.notes.push_back(to_string(kind) + "/" + to_cstr(split) + " batch " + std::to_string(b) + ": " +
                                std::to_string(failed.size()) + " of " + std::to_string(parts.size()) +
                                " attacks failed, adversarial rows dropped for ids " + join_ids(failed));
      out.push_back(std::move(parts));
    }
    return out;
  }

  const ExperimentConfig& cfg_;
  ExperimentReport& report_;
  Pipeline pipe_;
  Seed attack_seed_ = 0;
  LogRegConfig logreg_{};
  std::map<std::pair<AttackKind, Split>, std::vector<Counterparts>> cache_;
};

const std::string& dataset_name(const ExperimentConfig& cfg) { return cfg.dataset.name; }

void recipe_table5(Context& ctx) {
  ExperimentReport& report = ctx.report();
  for (AttackKind kind : ctx.cfg().attacks) {
    AttackRow row;
    row.attack = to_string(kind);
    double l2 = 0.0;
    for (Split split : {Split::train, Split::test})
      for (const Counterparts& parts : ctx.batches(kind, split))
        for (const AttackOutcome& o : parts.outcomes) {
          ++row.attempted;
          if (o.success) {
            ++row.successes;
            l2 += o.l2_perturbation;
          }
        }
    row.mean_l2 = row.successes ? l2 / static_cast<double>(row.successes) : 0.0;
    row.post_attack_accuracy = 1.0 - static_cast<double>(row.successes) / static_cast<double>(row.attempted);
    report.metrics["table5/mean_l2/" + row.attack] = row.mean_l2;
    report.metrics["table5/post_attack_accuracy/" + row.attack] = row.post_attack_accuracy;
    report.attacks.push_back(row);
  }
  report.notes.push_back("fgm and bim epsilon are calibration choices for the toy data (no published values)");
}

void recipe_table1(Context& ctx) {
  ExperimentReport& report = ctx.report();
  const ExperimentConfig& cfg = ctx.cfg();
  for (AttackKind kind : cfg.attacks) {
    for (FeatureKind fk : cfg.feature_kinds) {
      const FeatureMatrix train = ctx.features(kind, Split::train, fk, cfg.features);
      const FeatureMatrix test = ctx.features(kind, Split::test, fk, cfg.features);
      const std::string name = "table1/" + to_string(kind) + "/" + to_string(fk);
      AucRow row{dataset_name(cfg), to_string(kind), to_string(fk), 0.0, static_cast<std::size_t>(train.rows()),
                 static_cast<std::size_t>(test.rows())};
      row.auc = ctx.train_and_score(name, train, test, to_string(kind));
      report.metrics["table1/auc/" + row.attack + "/" + row.feature_kind] = row.auc;
      report.auc_table.push_back(row);
    }
  }
}

void recipe_table2(Context& ctx) {
  ExperimentReport& report = ctx.report();
  const ExperimentConfig& cfg = ctx.cfg();
  const AttackKind source = cfg.transfer_train_attack;
  for (FeatureKind fk : cfg.feature_kinds) {
    const FeatureMatrix train = ctx.features(source, Split::train, fk, cfg.features);
    DetectorModel model;
    bool trained = false;
    for (AttackKind target : cfg.attacks) {
      const FeatureMatrix test = ctx.features(target, Split::test, fk, cfg.features);
      const std::string name = "table2/" + to_string(source) + "->" + to_string(target) + "/" + to_string(fk);
      TransferRow row{to_string(source), to_string(target), to_string(fk), 0.0};
      if (!trained) {
        row.auc = ctx.train_and_score(name, train, test, to_string(source), &model);
        trained = true;
      } else {
        assert_disjoint(report, name, train.source_ids, test.source_ids);
        row.auc = stage(name, [&] { return transfer_evaluate(model, test); });
      }
      report.metrics["table2/auc/" + row.train_attack + "->" + row.test_attack + "/" + row.feature_kind] = row.auc;
      report.transfer.push_back(row);
    }
  }
}

void recipe_fig2(Context& ctx) {
  ExperimentReport& report = ctx.report();
  const ExperimentConfig& cfg = ctx.cfg();
  for (AttackKind kind : cfg.attacks) {
    const std::string a = to_string(kind);
    const FeatureMatrix test = ctx.features(kind, Split::test, FeatureKind::lid, cfg.features);
    const auto curve = stage("fig2/" + a, [&] { return layerwise_auc(test); });
    for (const auto& [layer, value] : curve) report.series.push_back({"layer_auc/" + a, static_cast<double>(layer), value});
    for (Provenance p : {Provenance::normal, Provenance::noisy, Provenance::adversarial}) {
      for (Eigen::Index c = 0; c < test.cols(); ++c) {
        double sum = 0.0;
        std::size_t n = 0;
        for (Eigen::Index r = 0; r < test.rows(); ++r)
          if (test.provenance[static_cast<std::size_t>(r)] == p) {
            sum += test.values(r, c);
            ++n;
          }
        const double mean = n ? sum / static_cast<double>(n) : 0.0;
        report.series.push_back({"lid_mean/" + a + "/" + to_string(p), static_cast<double>(c), mean});
        if (c + 1 == test.cols()) report.metrics["fig2/final_lid_mean/" + a + "/" + to_string(p)] = mean;
      }
    }
    report.metrics["fig2/final_layer_auc/" + a] = curve.back().second;
  }
}

std::vector<std::vector<Counterparts>> train_batches(Context& ctx, std::vector<std::string>& names) {
  std::vector<std::vector<Counterparts>> out;
  for (AttackKind kind : ctx.cfg().attacks) {
    out.push_back(ctx.batches(kind, Split::train));
    names.push_back(to_string(kind));
  }
  return out;
}

void emit_tuning(ExperimentReport& report, const std::string& prefix, const TuningResult& result) {
  for (std::size_t g = 0; g < result.grid.size(); ++g) {
    for (std::size_t a = 0; a < result.attacks.size(); ++a)
      report.series.push_back({prefix + "/" + result.attacks[a], result.grid[g], result.per_attack_auc[a][g]});
    report.series.push_back({prefix + "/mean", result.grid[g], result.mean_auc[g]});
  }
  report.metrics[prefix + "/selected"] = result.selected;
  report.metrics[prefix + "/selected_mean_auc"] = result.mean_auc[result.selected_index];
}

void recipe_fig3(Context& ctx) {
  ExperimentReport& report = ctx.report();
  const ExperimentConfig& cfg = ctx.cfg();
  std::vector<std::string> names;
  const auto batches = train_batches(ctx, names);
  TuneOptions options;
  options.base = cfg.features;
  options.folds = cfg.folds;
  options.logreg = ctx.logreg();
  options.seed = derive(cfg.seed, 7);
  options.workers = cfg.workers;
  report.seeds["tune"] = options.seed;

  options.parameter = TunedParameter::sigma;
  options.kind = FeatureKind::kd;
  options.grid = cfg.sigma_grid;
  emit_tuning(report, "kd_sigma", stage("fig3/sigma", [&] { return tune_parameter(ctx.pipe().net, batches, names, options); }));

  options.parameter = TunedParameter::k;
  options.kind = FeatureKind::lid;
  options.grid = cfg.k_grid;
  emit_tuning(report, "lid_k", stage("fig3/k", [&] { return tune_parameter(ctx.pipe().net, batches, names, options); }));
}

void recipe_fig4(Context& ctx) {
  ExperimentReport& report = ctx.report();
  const ExperimentConfig& cfg = ctx.cfg();
  const Pipeline& pipe = ctx.pipe();
  const std::size_t largest = *std::max_element(cfg.fig4_minibatch_sizes.begin(), cfg.fig4_minibatch_sizes.end());
  if (pipe.train_ids.size() < largest)
    throw ValidationError("fig4: train split has " + std::to_string(pipe.train_ids.size()) +
                          " examples, fewer than the largest minibatch " + std::to_string(largest));
  const std::vector<std::size_t> ids(pipe.train_ids.begin(), pipe.train_ids.begin() + static_cast<std::ptrdiff_t>(largest));
  const Minibatch pool = batch_of(pipe.pretest, ids);
  const auto labels = labels_of(pipe.pretest, ids);

  std::vector<std::string> names;
  std::vector<Counterparts> crafted;
  for (AttackKind kind : cfg.attacks) {
    AttackConfig attack = cfg.attack_config(kind);
    attack.seed = derive(cfg.seed, 40 + static_cast<std::uint64_t>(kind));
    crafted.push_back(stage("fig4/craft " + to_string(kind), [&] {
      return craft_counterparts(pipe.net, pool, labels, attack, attack.seed, cfg.workers);
    }));
    names.push_back(to_string(kind));
  }

  TuneOptions options;
  options.parameter = TunedParameter::k;
  options.kind = FeatureKind::lid;
  options.base = cfg.features;
  options.folds = cfg.folds;
  options.logreg = ctx.logreg();
  options.seed = derive(cfg.seed, 7);
  options.workers = cfg.workers;
  report.seeds["tune"] = options.seed;

  for (std::size_t size : cfg.fig4_minibatch_sizes) {
    options.grid.clear();
    for (double k : cfg.k_grid)
      if (k + 1 <= static_cast<double>(size)) options.grid.push_back(k);
    if (options.grid.empty()) throw ValidationError("fig4: no k grid value fits minibatch size " + std::to_string(size));
    std::vector<std::vector<Counterparts>> batches;
    for (const Counterparts& parts : crafted) {
      std::vector<Counterparts> sliced;
      for (std::size_t b = 0; b + size <= parts.size(); b += size) sliced.push_back(slice_counterparts(parts, b, b + size));
      batches.push_back(std::move(sliced));
    }
    const std::string prefix = "lid_k/mb" + std::to_string(size);
    emit_tuning(report, prefix, stage("fig4/" + prefix, [&] { return tune_parameter(pipe.net, batches, names, options); }));
  }
}

void recipe_table4(Context& ctx) {
  ExperimentReport& report = ctx.report();
  const ExperimentConfig& cfg = ctx.cfg();
  const Pipeline& pipe = ctx.pipe();

  // Detectors trained on plain Opt examples from the train split.
  const FeatureMatrix train = ctx.features(AttackKind::opt, Split::train, FeatureKind::lid, cfg.features);
  const std::vector<Eigen::Index> pre{static_cast<Eigen::Index>(pipe.net.pre_softmax_index())};
  const FeatureMatrix train_pre = train.select_columns(pre);
  DetectorModel all_layers, pre_softmax;
  stage("table4/train detectors", [&] {
    all_layers = train_detector(train, ctx.logreg(), "opt");
    pre_softmax = train_detector(train_pre, ctx.logreg(), "opt");
    ctx.note_dropped("table4/all_layers", all_layers);
    ctx.note_dropped("table4/pre_softmax", pre_softmax);
    return 0;
  });

  const std::size_t ref_size = std::min(cfg.minibatch_size, pipe.train_ids.size());
  const std::vector<std::size_t> ref_ids(pipe.train_ids.begin(), pipe.train_ids.begin() + static_cast<std::ptrdiff_t>(ref_size));
  const Minibatch refs = batch_of(pipe.pretest, ref_ids);
  const std::size_t n_inputs = std::min(cfg.adaptive_inputs, pipe.test_ids.size());
  const std::vector<std::size_t> input_ids(pipe.test_ids.begin(), pipe.test_ids.begin() + static_cast<std::ptrdiff_t>(n_inputs));
  const Dataset inputs = take(pipe.pretest, input_ids);

  std::vector<std::size_t> seen(train.source_ids);
  seen.insert(seen.end(), ref_ids.begin(), ref_ids.end());
  assert_disjoint(report, "table4/adaptive_inputs", seen, input_ids);

  auto push = [&](const std::string& prefix, const FailureRates& r) {
    report.failure_rates.push_back({prefix + "scenario1", r.scenario1, r.inputs, r.attack_failures, r.detected_scenario1});
    report.failure_rates.push_back({prefix + "scenario2", r.scenario2, r.inputs, r.attack_failures, r.detected_scenario2});
    report.metrics["table4/" + prefix + "scenario1"] = r.scenario1;
    report.metrics["table4/" + prefix + "scenario2"] = r.scenario2;
  };

  AttackConfig adaptive = cfg.attack_config(AttackKind::adaptive_opt);
  adaptive.seed = derive(cfg.seed, 8);
  report.seeds["adaptive"] = adaptive.seed;
  push("", stage("table4/adaptive", [&] {
         return adaptive_failure_rate(pipe.net, all_layers, pre_softmax, inputs, refs, adaptive, cfg.workers);
       }));

  if (cfg.alpha_min_control) {
    const double lo = cfg.alpha_search.lo;
    AttackConfig pinned = adaptive;
    pinned.alpha_search = ConstantSearch{lo, lo, lo, cfg.alpha_search.steps};
    push("alpha_min/", stage("table4/alpha_min", [&] {
           return adaptive_failure_rate(pipe.net, all_layers, pre_softmax, inputs, refs, pinned, cfg.workers);
         }));
    const AttackConfig plain = cfg.attack_config(AttackKind::opt);
    push("plain_opt/", stage("table4/plain_opt", [&] {
           std::vector<AttackOutcome> outcomes(static_cast<std::size_t>(inputs.size()));
           parallel_for(outcomes.size(), cfg.workers, [&](std::size_t i) {
             outcomes[i] = opt_l2(pipe.net, inputs.features.row(static_cast<Eigen::Index>(i)).transpose(), inputs.labels[i], plain);
           });
           return detection_failure_rates(pipe.net, all_layers, pre_softmax, outcomes, refs, cfg.features.k);
         }));
  }
  report.notes.push_back("table4 counts an input as detected when the detector probability exceeds 0.5");
}

json to_json(const ExperimentReport& r) {
  json doc;
  doc["recipe"] = r.recipe;
  doc["config"] = json::array();
  for (const auto& [k, v] : r.config) doc["config"].push_back({k, v});
  doc["seeds"] = r.seeds;
  doc["environment"] = r.environment;
  doc["auc_table"] = json::array();
  for (const AucRow& x : r.auc_table)
    doc["auc_table"].push_back({{"dataset", x.dataset}, {"attack", x.attack}, {"feature_kind", x.feature_kind},
                                {"auc", x.auc}, {"train_rows", x.train_rows}, {"test_rows", x.test_rows}});
  doc["attacks"] = json::array();
  for (const AttackRow& x : r.attacks)
    doc["attacks"].push_back({{"attack", x.attack}, {"attempted", x.attempted}, {"successes", x.successes},
                              {"mean_l2", x.mean_l2}, {"post_attack_accuracy", x.post_attack_accuracy}});
  doc["transfer"] = json::array();
  for (const TransferRow& x : r.transfer)
    doc["transfer"].push_back({{"train_attack", x.train_attack}, {"test_attack", x.test_attack},
                               {"feature_kind", x.feature_kind}, {"auc", x.auc}});
  doc["failure_rates"] = json::array();
  for (const FailureRow& x : r.failure_rates)
    doc["failure_rates"].push_back({{"scenario", x.scenario}, {"rate", x.rate}, {"inputs", x.inputs},
                                    {"attack_failures", x.attack_failures}, {"detected", x.detected}});
  doc["series"] = json::array();
  for (const SeriesPoint& x : r.series) doc["series"].push_back({{"series", x.series}, {"x", x.x}, {"y", x.y}});
  doc["splits"] = json::array();
  for (const SplitCheck& x : r.splits)
    doc["splits"].push_back({{"stage", x.stage}, {"train_ids", x.train_ids}, {"test_ids", x.test_ids}, {"overlap", x.overlap}});
  doc["metrics"] = r.metrics;
  doc["notes"] = r.notes;
  return doc;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

}  // namespace

std::string to_string(Recipe recipe) {
  switch (recipe) {
    case Recipe::table1: return "table1";
    case Recipe::table2: return "table2";
    case Recipe::table4: return "table4";
    case Recipe::table5: return "table5";
    case Recipe::fig2: return "fig2";
    case Recipe::fig3: return "fig3";
    case Recipe::fig4: return "fig4";
  }
  return "?";
}

Recipe recipe_from_string(const std::string& name) {
  for (Recipe r : {Recipe::table1, Recipe::table2, Recipe::table4, Recipe::table5, Recipe::fig2, Recipe::fig3, Recipe::fig4})
    if (to_string(r) == name) return r;
  throw ValidationError("unknown recipe '" + name + "'");
}

void check_finite(const ExperimentReport& r) {
  auto check = [](double v, const std::string& what) {
    if (!std::isfinite(v)) throw NumericOverflowError("report value " + what + " is not finite");
  };
  for (const AucRow& x : r.auc_table) check(x.auc, "auc_table/" + x.attack + "/" + x.feature_kind);
  for (const AttackRow& x : r.attacks) {
    check(x.mean_l2, "attacks/" + x.attack);
    check(x.post_attack_accuracy, "attacks/" + x.attack);
  }
  for (const TransferRow& x : r.transfer) check(x.auc, "transfer/" + x.test_attack);
  for (const FailureRow& x : r.failure_rates) check(x.rate, "failure_rates/" + x.scenario);
  for (const SeriesPoint& x : r.series) {
    check(x.x, "series/" + x.series);
    check(x.y, "series/" + x.series);
  }
  for (const auto& [k, v] : r.metrics) check(v, "metrics/" + k);
}

std::string report_to_json(const ExperimentReport& report) { return to_json(report).dump(1); }

ExperimentReport report_from_json(const std::string& text) {
  try {
    const json doc = json::parse(text);
    ExperimentReport r;
    r.recipe = doc.at("recipe").get<std::string>();
    for (const json& kv : doc.at("config")) r.config.emplace_back(kv.at(0).get<std::string>(), kv.at(1).get<std::string>());
    r.seeds = doc.at("seeds").get<std::map<std::string, Seed>>();
    r.environment = doc.at("environment").get<std::map<std::string, std::string>>();
    for (const json& x : doc.at("auc_table"))
      r.auc_table.push_back({x.at("dataset"), x.at("attack"), x.at("feature_kind"), x.at("auc"), x.at("train_rows"),
                             x.at("test_rows")});
    for (const json& x : doc.at("attacks"))
      r.attacks.push_back({x.at("attack"), x.at("attempted"), x.at("successes"), x.at("mean_l2"), x.at("post_attack_accuracy")});
    for (const json& x : doc.at("transfer"))
      r.transfer.push_back({x.at("train_attack"), x.at("test_attack"), x.at("feature_kind"), x.at("auc")});
    for (const json& x : doc.at("failure_rates"))
      r.failure_rates.push_back({x.at("scenario"), x.at("rate"), x.at("inputs"), x.at("attack_failures"), x.at("detected")});
    for (const json& x : doc.at("series")) r.series.push_back({x.at("series"), x.at("x"), x.at("y")});
    for (const json& x : doc.at("splits"))
      r.splits.push_back({x.at("stage"), x.at("train_ids"), x.at("test_ids"), x.at("overlap")});
    r.metrics = doc.at("metrics").get<std::map<std::string, double>>();
    r.notes = doc.at("notes").get<std::vector<std::string>>();
    return r;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed report JSON: ") + e.what());
  }
}

void save_report(const ExperimentReport& report, const std::string& dir) {
  check_finite(report);
  const std::filesystem::path root(dir);
  std::filesystem::create_directories(root);
  write_text(root / "report.json", report_to_json(report) + "\n");

  std::ostringstream auc, attacks, transfer, failures, series, splits;
  auc << "dataset,attack,feature_kind,auc,train_rows,test_rows\n";
  for (const AucRow& x : report.auc_table)
    auc << x.dataset << ',' << x.attack << ',' << x.feature_kind << ',' << format_double(x.auc) << ',' << x.train_rows
        << ',' << x.test_rows << '\n';
  attacks << "attack,attempted,successes,mean_l2,post_attack_accuracy\n";
  for (const AttackRow& x : report.attacks)
    attacks << x.attack << ',' << x.attempted << ',' << x.successes << ',' << format_double(x.mean_l2) << ','
            << format_double(x.post_attack_accuracy) << '\n';
  transfer << "train_attack,test_attack,feature_kind,auc\n";
  for (const TransferRow& x : report.transfer)
    transfer << x.train_attack << ',' << x.test_attack << ',' << x.feature_kind << ',' << format_double(x.auc) << '\n';
  failures << "scenario,rate,inputs,attack_failures,detected\n";
  for (const FailureRow& x : report.failure_rates)
    failures << x.scenario << ',' << format_double(x.rate) << ',' << x.inputs << ',' << x.attack_failures << ','
             << x.detected << '\n';
  series << "x,y,series\n";
  for (const SeriesPoint& x : report.series) series << format_double(x.x) << ',' << format_double(x.y) << ',' << x.series << '\n';
  splits << "stage,train_ids,test_ids,overlap\n";
  for (const SplitCheck& x : report.splits)
    splits << x.stage << ',' << x.train_ids << ',' << x.test_ids << ',' << x.overlap << '\n';

  write_text(root / "auc_table.csv", auc.str());
  write_text(root / "attacks.csv", attacks.str());
  write_text(root / "transfer.csv", transfer.str());
  write_text(root / "failure_rates.csv", failures.str());
  write_text(root / "series.csv", series.str());
  write_text(root / "splits.csv", splits.str());
}

ExperimentReport load_report(const std::string& dir) {
  const auto path = std::filesystem::path(dir) / "report.json";
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return report_from_json(buf.str());
}

void assert_disjoint(ExperimentReport& report, const std::string& stage_name, const std::vector<std::size_t>& train_ids,
                     const std::vector<std::size_t>& test_ids) {
  const std::set<std::size_t> train(train_ids.begin(), train_ids.end());
  const std::set<std::size_t> test(test_ids.begin(), test_ids.end());
  std::size_t overlap = 0;
  for (std::size_t id : test) overlap += train.count(id);
  report.splits.push_back({stage_name, train.size(), test.size(), overlap});
  if (overlap != 0)
    throw Error(stage_name + ": " + std::to_string(overlap) + " ids appear in both the training and the test side");
}

std::vector<std::vector<std::size_t>> partition_ids(const std::vector<std::size_t>& ids, std::size_t size) {
  if (size == 0) throw ValidationError("partition size must be positive");
  const std::size_t groups = std::max<std::size_t>(1, ids.size() / size);
  std::vector<std::vector<std::size_t>> out(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t begin = g * ids.size() / groups, end = (g + 1) * ids.size() / groups;
    out[g].assign(ids.begin() + static_cast<std::ptrdiff_t>(begin), ids.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

Counterparts slice_counterparts(const Counterparts& parts, std::size_t begin, std::size_t end) {
  if (begin > end || end > parts.size()) throw RangeError("counterpart slice out of range");
  const auto b = static_cast<Eigen::Index>(begin), n = static_cast<Eigen::Index>(end - begin);
  Counterparts out;
  out.attack = parts.attack;
  out.ids.assign(parts.ids.begin() + b, parts.ids.begin() + b + n);
  out.labels.assign(parts.labels.begin() + b, parts.labels.begin() + b + n);
  out.outcomes.assign(parts.outcomes.begin() + b, parts.outcomes.begin() + b + n);
  out.normal = parts.normal.middleRows(b, n);
  out.adversarial = parts.adversarial.middleRows(b, n);
  out.noisy = parts.noisy.middleRows(b, n);
  return out;
}

void save_attack_csv(const std::vector<std::size_t>& ids, const std::vector<AttackOutcome>& outcomes, AttackKind kind,
                     const std::string& path) {
  if (ids.size() != outcomes.size()) throw ValidationError("id and outcome counts differ");
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << "id,attack_kind,success,iterations,l2_perturbation";
  const Eigen::Index dim = outcomes.empty() ? 0 : outcomes.front().adversarial.size();
  for (Eigen::Index c = 0; c < dim; ++c) out << ",x" << c;
  out << '\n';
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const AttackOutcome& o = outcomes[i];
    out << ids[i] << ',' << to_string(kind) << ',' << (o.success ? 1 : 0) << ',' << o.iterations_used << ','
        << format_double(o.l2_perturbation);
    for (Eigen::Index c = 0; c < o.adversarial.size(); ++c) out << ',' << format_double(o.adversarial[c]);
    out << '\n';
  }
}

Pipeline prepare_pipeline(const ExperimentConfig& cfg, ExperimentReport& report) {
  cfg.validate();
  const Seed data_seed = derive(cfg.seed, 1);
  const Seed embed_seed = derive(cfg.seed, 2);
  const Seed net_seed = derive(cfg.seed, 3);
  const Seed split_seed = derive(cfg.seed, 4);
  report.seeds["experiment"] = cfg.seed;
  report.seeds["data"] = data_seed;
  report.seeds["embed"] = embed_seed;
  report.seeds["network"] = net_seed;
  report.seeds["split"] = split_seed;

  const std::size_t total = cfg.dataset.train_n + cfg.dataset.test_n;
  Dataset all;
  if (cfg.dataset.name == "csv") {
    all = load_csv(cfg.dataset.path);
    if (static_cast<std::size_t>(all.size()) < cfg.dataset.train_n + 10)
      throw ValidationError("dataset file has too few rows for dataset.train_n plus a test pool");
    all = slice(all, 0, std::min<Eigen::Index>(all.size(), static_cast<Eigen::Index>(total)));
  } else {
    SyntheticSpec spec;
    spec.generator = generator_from_string(cfg.dataset.name);
    spec.n = total;
    spec.seed = data_seed;
    spec.embed_seed = embed_seed;
    spec.ambient_dim = cfg.dataset.ambient_d;
    spec.manifold_dim = cfg.dataset.manifold_d;
    spec.noise = cfg.dataset.noise;
    spec.num_classes = cfg.dataset.num_classes;
    spec.blob_std = cfg.dataset.blob_std;
    all = gen_synthetic(spec);
  }
  const auto split_at = static_cast<Eigen::Index>(cfg.dataset.train_n);
  Dataset train = slice(all, 0, split_at);
  Dataset pretest = slice(all, split_at, all.size());
  const Eigen::Index classes = std::max(2, all.num_classes());

  Network net = [&] {
    if (!cfg.network.path.empty()) {
      Network loaded = load_network(cfg.network.path);
      if (loaded.input_dim() != all.dim() || loaded.num_classes() < classes)
        throw ValidationError("network " + cfg.network.path + " does not match the dataset shape");
      return loaded;
    }
    SgdConfig sgd = cfg.train;
    sgd.seed = net_seed;
    return train_sgd(train, cfg.layers(all.dim(), classes), sgd);
  }();
  report.metrics["network/train_accuracy"] = accuracy(net, train);
  report.metrics["network/pretest_accuracy"] = accuracy(net, pretest);

  std::vector<std::size_t> correct;
  for (Eigen::Index i = 0; i < pretest.size(); ++i)
    if (predict(net, pretest.features.row(i).transpose()) == pretest.labels[static_cast<std::size_t>(i)])
      correct.push_back(static_cast<std::size_t>(i));
  std::vector<std::size_t> shuffled = correct;
  std::mt19937_64 rng(split_seed);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const std::size_t n_train = shuffled.size() * 4 / 5;
  std::vector<std::size_t> train_ids(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::size_t> test_ids(shuffled.begin() + static_cast<std::ptrdiff_t>(n_train), shuffled.end());
  assert_disjoint(report, "detector_split", train_ids, test_ids);
  if (test_ids.size() < cfg.features.k + 1)
    throw ValidationError("only " + std::to_string(correct.size()) +
                          " correctly classified pre-test examples; the test split is smaller than features.k + 1");
  return Pipeline{std::move(train), std::move(pretest), std::move(net), std::move(correct), std::move(train_ids),
                  std::move(test_ids)};
}

ExperimentReport run_recipe(Recipe recipe, const ExperimentConfig& cfg_in) {
  ExperimentConfig cfg = cfg_in;
  ExperimentReport report;
  report.recipe = to_string(recipe);
  if (recipe == Recipe::fig4) {
    // The largest minibatch must fit inside the 80% train split.
    const std::size_t largest = *std::max_element(cfg.fig4_minibatch_sizes.begin(), cfg.fig4_minibatch_sizes.end());
    const std::size_t needed = (largest * 8 + 4) / 5;
    if (cfg.dataset.name != "csv" && cfg.dataset.test_n < needed) {
      report.notes.push_back("fig4 enlarged dataset.test_n from " + std::to_string(cfg.dataset.test_n) + " to " +
                             std::to_string(needed) + " so the largest minibatch fits the train split");
      cfg.dataset.test_n = needed;
    }
  }
  report.config = cfg.describe();
  report.environment["compiler"] = __VERSION__;
  report.environment["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                std::to_string(EIGEN_MINOR_VERSION);
  report.environment["cxx_standard"] = std::to_string(__cplusplus);

  Context ctx(cfg, report);
  switch (recipe) {
    case Recipe::table1: recipe_table1(ctx); break;
    case Recipe::table2: recipe_table2(ctx); break;
    case Recipe::table4: recipe_table4(ctx); break;
    case Recipe::table5: recipe_table5(ctx); break;
    case Recipe::fig2: recipe_fig2(ctx); break;
    case Recipe::fig3: recipe_fig3(ctx); break;
    case Recipe::fig4: recipe_fig4(ctx); break;
  }
  check_finite(report);
  if (!cfg.output_dir.empty()) save_report(report, cfg.output_dir);
  return report;
}

}  // namespace lidet
