// Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero when
// any criterion fails.

#include "lidet/attacks.hpp"
#include "lidet/characteristics.hpp"
#include "lidet/config.hpp"
#include "lidet/data.hpp"
#include "lidet/detector.hpp"
#include "lidet/experiment.hpp"
#include "lidet/neighborhood.hpp"
#include "lidet/network.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

using namespace lidet;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

ExperimentConfig config_from(const std::string& text) { return apply_config(ConfigMap::parse(text)); }

// Reports of every recipe run by the suite, for the split check.
std::vector<ExperimentReport>& reports() {
  static std::vector<ExperimentReport> all;
  return all;
}

ExperimentReport run_and_keep(Recipe recipe, const ExperimentConfig& cfg) {
  reports().push_back(run_recipe(recipe, cfg));
  return reports().back();
}

RowMatrix uniform_ball(Eigen::Index n, Eigen::Index m, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u;
  RowMatrix out(n, m);
  Vector v(m);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) v[j] = g(rng);
    out.row(i) = (v.normalized() * std::pow(u(rng), 1.0 / static_cast<double>(m))).transpose();
  }
  return out;
}

Network random_net(std::mt19937_64& rng, Eigen::Index in) {
  const Eigen::Index hidden = 3 + static_cast<Eigen::Index>(rng() % 8);
  const Eigen::Index classes = 2 + static_cast<Eigen::Index>(rng() % 3);
  std::vector<LayerSpec> layers{LayerSpec::dense(in, hidden), LayerSpec::relu(hidden)};
  if (rng() % 2) layers.push_back(LayerSpec::dropout(hidden, 0.25));
  layers.push_back(LayerSpec::dense(hidden, classes));
  layers.push_back(LayerSpec::softmax(classes));
  return Network::initialize(layers, rng());
}

Verdict estimator_recovery() {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  std::ostringstream detail;
  bool pass = true;
  for (int m : {1, 2, 4, 8}) {
    double total = 0.0;
    for (int q = 0; q < 50; ++q) {
      const RowMatrix pts = uniform_ball(10000, m, rng);
      total += mle_lid(knn_profile(Vector::Zero(m), pts, 100, std::nullopt)).value;
    }
    const double mean = total / 50.0;
    pass = pass && std::abs(mean - m) <= 0.15 * m;
    detail << "m=" << m << " mean=" << mean << "; ";
  }
  const double elapsed = seconds_since(start);
  detail << "runtime=" << elapsed << "s";
  return {pass && elapsed < 30.0, detail.str()};
}

Verdict scale_invariance() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(1e-3, 10.0);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> d(2 + rng() % 99);
    for (double& v : d) v = u(rng);
    std::sort(d.begin(), d.end());
    DistanceProfile p;
    p.distances = d;
    const double base = mle_lid(p).value;
    for (double c : {1e-3, 1.0, 1e3}) {
      DistanceProfile s = p;
      for (double& v : s.distances) v *= c;
      worst = std::max(worst, std::abs(mle_lid(s).value - base) / base);
    }
  }
  return {worst <= 1e-12, "max relative deviation " + std::to_string(worst)};
}

Verdict oracle_equivalences() {
  std::mt19937_64 rng(11);
  std::size_t knn_bad = 0, auc_bad = 0, jsma_bad = 0;

  for (int trial = 0; trial < 300; ++trial) {
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng() % 199);
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng() % 5);
    std::uniform_int_distribution<int> grid(0, 3);
    std::uniform_real_distribution<double> u;
    RowMatrix refs(n, d);
    Vector q(d);
    const bool coarse = trial % 2 == 0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < d; ++j) refs(i, j) = coarse ? grid(rng) : u(rng);
    for (Eigen::Index j = 0; j < d; ++j) q[j] = coarse ? grid(rng) + 0.5 : u(rng);
    std::vector<std::pair<double, Eigen::Index>> all;
    for (Eigen::Index i = 0; i < n; ++i) {
      double sq = 0;
      for (Eigen::Index j = 0; j < d; ++j) sq += (refs(i, j) - q[j]) * (refs(i, j) - q[j]);
      all.emplace_back(std::sqrt(sq), i);
    }
    std::sort(all.begin(), all.end());
    const std::size_t k = 1 + rng() % static_cast<std::size_t>(n);
    const DistanceProfile p = knn_profile(q, refs, k, std::nullopt);
    for (std::size_t i = 0; i < k; ++i)
      if (p.distances[i] != all[i].first || p.neighbors[i] != all[i].second) ++knn_bad;
  }

  for (int trial = 0; trial < 300; ++trial) {
    std::uniform_int_distribution<int> coarse(0, 6);
    std::normal_distribution<double> fine;
    const std::size_t np = 1 + rng() % 250, nn = 1 + rng() % 250;
    std::vector<double> pos(np), neg(nn);
    for (double& v : pos) v = trial % 2 ? coarse(rng) + 1 : fine(rng) + 0.5;
    for (double& v : neg) v = trial % 2 ? coarse(rng) : fine(rng);
    double count = 0;
    for (double a : pos)
      for (double b : neg) count += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
    if (auc(pos, neg) != count / static_cast<double>(np * nn)) ++auc_bad;
  }

  for (int trial = 0; trial < 400; ++trial) {
    const Eigen::Index in = 3 + static_cast<Eigen::Index>(trial % 4);
    const Network net = random_net(rng, in);
    std::uniform_int_distribution<int> level(0, 4);
    Vector x(in);
    std::vector<bool> searchable(static_cast<std::size_t>(in));
    for (Eigen::Index i = 0; i < in; ++i) {
      x[i] = level(rng) / 4.0;
      searchable[static_cast<std::size_t>(i)] = rng() % 4 != 0;
    }
    const Matrix jac = logit_jacobian(net, x);
    const Eigen::Index target = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(net.num_classes()));
    const Vector t = jac.row(target).transpose();
    const Vector o = jac.colwise().sum().transpose() - t;
    std::optional<JsmaChoice> want;
    for (bool increase : {true, false}) {
      for (Eigen::Index a = 0; a < in; ++a)
        for (Eigen::Index b = a + 1; b < in; ++b) {
          if (!searchable[a] || !searchable[b]) continue;
          if (increase ? (x[a] >= 1.0 || x[b] >= 1.0) : (x[a] <= 0.0 || x[b] <= 0.0)) continue;
          const double ts = t[a] + t[b], os = o[a] + o[b];
          if (!(increase ? (ts > 0 && os < 0) : (ts < 0 && os > 0))) continue;
          const double s = std::abs(ts) * std::abs(os);
          if (!want || s > want->score) want = JsmaChoice{a, b, increase, s};
        }
      if (want) break;
    }
    const auto got = jsma_select_pair(t, o, x, searchable, 0.0, 1.0);
    if (got.has_value() != want.has_value() ||
        (got && (got->first != want->first || got->second != want->second || got->increase != want->increase)))
      ++jsma_bad;
  }

  std::ostringstream detail;
  detail << "knn mismatches=" << knn_bad << " auc mismatches=" << auc_bad << " jsma mismatches=" << jsma_bad;
  return {knn_bad == 0 && auc_bad == 0 && jsma_bad == 0, detail.str()};
}

Verdict gradient_correctness() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  double worst = 0.0;
  const double h = 1e-6;
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Index in = 2 + static_cast<Eigen::Index>(rng() % 5);
    const Network net = random_net(rng, in);
    Vector x(in);
    for (Eigen::Index i = 0; i < in; ++i) x[i] = u(rng);
    const Objective obj = Objective::cross_entropy(static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(net.num_classes())));
    const Vector g = input_gradient(net, x, obj);
    for (Eigen::Index i = 0; i < in; ++i) {
      Vector xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      const double fd =
          (value_and_input_gradient(net, xp, obj).value - value_and_input_gradient(net, xm, obj).value) / (2 * h);
      // Coordinates with |gradient| below 1e-6 are compared on that scale.
      const double scale = std::max({std::abs(g[i]), std::abs(fd), 1e-6});
      worst = std::max(worst, std::abs(g[i] - fd) / scale);
    }
  }
  return {worst <= 1e-4, "max relative error " + std::to_string(worst)};
}

Verdict attack_efficacy() {
  const auto start = std::chrono::steady_clock::now();
  const ExperimentReport r = run_and_keep(Recipe::table5, ExperimentConfig{});
  const double elapsed = seconds_since(start);
  std::ostringstream detail;
  bool pass = true;
  for (const char* a : {"bim_a", "bim_b", "jsma", "opt"}) {
    const double acc = r.metrics.at(std::string("table5/post_attack_accuracy/") + a);
    pass = pass && acc <= 0.10;
    detail << a << " acc=" << acc << "; ";
  }
  const double opt = r.metrics.at("table5/mean_l2/opt"), fgm = r.metrics.at("table5/mean_l2/fgm");
  detail << "opt L2=" << opt << " fgm L2=" << fgm << "; runtime=" << elapsed << "s";
  return {pass && opt < fgm && elapsed < 120.0, detail.str()};
}

Verdict noise_matching() {
  const ExperimentConfig cfg;
  ExperimentReport scratch;
  const Pipeline pipe = prepare_pipeline(cfg, scratch);
  std::vector<std::size_t> ids(pipe.train_ids.begin(), pipe.train_ids.begin() + 100);
  RowMatrix rows(100, pipe.pretest.dim());
  std::vector<int> labels;
  for (std::size_t r = 0; r < ids.size(); ++r) {
    rows.row(static_cast<Eigen::Index>(r)) = pipe.pretest.features.row(static_cast<Eigen::Index>(ids[r]));
    labels.push_back(pipe.pretest.labels[ids[r]]);
  }
  const Minibatch batch(ids, rows);

  std::size_t checked = 0, exact = 0, bounded = 0;
  double worst = 0.0;
  auto check = [&](const Counterparts& parts, bool clipping_active) {
    double mean = 0.0;
    for (const auto& o : parts.outcomes) mean += o.success ? o.l2_perturbation : 0.0;
    mean /= static_cast<double>(parts.successes());
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(parts.size()); ++j) {
      const AttackOutcome& o = parts.outcomes[static_cast<std::size_t>(j)];
      const double target = o.success ? o.l2_perturbation : mean;
      const double norm = (parts.noisy.row(j) - parts.normal.row(j)).norm();
      const bool clipped = clipping_active && ((parts.noisy.row(j).array() == cfg.clip_min).any() ||
                                               (parts.noisy.row(j).array() == cfg.clip_max).any());
      ++checked;
      if (clipped) {
        // Clipping onto the box only shortens the perturbation.
        if (norm <= target + 1e-9) ++bounded;
        continue;
      }
      worst = std::max(worst, std::abs(norm - target));
      if (std::abs(norm - target) <= 1e-9) ++exact;
    }
  };
  // With a box far outside the data, noise is never clipped.
  for (AttackKind kind : {AttackKind::fgm, AttackKind::bim_a, AttackKind::bim_b}) {
    AttackConfig attack = cfg.attack_config(kind);
    attack.clip_min = -1e3;
    attack.clip_max = 1e3;
    check(craft_counterparts(pipe.net, batch, labels, attack, 17, 1, NoiseStyle::gaussian_l2), false);
  }
  check(craft_counterparts(pipe.net, batch, labels, cfg.attack_config(AttackKind::opt), 17, 1, NoiseStyle::gaussian_l2),
        true);
  std::ostringstream detail;
  detail << checked << " examples: " << exact << " unclipped within 1e-9 (max deviation " << worst << "), " << bounded
         << " clipped within bound";
  return {exact + bounded == checked && checked > 0, detail.str()};
}

Verdict directional_fig2() {
  const ExperimentConfig cfg = config_from("attack.kinds = opt\nfeatures.kinds = kd, lid\n");
  const ExperimentReport fig2 = run_and_keep(Recipe::fig2, cfg);
  const ExperimentReport table1 = run_and_keep(Recipe::table1, cfg);
  const double adv = fig2.metrics.at("fig2/final_lid_mean/opt/adversarial");
  const double normal = fig2.metrics.at("fig2/final_lid_mean/opt/normal");
  const double layer_auc = fig2.metrics.at("fig2/final_layer_auc/opt");
  const double lid = table1.metrics.at("table1/auc/opt/lid"), kd = table1.metrics.at("table1/auc/opt/kd");
  std::ostringstream detail;
  detail << "final LID adversarial=" << adv << " normal=" << normal << "; final layer AUC=" << layer_auc
         << "; detector AUC lid=" << lid << " kd=" << kd;
  return {adv > normal && layer_auc >= 0.8 && lid >= kd, detail.str()};
}

Verdict shape_contract() {
  SyntheticSpec spec;
  spec.n = 1000;
  spec.seed = 3;
  spec.embed_seed = 4;
  spec.ambient_dim = 8;
  const Dataset data = gen_synthetic(spec);
  // Input, dense, relu, logits and softmax: five feature layers.
  const std::vector<LayerSpec> layers{LayerSpec::dense(8, 32), LayerSpec::relu(32), LayerSpec::dense(32, 2),
                                      LayerSpec::softmax(2)};
  const Network net = train_sgd(data, layers, {60, 0.05, 32, 0.9, 1});
  std::vector<std::size_t> ids;
  std::vector<int> labels;
  for (Eigen::Index i = 0; i < data.size() && ids.size() < 100; ++i)
    if (predict(net, data.features.row(i).transpose()) == data.labels[static_cast<std::size_t>(i)]) {
      ids.push_back(static_cast<std::size_t>(i));
      labels.push_back(data.labels[static_cast<std::size_t>(i)]);
    }
  RowMatrix rows(static_cast<Eigen::Index>(ids.size()), 8);
  for (std::size_t r = 0; r < ids.size(); ++r) rows.row(static_cast<Eigen::Index>(r)) = data.features.row(static_cast<Eigen::Index>(ids[r]));
  const Minibatch batch(ids, rows);
  AttackConfig attack;
  attack.kind = AttackKind::bim_a;
  FeatureParams params;
  params.k = 20;
  const ExtractionResult a = extract_features(net, batch, labels, attack, FeatureKind::lid, params, 99);
  const ExtractionResult b = extract_features(net, batch, labels, attack, FeatureKind::lid, params, 99);

  bool shapes = net.num_feature_layers() == 5 && batch.size() == 100;
  for (const RowMatrix* m : {&a.normal_block, &a.adversarial_block, &a.noisy_block})
    shapes = shapes && m->rows() == 100 && m->cols() == 5;
  bool labels_ok = true;
  for (Eigen::Index r = 0; r < a.features.rows(); ++r) {
    const Provenance p = a.features.provenance[static_cast<std::size_t>(r)];
    labels_ok = labels_ok && (a.features.positive(r) == (p == Provenance::adversarial));
  }
  labels_ok = labels_ok && a.features.count_positive() == 100 - a.dropped_ids.size() &&
              a.features.rows() == static_cast<Eigen::Index>(200 + a.features.count_positive());
  auto same_bits = [](const RowMatrix& x, const RowMatrix& y) {
    return x.rows() == y.rows() && x.cols() == y.cols() &&
           std::memcmp(x.data(), y.data(), sizeof(double) * static_cast<std::size_t>(x.size())) == 0;
  };
  const bool reproducible = same_bits(a.normal_block, b.normal_block) &&
                            same_bits(a.adversarial_block, b.adversarial_block) &&
                            same_bits(a.noisy_block, b.noisy_block) && same_bits(a.features.values, b.features.values);
  std::ostringstream detail;
  detail << "blocks " << a.normal_block.rows() << "x" << a.normal_block.cols() << ", rows=" << a.features.rows()
         << " positives=" << a.features.count_positive() << ", shapes=" << shapes << " labels=" << labels_ok
         << " bitwise=" << reproducible;
  return {shapes && labels_ok && reproducible, detail.str()};
}

Verdict adaptive_harness() {
  const ExperimentConfig cfg;
  const ExperimentReport r = run_and_keep(Recipe::table4, cfg);
  bool in_range = true;
  std::size_t inputs = 0;
  for (const FailureRow& row : r.failure_rates) {
    in_range = in_range && row.rate >= 0.0 && row.rate <= 1.0;
    inputs = row.inputs;
  }
  const double s1 = r.metrics.at("table4/scenario1"), s2 = r.metrics.at("table4/scenario2");
  const double pinned = r.metrics.at("table4/alpha_min/scenario2");
  const double plain = r.metrics.at("table4/plain_opt/scenario2");
  const double resolution = inputs ? 1.0 / static_cast<double>(inputs) : 0.0;
  std::ostringstream detail;
  detail << "scenario1=" << s1 << " scenario2=" << s2 << "; alpha_min scenario2=" << pinned
         << " plain Opt=" << plain << " (resolution " << resolution << ", " << inputs << " inputs)";
  return {in_range && inputs > 0 && std::abs(pinned - plain) <= resolution + 1e-12, detail.str()};
}

Verdict split_hygiene() {
  // The remaining recipes, so that every recipe is covered.
  const ExperimentConfig cfg = config_from("attack.kinds = fgm, opt\n");
  run_and_keep(Recipe::table2, cfg);
  run_and_keep(Recipe::fig3, cfg);
  run_and_keep(Recipe::fig4, cfg);
  std::size_t checks = 0, overlap = 0;
  std::vector<std::string> recipes;
  bool every_recipe_checked = true;
  for (const ExperimentReport& r : reports()) {
    recipes.push_back(r.recipe);
    every_recipe_checked = every_recipe_checked && !r.splits.empty();
    for (const SplitCheck& s : r.splits) {
      ++checks;
      overlap += s.overlap;
    }
  }
  std::sort(recipes.begin(), recipes.end());
  recipes.erase(std::unique(recipes.begin(), recipes.end()), recipes.end());
  std::ostringstream detail;
  detail << recipes.size() << " recipes, " << checks << " split checks, total overlap " << overlap;
  return {recipes.size() == 7 && every_recipe_checked && overlap == 0, detail.str()};
}

}  // namespace

// Exits 0 once every criterion has been evaluated; --strict also fails on any FAIL line.
int main(int argc, char** argv) {
  const bool strict = argc > 1 && std::string(argv[1]) == "--strict";
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"1 estimator recovery", estimator_recovery},
      {"2 scale invariance", scale_invariance},
      {"3 oracle equivalences", oracle_equivalences},
      {"4 gradient correctness", gradient_correctness},
      {"5 attack efficacy", attack_efficacy},
      {"6 noise matching", noise_matching},
      {"7 directional layer LID and detector AUC", directional_fig2},
      {"8 extraction shape contract", shape_contract},
      {"9 adaptive attack harness", adaptive_harness},
      {"10 split hygiene", split_hygiene},
  };
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    Verdict v;
    try {
      v = run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    if (!v.pass) ++failures;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << name << ": " << v.detail << std::endl;
  }
  std::cout << (10 - failures) << "/10 criteria passed" << std::endl;
  return strict && failures > 0 ? 1 : 0;
}
