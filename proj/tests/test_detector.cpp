#include "doctest.h"

#include "lidet/data.hpp"
#include "lidet/detector.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

using namespace lidet;

namespace {

struct Fixture {
  Network net;
  Minibatch batch;
  std::vector<int> labels;
};

// Five feature layers: input, dense, relu, logits, softmax.
const Fixture& fixture() {
  static const Fixture f = [] {
    SyntheticSpec spec;
    spec.n = 600;
    spec.seed = 4;
    spec.embed_seed = 5;
    spec.ambient_dim = 4;
    Dataset data = gen_synthetic(spec);
    std::vector<LayerSpec> layers{LayerSpec::dense(4, 24), LayerSpec::relu(24), LayerSpec::dense(24, 2),
                                  LayerSpec::softmax(2)};
    Network net = train_sgd(data, layers, {80, 0.05, 32, 0.9, 2});
    std::vector<std::size_t> ids;
    std::vector<int> labels;
    for (Eigen::Index i = 0; i < data.size() && ids.size() < 100; ++i)
      if (predict(net, data.features.row(i).transpose()) == data.labels[i]) {
        ids.push_back(static_cast<std::size_t>(i));
        labels.push_back(data.labels[i]);
      }
    RowMatrix rows(static_cast<Eigen::Index>(ids.size()), 4);
    for (std::size_t r = 0; r < ids.size(); ++r) rows.row(static_cast<Eigen::Index>(r)) = data.features.row(static_cast<Eigen::Index>(ids[r]));
    return Fixture{net, Minibatch(ids, rows), labels};
  }();
  return f;
}

AttackConfig fgm_config() {
  AttackConfig c;
  c.kind = AttackKind::fgm;
  c.epsilon = 0.3;
  return c;
}

FeatureMatrix labeled(const RowMatrix& values, const std::vector<bool>& positive) {
  FeatureMatrix m;
  m.values = values;
  for (std::size_t r = 0; r < positive.size(); ++r) {
    m.provenance.push_back(positive[r] ? Provenance::adversarial : (r % 2 ? Provenance::noisy : Provenance::normal));
    m.source_ids.push_back(r);
  }
  return m;
}

double pair_count(const std::vector<double>& pos, const std::vector<double>& neg) {
  double s = 0;
  for (double p : pos)
    for (double n : neg) s += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  return s / static_cast<double>(pos.size() * neg.size());
}

std::vector<double> column(const FeatureMatrix& m, Eigen::Index c, bool positive) {
  std::vector<double> out;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    if (m.positive(r) == positive) out.push_back(m.values(r, c));
  return out;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("lidet_test_" + name)).string();
}

}  // namespace

TEST_CASE("AUC worked example") {
  std::vector<double> pos{0.9, 0.4}, neg{0.5, 0.1};
  CHECK(auc(pos, neg) == 0.75);
  std::vector<double> tie{0.5};
  CHECK(auc(tie, tie) == 0.5);
}

TEST_CASE("AUC equals pair counting") {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> coarse(0, 9);
  std::normal_distribution<double> fine;
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t np = 1 + rng() % 250, nn = 1 + rng() % 250;
    std::vector<double> pos(np), neg(nn);
    for (double& v : pos) v = trial % 2 ? coarse(rng) : fine(rng) + 0.3;
    for (double& v : neg) v = trial % 2 ? coarse(rng) : fine(rng);
    CHECK(auc(pos, neg) == pair_count(pos, neg));
  }
}

TEST_CASE("AUC is invariant under increasing transforms") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  std::vector<double> pos(60), neg(80);
  for (double& v : pos) v = g(rng) + 0.5;
  for (double& v : neg) v = g(rng);
  const double base = auc(pos, neg);
  auto map = [](std::vector<double> v) {
    for (double& x : v) x = std::exp(3.0 * x) + 7.0;
    return v;
  };
  CHECK(auc(map(pos), map(neg)) == base);
}

TEST_CASE("AUC input errors") {
  std::vector<double> empty, one{1.0}, bad{std::nan("")};
  CHECK_THROWS_AS(auc(empty, one), EmptyClassError);
  CHECK_THROWS_AS(auc(bad, one), ValidationError);
}

TEST_CASE("separable features give AUC 1") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  RowMatrix v(200, 3);
  std::vector<bool> pos(200);
  for (Eigen::Index r = 0; r < 200; ++r) {
    pos[r] = r >= 100;
    for (Eigen::Index c = 0; c < 3; ++c) v(r, c) = g(rng) * 0.1 + (pos[r] ? 2.0 : 0.0);
  }
  FeatureMatrix m = labeled(v, pos);
  DetectorModel model = train_detector(m, {});
  CHECK(evaluate_auc(model, m) == 1.0);
  CHECK(cross_validated_auc(m, 3, {}, 1) == 1.0);
  Vector p = score(model, v);
  CHECK(p.minCoeff() > 0.0);
  CHECK(p.maxCoeff() < 1.0);
}

TEST_CASE("shuffled labels give chance AUC on held out rows") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g;
  RowMatrix train(400, 4), test(400, 4);
  for (Eigen::Index r = 0; r < 400; ++r)
    for (Eigen::Index c = 0; c < 4; ++c) {
      train(r, c) = g(rng);
      test(r, c) = g(rng);
    }
  std::vector<bool> a(400), b(400);
  for (std::size_t r = 0; r < 400; ++r) {
    a[r] = rng() % 2;
    b[r] = rng() % 2;
  }
  DetectorModel model = train_detector(labeled(train, a), {});
  CHECK(evaluate_auc(model, labeled(test, b)) == doctest::Approx(0.5).epsilon(0.2));
}

TEST_CASE("scaler is frozen at training time") {
  RowMatrix v(6, 2);
  v << 0, 10, 1, 10, 2, 10, 3, 10, 4, 10, 5, 10;
  DetectorModel model = train_detector(labeled(v, {false, false, false, true, true, true}), {});
  // The constant column is dropped.
  CHECK(model.dropped_columns == std::vector<Eigen::Index>{1});
  CHECK(model.kept_columns == std::vector<Eigen::Index>{0});
  CHECK(model.mean[0] == 2.5);
  CHECK(model.stddev[0] == doctest::Approx(std::sqrt(17.5 / 6.0)));
  RowMatrix shifted = v;
  shifted.col(0).array() += 100.0;
  Vector d = decision_function(model, shifted);
  for (Eigen::Index r = 0; r < 6; ++r)
    CHECK(d[r] == doctest::Approx(model.bias + model.weights[0] * (shifted(r, 0) - 2.5) / model.stddev[0]));
  CHECK_THROWS_AS(decision_function(model, RowMatrix::Zero(2, 3)), InputShapeError);
}

TEST_CASE("detector training errors") {
  RowMatrix v(4, 1);
  v << 0, 1, 2, 3;
  CHECK_THROWS_AS(train_detector(labeled(v, {false, false, false, false}), {}), EmptyClassError);
  RowMatrix flat = RowMatrix::Constant(4, 1, 2.0);
  CHECK_THROWS_AS(train_detector(labeled(flat, {false, false, true, true}), {}), ValidationError);
  v(0, 0) = std::nan("");
  CHECK_THROWS_AS(train_detector(labeled(v, {false, false, true, true}), {}), ValidationError);
}

TEST_CASE("layerwise AUC on random features is near chance") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  RowMatrix v(300, 5);
  std::vector<bool> pos(300);
  for (Eigen::Index r = 0; r < 300; ++r) {
    pos[r] = rng() % 3 == 0;
    for (Eigen::Index c = 0; c < 5; ++c) v(r, c) = g(rng);
  }
  FeatureMatrix m = labeled(v, pos);
  auto per_layer = layerwise_auc(m);
  REQUIRE(per_layer.size() == 5);
  for (const auto& [layer, value] : per_layer) {
    CHECK(value == doctest::Approx(0.5).epsilon(0.3));
    CHECK(value == pair_count(column(m, static_cast<Eigen::Index>(layer), true), column(m, static_cast<Eigen::Index>(layer), false)));
  }
}

TEST_CASE("cross validation keeps source ids together") {
  RowMatrix v(6, 1);
  v << 0, 1, 5, 6, 0.5, 5.5;
  FeatureMatrix m = labeled(v, {false, false, true, true, false, true});
  // Source 0 holds only negatives, so its fold lacks a class.
  m.source_ids = {0, 0, 1, 1, 0, 1};
  CHECK_THROWS_AS(cross_validated_auc(m, 2, {}, 0), ValidationError);
  CHECK_THROWS_AS(cross_validated_auc(m, 1, {}, 0), ValidationError);
}

TEST_CASE("grid selection breaks ties toward the smaller value") {
  CHECK(select_best({10, 20, 30}, {0.8, 0.9, 0.9}) == 1);
  CHECK(select_best({30, 20, 10}, {0.9, 0.9, 0.9}) == 2);
  CHECK(select_best({1}, {0.1}) == 0);
  CHECK_THROWS_AS(select_best({1, 2}, {0.1}), ValidationError);
}

TEST_CASE("extraction shape contract") {
  const Fixture& f = fixture();
  REQUIRE(f.batch.size() == 100);
  REQUIRE(f.net.num_feature_layers() == 5);
  FeatureParams params;
  params.k = 10;
  ExtractionResult a = extract_features(f.net, f.batch, f.labels, fgm_config(), FeatureKind::lid, params, 31);
  ExtractionResult b = extract_features(f.net, f.batch, f.labels, fgm_config(), FeatureKind::lid, params, 31);
  CHECK(a.normal_block.rows() == 100);
  CHECK(a.normal_block.cols() == 5);
  CHECK(a.adversarial_block.rows() == 100);
  CHECK(a.adversarial_block.cols() == 5);
  CHECK(a.noisy_block.rows() == 100);
  CHECK(a.noisy_block.cols() == 5);
  const std::size_t kept = 100 - a.dropped_ids.size();
  CHECK(a.features.rows() == static_cast<Eigen::Index>(200 + kept));
  CHECK(a.features.count_positive() == kept);
  for (Eigen::Index r = 0; r < a.features.rows(); ++r) {
    const Provenance p = a.features.provenance[static_cast<std::size_t>(r)];
    CHECK(a.features.positive(r) == (p == Provenance::adversarial));
    CHECK((r < 100 ? p == Provenance::normal : r < 200 ? p == Provenance::noisy : p == Provenance::adversarial));
  }
  CHECK(std::memcmp(a.features.values.data(), b.features.values.data(),
                    sizeof(double) * static_cast<std::size_t>(a.features.values.size())) == 0);
  CHECK(a.dropped_ids == b.dropped_ids);
}

TEST_CASE("feature values match direct estimator calls") {
  const Fixture& f = fixture();
  Counterparts parts = craft_counterparts(f.net, f.batch, f.labels, fgm_config(), 8);
  FeatureParams params;
  params.k = 12;
  params.sigma = 0.5;
  ExtractionResult lid = compute_features(f.net, parts, FeatureKind::lid, params);
  ExtractionResult kd = compute_features(f.net, parts, FeatureKind::kd, params);

  std::vector<RowMatrix> acts(5, RowMatrix(100, 1));
  for (Eigen::Index j = 0; j < 100; ++j) {
    ActivationStack s = forward_capture(f.net, parts.normal.row(j).transpose());
    for (std::size_t l = 0; l < 5; ++l) {
      acts[l].conservativeResize(100, s.per_layer[l].size());
      acts[l].row(j) = s.per_layer[l].transpose();
    }
  }
  for (Eigen::Index j : {0, 17, 99}) {
    ActivationStack noisy = forward_capture(f.net, parts.noisy.row(j).transpose());
    for (std::size_t l = 0; l < 5; ++l) {
      const auto li = static_cast<Eigen::Index>(l);
      const double expect = mle_lid(knn_profile_distinct(acts[l].row(j).transpose(), acts[l], 12, j)).value;
      CHECK(lid.normal_block(j, li) == expect);
      const double expect_noisy = mle_lid(knn_profile_distinct(noisy.per_layer[l], acts[l], 12, std::nullopt)).value;
      CHECK(lid.noisy_block(j, li) == expect_noisy);

      std::vector<Eigen::Index> same;
      for (Eigen::Index m = 0; m < 100; ++m)
        if (m != j && f.labels[static_cast<std::size_t>(m)] == f.labels[static_cast<std::size_t>(j)]) same.push_back(m);
      RowMatrix refs(static_cast<Eigen::Index>(same.size()), acts[l].cols());
      for (std::size_t r = 0; r < same.size(); ++r) refs.row(static_cast<Eigen::Index>(r)) = acts[l].row(same[r]);
      CHECK(kd.normal_block(j, li) == doctest::Approx(kernel_density(acts[l].row(j).transpose(), refs, {0.5})).epsilon(1e-14));
    }
  }

  std::vector<std::size_t> ks{6, 12};
  auto multi = compute_lid_for_ks(f.net, parts, ks);
  REQUIRE(multi.size() == 2);
  CHECK(multi[1].values == lid.features.values);
  CHECK(feature_columns(FeatureKind::kd_bu, 5) == 6);
  CHECK(feature_columns(FeatureKind::combined, 5) == 11);
  CHECK(feature_columns(FeatureKind::bu, 5) == 1);
}

TEST_CASE("noisy counterparts match the adversarial norm") {
  const Fixture& f = fixture();
  Counterparts parts = craft_counterparts(f.net, f.batch, f.labels, fgm_config(), 3);
  CHECK(parts.successes() > 0);
  double mean = 0;
  for (const auto& o : parts.outcomes) mean += o.success ? o.l2_perturbation : 0.0;
  mean /= static_cast<double>(parts.successes());
  for (Eigen::Index j = 0; j < 100; ++j) {
    const AttackOutcome& o = parts.outcomes[static_cast<std::size_t>(j)];
    const double norm = (parts.noisy.row(j) - parts.normal.row(j)).norm();
    // Clipping can only shorten the step.
    CHECK(norm <= (o.success ? o.l2_perturbation : mean) + 1e-12);
  }
}

TEST_CASE("failure rates count attack failures and detections") {
  const Fixture& f = fixture();
  Counterparts parts = craft_counterparts(f.net, f.batch, f.labels, fgm_config(), 3);
  DetectorModel always, never;
  always.input_columns = 5;
  always.bias = 1.0;
  never.input_columns = 5;
  never.bias = -1.0;
  DetectorModel always1 = always, never1 = never;
  always1.input_columns = never1.input_columns = 1;
  const std::size_t failed = parts.size() - parts.successes();
  FailureRates r = detection_failure_rates(f.net, never, always1, parts.outcomes, f.batch, 10);
  CHECK(r.inputs == 100);
  CHECK(r.attack_failures == failed);
  CHECK(r.scenario1 == static_cast<double>(failed) / 100.0);
  CHECK(r.scenario2 == 1.0);
  CHECK(r.detected_scenario2 == parts.successes());
  CHECK(r.detected_scenario1 == 0);
}

TEST_CASE("feature and detector files round trip") {
  const Fixture& f = fixture();
  ExtractionResult x = extract_features(f.net, f.batch, f.labels, fgm_config(), FeatureKind::lid, {}, 5);
  const std::string csv = temp_path("features.csv");
  save_features_csv(x.features, csv);
  FeatureMatrix back = load_features_csv(csv, FeatureKind::lid);
  CHECK(back.values == x.features.values);
  CHECK(back.provenance == x.features.provenance);

  DetectorModel model = train_detector(x.features, {}, "fgm");
  DetectorModel again = detector_from_json(detector_to_json(model));
  CHECK(again.weights == model.weights);
  CHECK(again.bias == model.bias);
  CHECK(again.mean == model.mean);
  CHECK(again.stddev == model.stddev);
  CHECK(again.kept_columns == model.kept_columns);
  CHECK(again.training_attack == "fgm");
  CHECK(transfer_evaluate(again, back) == evaluate_auc(model, x.features));
  back.kind = FeatureKind::kd;
  CHECK_THROWS_AS(transfer_evaluate(again, back), ValidationError);

  std::ofstream(csv) << "feature_0,label,provenance\n0.5,0,normal\n0.7,0,adversarial\n";
  try {
    load_features_csv(csv, FeatureKind::lid);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  std::remove(csv.c_str());
}
