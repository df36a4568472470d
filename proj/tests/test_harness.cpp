#include "doctest.h"

#include "lidet/characteristics.hpp"
#include "lidet/config.hpp"
#include "lidet/data.hpp"
#include "lidet/experiment.hpp"

#include <filesystem>
#include <string>

using namespace lidet;

namespace {

std::size_t parse_error_line(const std::string& text) {
  try {
    ConfigMap::parse(text);
  } catch (const ParseError& e) {
    return e.line();
  }
  return 0;
}

// Small enough for a unit test, large enough for k = 10 neighborhoods.
ExperimentConfig tiny_config() {
  return apply_config(ConfigMap::parse(R"(
dataset.train_n = 400
dataset.test_n = 200
dataset.ambient_d = 4
network.hidden = 16
train.epochs = 60
train.learning_rate = 0.05
attack.kinds = fgm
features.kinds = lid, kd
features.k = 10
features.bu_runs = 10
minibatch_size = 40
tune.k_grid = 5, 10, 20
seed = 3
)"));
}

}  // namespace

TEST_CASE("config grammar") {
  ConfigMap m = ConfigMap::parse("# header\n\nseed = 4   # trailing\nattack.kinds = fgm, opt\n");
  CHECK(m.get("seed") == std::optional<std::string>("4"));
  CHECK(m.entries().at("attack.kinds").line == 4);
  CHECK(split_list(*m.get("attack.kinds")) == std::vector<std::string>{"fgm", "opt"});
  CHECK_FALSE(m.get("missing").has_value());
  m.set("seed", "5");
  CHECK(m.get("seed") == std::optional<std::string>("5"));
}

TEST_CASE("config parse errors carry line numbers") {
  CHECK(parse_error_line("seed = 1\nno equals sign\n") == 2);
  CHECK(parse_error_line("\n\nbad key! = 3\n") == 3);
  CHECK(parse_error_line("seed =\n") == 1);
  CHECK(parse_error_line("seed = 1\n# c\nseed = 2\n") == 3);
}

TEST_CASE("unknown keys and bad values are validation errors") {
  CHECK_THROWS_WITH_AS(apply_config(ConfigMap::parse("seed = 1\nattack.nope = 2\n")), doctest::Contains("attack.nope"),
                       ValidationError);
  CHECK_THROWS_AS(apply_config(ConfigMap::parse("seed = -1\n")), ValidationError);
  CHECK_THROWS_AS(apply_config(ConfigMap::parse("attack.kinds = fgm, deepfool\n")), ValidationError);
  CHECK_THROWS_AS(apply_config(ConfigMap::parse("dataset.name = mnist\n")), ValidationError);
  ExperimentConfig c = tiny_config();
  c.minibatch_size = 5;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("describe output parses back to the same settings") {
  ExperimentConfig c = tiny_config();
  ConfigMap m;
  for (const auto& [k, v] : c.describe()) m.set(k, v);
  ExperimentConfig back = apply_config(m);
  CHECK(back.describe() == c.describe());
}

TEST_CASE("CSV parsing reports the failing line") {
  Dataset d = parse_csv("x0,x1,label\n0.1,0.2,0\n0.3,0.4,1\n");
  CHECK(d.size() == 2);
  CHECK(d.labels == std::vector<int>{0, 1});
  try {
    parse_csv("0.1,0.2,0\n0.3,0.4,1\n0.5,1\n");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  CHECK_THROWS_AS(parse_csv("0.1,0.2,0.5\n"), ParseError);
  CHECK_THROWS_AS(parse_csv("0.1,abc,1\n"), ParseError);
}

TEST_CASE("number formatting round trips exactly") {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5e17, 0.0}) CHECK(parse_double(format_double(v), 1) == v);
}

TEST_CASE("generators are seeded and bounded") {
  SyntheticSpec spec;
  spec.n = 300;
  spec.ambient_dim = 6;
  for (Generator g : {Generator::two_moons, Generator::gaussian_blobs, Generator::uniform_manifold}) {
    spec.generator = g;
    Dataset a = gen_synthetic(spec), b = gen_synthetic(spec);
    CHECK(a.features == b.features);
    CHECK(a.size() == 300);
    CHECK(a.dim() == 6);
    CHECK(a.features.minCoeff() >= 0.0);
    CHECK(a.features.maxCoeff() <= 1.0);
  }
}

TEST_CASE("two moons is learnable") {
  ExperimentConfig c;
  SyntheticSpec spec;
  spec.n = 1000;
  spec.seed = 8;
  spec.embed_seed = 9;
  spec.ambient_dim = 8;
  Dataset d = gen_synthetic(spec);
  SgdConfig sgd = c.train;
  sgd.seed = 1;
  Network net = train_sgd(d, c.layers(8, 2), sgd);
  CHECK(accuracy(net, d) > 0.95);
}

TEST_CASE("uniform manifold LID is close to its dimension") {
  SyntheticSpec spec;
  spec.generator = Generator::uniform_manifold;
  spec.n = 3000;
  spec.ambient_dim = 10;
  spec.manifold_dim = 2;
  spec.seed = 2;
  Dataset d = gen_synthetic(spec);
  double total = 0;
  for (Eigen::Index q = 0; q < 200; ++q)
    total += mle_lid(knn_profile(d.features.row(q).transpose(), d.features, 20, q)).value;
  CHECK(total / 200 == doctest::Approx(2.0).epsilon(0.15));
}

TEST_CASE("id partitions and disjointness checks") {
  std::vector<std::size_t> ids(10);
  for (std::size_t i = 0; i < 10; ++i) ids[i] = i;
  auto parts = partition_ids(ids, 4);
  REQUIRE(parts.size() == 2);
  CHECK(parts[0].size() == 5);
  CHECK(parts[1].size() == 5);
  CHECK(partition_ids(ids, 20).size() == 1);
  ExperimentReport r;
  assert_disjoint(r, "ok", {1, 2}, {3, 4});
  CHECK_THROWS_AS(assert_disjoint(r, "bad", {1, 2}, {2, 5}), Error);
  REQUIRE(r.splits.size() == 2);
  CHECK(r.splits[0].overlap == 0);
  CHECK(r.splits[1].overlap == 1);
}

TEST_CASE("recipes are deterministic with disjoint splits") {
  const ExperimentConfig c = tiny_config();
  ExperimentReport a = run_recipe(Recipe::table1, c);
  ExperimentReport b = run_recipe(Recipe::table1, c);
  CHECK(report_to_json(a) == report_to_json(b));
  CHECK_FALSE(a.splits.empty());
  for (const SplitCheck& s : a.splits) CHECK(s.overlap == 0);
  REQUIRE(a.auc_table.size() == 2);
  for (const AucRow& row : a.auc_table) {
    CHECK(row.auc >= 0.0);
    CHECK(row.auc <= 1.0);
  }
  check_finite(a);
}

TEST_CASE("reports round trip through JSON and disk") {
  ExperimentConfig c = tiny_config();
  c.output_dir = (std::filesystem::temp_directory_path() / "lidet_report_test").string();
  ExperimentReport r = run_recipe(Recipe::table5, c);
  CHECK(report_from_json(report_to_json(r)) == r);
  CHECK(load_report(c.output_dir) == r);
  for (const char* f : {"report.json", "auc_table.csv", "attacks.csv", "series.csv", "splits.csv"})
    CHECK(std::filesystem::exists(std::filesystem::path(c.output_dir) / f));
  std::filesystem::remove_all(c.output_dir);

  r.metrics["broken"] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(check_finite(r), NumericOverflowError);
}

TEST_CASE("recipe names") {
  for (Recipe r : {Recipe::table1, Recipe::table2, Recipe::table4, Recipe::table5, Recipe::fig2, Recipe::fig3,
                   Recipe::fig4})
    CHECK(recipe_from_string(to_string(r)) == r);
  CHECK_THROWS_AS(recipe_from_string("table3"), ValidationError);
}
