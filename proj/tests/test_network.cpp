#include "doctest.h"

#include "lidet/data.hpp"
#include "lidet/network.hpp"

#include <cmath>
#include <random>
#include <vector>

using namespace lidet;

namespace {

std::vector<LayerSpec> small_layers(Eigen::Index in, Eigen::Index hidden, Eigen::Index classes, double rate = 0.2) {
  return {LayerSpec::dense(in, hidden), LayerSpec::relu(hidden), LayerSpec::dropout(hidden, rate),
          LayerSpec::dense(hidden, classes), LayerSpec::softmax(classes)};
}

Vector random_input(Eigen::Index dim, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Vector x(dim);
  for (Eigen::Index i = 0; i < dim; ++i) x[i] = u(rng);
  return x;
}

// Reference forward pass in long double with plain loops.
std::vector<long double> oracle_probs(const Network& net, const Vector& x) {
  std::vector<long double> a(x.data(), x.data() + x.size());
  for (std::size_t i = 0; i < net.num_layers(); ++i) {
    const LayerSpec& l = net.layers()[i];
    if (l.kind == LayerKind::dense) {
      const DenseParams& p = net.params()[net.param_slot(i)];
      std::vector<long double> out(static_cast<std::size_t>(l.out_dim));
      for (Eigen::Index r = 0; r < l.out_dim; ++r) {
        long double s = p.bias[r];
        for (Eigen::Index c = 0; c < l.in_dim; ++c) s += static_cast<long double>(p.weight(r, c)) * a[c];
        out[r] = s;
      }
      a = out;
    } else if (l.kind == LayerKind::relu) {
      for (auto& v : a) v = v > 0 ? v : 0;
    } else if (l.kind == LayerKind::dropout) {
      for (auto& v : a) v *= 1.0L - l.dropout_rate;
    } else {
      long double m = a[0];
      for (auto v : a) m = v > m ? v : m;
      long double z = 0;
      for (auto& v : a) z += (v = std::exp(v - m));
      for (auto& v : a) v /= z;
    }
  }
  return a;
}

}  // namespace

TEST_CASE("forward pass matches a long double reference") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Network net = Network::initialize(small_layers(5, 7, 3), 100 + trial);
    Vector x = random_input(5, rng);
    ActivationStack s = forward_capture(net, x);
    auto ref = oracle_probs(net, x);
    REQUIRE(s.per_layer.size() == net.num_feature_layers());
    for (Eigen::Index c = 0; c < 3; ++c) CHECK(s.probs[c] == doctest::Approx(static_cast<double>(ref[c])).epsilon(1e-12));
    CHECK(s.probs.sum() == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(s.logits().size() == 3);
  }
}

TEST_CASE("softmax is stable for large logits") {
  Vector z(3);
  z << 1000.0, 1000.0, -1000.0;
  Vector p = softmax(z);
  CHECK(p[0] == doctest::Approx(0.5));
  CHECK(p[1] == doctest::Approx(0.5));
  CHECK(p[2] == 0.0);
}

TEST_CASE("input gradient matches central differences") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    Network net = Network::initialize(small_layers(4, 6, 3), 500 + trial);
    Vector x = random_input(4, rng);
    for (const Objective& obj : {Objective::cross_entropy(trial % 3), Objective::logit_margin(trial % 3)}) {
      Vector g = input_gradient(net, x, obj);
      const double h = 1e-6;
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        Vector xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        const double fd = (value_and_input_gradient(net, xp, obj).value - value_and_input_gradient(net, xm, obj).value) /
                          (2 * h);
        CHECK(g[i] == doctest::Approx(fd).epsilon(1e-5).scale(1e-3));
      }
    }
  }
}

TEST_CASE("custom objective gradient at a hidden layer") {
  Network net = Network::initialize(small_layers(3, 5, 2), 3);
  Vector x(3);
  x << 0.3, -0.2, 0.8;
  // Half squared norm of the first dense output.
  Objective obj = Objective::custom(1, [](const ActivationStack& s, Vector& g) {
    g = s.per_layer[1];
    return 0.5 * s.per_layer[1].squaredNorm();
  });
  Vector g = input_gradient(net, x, obj);
  const Matrix& w = net.params()[0].weight;
  Vector expected = w.transpose() * (w * x + net.params()[0].bias);
  for (Eigen::Index i = 0; i < 3; ++i) CHECK(g[i] == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("logit jacobian rows are logit gradients") {
  Network net = Network::initialize(small_layers(4, 8, 3), 21);
  std::mt19937_64 rng(2);
  Vector x = random_input(4, rng);
  Matrix j = logit_jacobian(net, x);
  REQUIRE(j.rows() == 3);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < 4; ++i) {
    Vector xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    Vector d = (forward_capture(net, xp).logits() - forward_capture(net, xm).logits()) / (2 * h);
    for (Eigen::Index c = 0; c < 3; ++c) CHECK(j(c, i) == doctest::Approx(d[c]).epsilon(1e-6).scale(1e-3));
  }
}

TEST_CASE("stochastic dropout is reproducible and differs from deterministic") {
  Network net = Network::initialize(small_layers(3, 16, 2, 0.5), 9);
  Vector x(3);
  x << 0.2, 0.4, 0.6;
  ActivationStack a = forward_capture(net, x, ForwardMode::stochastic(42));
  ActivationStack b = forward_capture(net, x, ForwardMode::stochastic(42));
  ActivationStack d = forward_capture(net, x);
  CHECK(a.probs == b.probs);
  CHECK(a.per_layer[3] != d.per_layer[3]);
  for (Eigen::Index i = 0; i < 16; ++i) {
    const double v = a.per_layer[3][i];
    CHECK((v == 0.0 || v == a.per_layer[2][i]));
  }
}

TEST_CASE("training reaches high accuracy on two moons") {
  SyntheticSpec spec;
  spec.n = 1000;
  spec.seed = 1;
  spec.noise = 0.1;
  Dataset data = gen_synthetic(spec);
  std::vector<double> losses;
  const std::vector<LayerSpec> layers{LayerSpec::dense(2, 64), LayerSpec::relu(64), LayerSpec::dense(64, 64),
                                      LayerSpec::relu(64),     LayerSpec::dense(64, 2), LayerSpec::softmax(2)};
  Network net = train_sgd(data, layers, {150, 0.02, 32, 0.9, 3}, &losses);
  CHECK(losses.size() == 151);
  CHECK(losses.back() < losses.front());
  CHECK(accuracy(net, data) > 0.95);
  Network again = train_sgd(data, layers, {150, 0.02, 32, 0.9, 3});
  CHECK(again.params()[0].weight == net.params()[0].weight);
}

TEST_CASE("network JSON round trip is exact") {
  Network net = Network::initialize(small_layers(4, 5, 3, 0.25), 77);
  Network back = network_from_json(network_to_json(net));
  CHECK(back.layers() == net.layers());
  CHECK(back.seed() == net.seed());
  for (std::size_t i = 0; i < net.params().size(); ++i) {
    CHECK(back.params()[i].weight == net.params()[i].weight);
    CHECK(back.params()[i].bias == net.params()[i].bias);
  }
}

TEST_CASE("glorot initialization bounds") {
  Network net = Network::initialize(small_layers(10, 30, 4), 1);
  const double bound = std::sqrt(6.0 / 40.0);
  CHECK(net.params()[0].weight.cwiseAbs().maxCoeff() <= bound);
  CHECK(net.params()[0].bias.isZero());
}

TEST_CASE("invalid networks and inputs are rejected") {
  CHECK_THROWS_AS(validate_layers(std::vector<LayerSpec>{}), ValidationError);
  CHECK_THROWS_AS(validate_layers(std::vector<LayerSpec>{LayerSpec::dense(2, 3), LayerSpec::softmax(2)}),
                  ValidationError);
  CHECK_THROWS_AS(validate_layers(std::vector<LayerSpec>{LayerSpec::dense(2, 3)}), ValidationError);
  CHECK_THROWS_AS(validate_layers(small_layers(2, 3, 2, 1.0)), ValidationError);
  Network net = Network::initialize(small_layers(2, 3, 2), 0);
  CHECK_THROWS_AS(forward_capture(net, Vector::Zero(3)), InputShapeError);
  CHECK_THROWS_AS(input_gradient(net, Vector::Zero(2), Objective::cross_entropy(5)), RangeError);
  CHECK_THROWS_AS(network_from_json("{\"layers\": 3}"), ValidationError);
  CHECK_THROWS_AS(layer_kind_from_string("conv"), ValidationError);
  Vector bad(2);
  bad << std::nan(""), 0.0;
  CHECK_THROWS_AS(input_gradient(net, bad, Objective::cross_entropy(0)), NumericOverflowError);
}

TEST_CASE("divergent training is reported") {
  SyntheticSpec spec;
  spec.n = 100;
  Dataset data = gen_synthetic(spec);
  CHECK_THROWS_AS(train_sgd(data, small_layers(2, 8, 2), {5, 1e300, 10, 0.9, 0}), TrainingDivergedError);
}
