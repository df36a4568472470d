#include "lidet/network.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace lidet {

namespace {

using json = nlohmann::json;

struct Trace {
  ActivationStack stack;
  // Keep-masks for dropout layers in stochastic mode, indexed by layer.
  std::vector<Vector> masks;
  bool stochastic = false;
};

struct ParamGrads {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;

  explicit ParamGrads(const std::vector<DenseParams>& params) {
    for (const auto& p : params) {
      weight.push_back(Matrix::Zero(p.weight.rows(), p.weight.cols()));
      bias.push_back(Vector::Zero(p.bias.size()));
    }
  }
  void set_zero() {
    for (auto& w : weight) w.setZero();
    for (auto& b : bias) b.setZero();
  }
};

Eigen::Index argmax(const Vector& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

double log_sum_exp(const Vector& z) {
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum());
}

Trace run_forward(const Network& net, const Eigen::Ref<const Vector>& x, ForwardMode mode) {
  if (x.size() != net.input_dim())
    throw InputShapeError("input has dimension " + std::to_string(x.size()) + ", network expects " +
                          std::to_string(net.input_dim()));
  Trace t;
  t.stochastic = mode.is_stochastic();
  t.masks.resize(net.num_layers());
  std::mt19937_64 rng(mode.seed.value_or(0));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  auto& acts = t.stack.per_layer;
  acts.reserve(net.num_feature_layers());
  acts.emplace_back(x);
  for (std::size_t i = 0; i < net.num_layers(); ++i) {
    const LayerSpec& layer = net.layers()[i];
    const Vector& in = acts.back();
    Vector out;
    switch (layer.kind) {
      case LayerKind::dense: {
        const DenseParams& p = net.params()[net.param_slot(i)];
        out = p.weight * in + p.bias;
        break;
      }
      case LayerKind::relu:
        out = in.cwiseMax(0.0);
        break;
      case LayerKind::dropout:
        if (t.stochastic) {
          Vector mask(in.size());
          const double keep = 1.0 - layer.dropout_rate;
          for (Eigen::Index j = 0; j < mask.size(); ++j) mask[j] = unit(rng) < keep ? 1.0 : 0.0;
          out = in.cwiseProduct(mask);
          t.masks[i] = std::move(mask);
        } else {
          out = in * (1.0 - layer.dropout_rate);
        }
        break;
      case LayerKind::softmax:
        out = softmax(in);
        break;
    }
    acts.push_back(std::move(out));
  }
  t.stack.probs = acts.back();
  t.stack.predicted_class = argmax(t.stack.probs);
  return t;
}

// Propagates `grad` (w.r.t. per_layer[start]) back to the input.
Vector run_backward(const Network& net, const Trace& t, std::size_t start, Vector grad,
                    ParamGrads* pg) {
  const auto& acts = t.stack.per_layer;
  for (std::size_t i = start; i-- > 0;) {
    const LayerSpec& layer = net.layers()[i];
    switch (layer.kind) {
      case LayerKind::dense: {
        const int slot = net.param_slot(i);
        const DenseParams& p = net.params()[slot];
        if (pg) {
          pg->weight[slot].noalias() += grad * acts[i].transpose();
          pg->bias[slot] += grad;
        }
        grad = p.weight.transpose() * grad;
        break;
      }
      case LayerKind::relu:
        grad = (acts[i].array() > 0.0).select(grad, 0.0);
        break;
      case LayerKind::dropout:
        if (t.stochastic)
          grad = grad.cwiseProduct(t.masks[i]);
        else
          grad *= (1.0 - layer.dropout_rate);
        break;
      case LayerKind::softmax: {
        const Vector& p = acts[i + 1];
        grad = p.cwiseProduct((grad.array() - p.dot(grad)).matrix());
        break;
      }
    }
  }
  return grad;
}

void check_label(const Network& net, Eigen::Index label) {
  if (label < 0 || label >= net.num_classes())
    throw RangeError("label " + std::to_string(label) + " outside [0, " +
                     std::to_string(net.num_classes()) + ")");
}

// Value and gradient w.r.t. per_layer[start]; returns start.
std::size_t objective_seed(const Network& net, const Trace& t, const Objective& obj, double& value,
                           Vector& grad) {
  const std::size_t logit_index = net.pre_softmax_index();
  const Vector& z = t.stack.per_layer[logit_index];
  switch (obj.kind) {
    case Objective::Kind::cross_entropy: {
      check_label(net, obj.label);
      value = log_sum_exp(z) - z[obj.label];
      grad = softmax(z);
      grad[obj.label] -= 1.0;
      return logit_index;
    }
    case Objective::Kind::logit_margin: {
      check_label(net, obj.label);
      if (net.num_classes() < 2) throw ValidationError("logit margin needs at least two classes");
      Eigen::Index other = obj.label == 0 ? 1 : 0;
      for (Eigen::Index j = 0; j < z.size(); ++j)
        if (j != obj.label && z[j] > z[other]) other = j;
      value = z[obj.label] - z[other];
      grad = Vector::Zero(z.size());
      grad[obj.label] = 1.0;
      grad[other] = -1.0;
      return logit_index;
    }
    case Objective::Kind::custom_scalar: {
      if (obj.layer >= t.stack.per_layer.size())
        throw RangeError("custom objective layer index out of range");
      grad = Vector::Zero(t.stack.per_layer[obj.layer].size());
      value = obj.fn(t.stack, grad);
      if (grad.size() != t.stack.per_layer[obj.layer].size())
        throw InputShapeError("custom objective gradient has wrong dimension");
      return obj.layer;
    }
  }
  return logit_index;
}

bool all_finite(const Trace& t) {
  return std::all_of(t.stack.per_layer.begin(), t.stack.per_layer.end(),
                     [](const Vector& v) { return v.allFinite(); });
}

}  // namespace

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::dropout: return "dropout";
    case LayerKind::softmax: return "softmax";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& name) {
  if (name == "dense") return LayerKind::dense;
  if (name == "relu") return LayerKind::relu;
  if (name == "dropout") return LayerKind::dropout;
  if (name == "softmax") return LayerKind::softmax;
  throw ValidationError("unknown layer kind '" + name + "'");
}

void validate_layers(std::span<const LayerSpec> layers) {
  if (layers.empty()) throw ValidationError("network has no layers");
  std::size_t softmax_count = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if (l.in_dim <= 0 || l.out_dim <= 0)
      throw ValidationError("layer " + std::to_string(i) + " has a non-positive dimension");
    if (l.kind != LayerKind::dense && l.in_dim != l.out_dim)
      throw ValidationError("layer " + std::to_string(i) + " must preserve its dimension");
    if (l.kind == LayerKind::dropout && !(l.dropout_rate >= 0.0 && l.dropout_rate < 1.0))
      throw ValidationError("dropout rate must lie in [0, 1)");
    if (i > 0 && layers[i - 1].out_dim != l.in_dim)
      throw ValidationError("layer " + std::to_string(i) + " input dimension does not match its predecessor");
    if (l.kind == LayerKind::softmax) ++softmax_count;
  }
  if (softmax_count != 1 || layers.back().kind != LayerKind::softmax)
    throw ValidationError("network needs exactly one softmax, as its last layer");
}

Network::Network(std::vector<LayerSpec> layers, std::vector<DenseParams> params, Seed seed)
    : layers_(std::move(layers)), params_(std::move(params)), seed_(seed) {
  validate_layers(layers_);
  std::size_t slot = 0;
  for (const LayerSpec& l : layers_) {
    if (l.kind != LayerKind::dense) {
      param_slot_.push_back(-1);
      continue;
    }
    if (slot >= params_.size()) throw ValidationError("missing parameters for a dense layer");
    const DenseParams& p = params_[slot];
    if (p.weight.rows() != l.out_dim || p.weight.cols() != l.in_dim || p.bias.size() != l.out_dim)
      throw ValidationError("dense parameter shape does not match its layer spec");
    param_slot_.push_back(static_cast<int>(slot++));
  }
  if (slot != params_.size()) throw ValidationError("more parameter blocks than dense layers");
}

Network Network::initialize(std::vector<LayerSpec> layers, Seed seed) {
  validate_layers(layers);
  std::mt19937_64 rng(seed);
  std::vector<DenseParams> params;
  for (const LayerSpec& l : layers) {
    if (l.kind != LayerKind::dense) continue;
    const double limit = std::sqrt(6.0 / static_cast<double>(l.in_dim + l.out_dim));
    std::uniform_real_distribution<double> dist(-limit, limit);
    DenseParams p{Matrix(l.out_dim, l.in_dim), Vector::Zero(l.out_dim)};
    for (Eigen::Index r = 0; r < p.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < p.weight.cols(); ++c) p.weight(r, c) = dist(rng);
    params.push_back(std::move(p));
  }
  return Network(std::move(layers), std::move(params), seed);
}

bool Network::has_dropout() const {
  return std::any_of(layers_.begin(), layers_.end(), [](const LayerSpec& l) {
    return l.kind == LayerKind::dropout && l.dropout_rate > 0.0;
  });
}

Vector softmax(const Eigen::Ref<const Vector>& logits) {
  Vector e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

ActivationStack forward_capture(const Network& net, const Eigen::Ref<const Vector>& x,
                                ForwardMode mode) {
  return run_forward(net, x, mode).stack;
}

Eigen::Index predict(const Network& net, const Eigen::Ref<const Vector>& x) {
  return run_forward(net, x, ForwardMode::deterministic()).stack.predicted_class;
}

ValueAndGradient value_and_input_gradient(const Network& net, const Eigen::Ref<const Vector>& x,
                                          const Objective& objective) {
  Trace t = run_forward(net, x, ForwardMode::deterministic());
  if (!all_finite(t)) throw NumericOverflowError("non-finite activation in forward pass");
  ValueAndGradient out;
  Vector seed_grad;
  const std::size_t start = objective_seed(net, t, objective, out.value, seed_grad);
  out.gradient = run_backward(net, t, start, std::move(seed_grad), nullptr);
  if (!std::isfinite(out.value) || !out.gradient.allFinite())
    throw NumericOverflowError("non-finite objective or gradient");
  out.activations = std::move(t.stack);
  return out;
}

Vector input_gradient(const Network& net, const Eigen::Ref<const Vector>& x,
                      const Objective& objective) {
  return value_and_input_gradient(net, x, objective).gradient;
}

Matrix logit_jacobian(const Network& net, const Eigen::Ref<const Vector>& x) {
  Trace t = run_forward(net, x, ForwardMode::deterministic());
  if (!all_finite(t)) throw NumericOverflowError("non-finite activation in forward pass");
  const auto classes = net.num_classes();
  Matrix jac(classes, net.input_dim());
  for (Eigen::Index c = 0; c < classes; ++c) {
    Vector unit = Vector::Unit(classes, c);
    jac.row(c) = run_backward(net, t, net.pre_softmax_index(), unit, nullptr).transpose();
  }
  return jac;
}

double dataset_loss(const Network& net, const Dataset& data) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    const Vector x = data.features.row(i).transpose();
    const Trace t = run_forward(net, x, ForwardMode::deterministic());
    const Vector& z = t.stack.per_layer[net.pre_softmax_index()];
    total += log_sum_exp(z) - z[data.labels[i]];
  }
  return total / static_cast<double>(data.size());
}

double accuracy(const Network& net, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  Eigen::Index correct = 0;
  for (Eigen::Index i = 0; i < data.size(); ++i)
    if (predict(net, data.features.row(i).transpose()) == data.labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

Network train_sgd(const Dataset& data, std::vector<LayerSpec> layers, const SgdConfig& cfg,
                  std::vector<double>* epoch_losses) {
  if (data.size() == 0) throw ValidationError("training set is empty");
  if (static_cast<Eigen::Index>(data.labels.size()) != data.size())
    throw ValidationError("label count does not match example count");
  if (cfg.batch_size == 0) throw ValidationError("batch size must be positive");
  Network net = Network::initialize(std::move(layers), cfg.seed);
  if (data.dim() != net.input_dim()) throw InputShapeError("dataset dimension does not match network input");
  for (int y : data.labels) check_label(net, y);

  if (epoch_losses) {
    epoch_losses->clear();
    epoch_losses->push_back(dataset_loss(net, data));
  }
  if (cfg.epochs == 0) return net;

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  // Updated copy of the parameters; `net` is rebuilt from it after each step.
  std::vector<DenseParams> params = net.params();
  ParamGrads grads(params);
  ParamGrads velocity(params);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      grads.set_zero();
      for (std::size_t b = begin; b < end; ++b) {
        const Eigen::Index row = order[b];
        const Vector x = data.features.row(row).transpose();
        const Trace t = run_forward(net, x, ForwardMode::stochastic(rng()));
        Vector g = softmax(t.stack.per_layer[net.pre_softmax_index()]);
        g[data.labels[row]] -= 1.0;
        run_backward(net, t, net.pre_softmax_index(), std::move(g), &grads);
      }
      const double scale = cfg.learning_rate / static_cast<double>(end - begin);
      for (std::size_t s = 0; s < params.size(); ++s) {
        velocity.weight[s] = cfg.momentum * velocity.weight[s] - scale * grads.weight[s];
        velocity.bias[s] = cfg.momentum * velocity.bias[s] - scale * grads.bias[s];
        params[s].weight += velocity.weight[s];
        params[s].bias += velocity.bias[s];
      }
      net = Network(net.layers(), params, cfg.seed);
    }
    const double loss = dataset_loss(net, data);
    if (!std::isfinite(loss)) throw TrainingDivergedError("training loss is not finite", epoch);
    if (epoch_losses) epoch_losses->push_back(loss);
  }
  return net;
}

std::string network_to_json(const Network& net) {
  json doc;
  doc["seed"] = net.seed();
  json spec = json::array();
  for (const LayerSpec& l : net.layers())
    spec.push_back({{"kind", to_string(l.kind)},
                    {"in_dim", l.in_dim},
                    {"out_dim", l.out_dim},
                    {"dropout_rate", l.dropout_rate}});
  doc["spec"] = spec;
  json params = json::array();
  for (const DenseParams& p : net.params()) {
    std::vector<double> weight;
    weight.reserve(static_cast<std::size_t>(p.weight.size()));
    for (Eigen::Index r = 0; r < p.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < p.weight.cols(); ++c) weight.push_back(p.weight(r, c));
    params.push_back({{"rows", p.weight.rows()},
                      {"cols", p.weight.cols()},
                      {"weight", weight},
                      {"bias", std::vector<double>(p.bias.data(), p.bias.data() + p.bias.size())}});
  }
  doc["params"] = params;
  return doc.dump(1);
}

Network network_from_json(const std::string& text) {
  try {
    const json doc = json::parse(text);
    std::vector<LayerSpec> layers;
    for (const auto& l : doc.at("spec"))
      layers.push_back({layer_kind_from_string(l.at("kind").get<std::string>()), l.at("in_dim").get<Eigen::Index>(),
                        l.at("out_dim").get<Eigen::Index>(), l.value("dropout_rate", 0.0)});
    std::vector<DenseParams> params;
    for (const auto& p : doc.at("params")) {
      const auto rows = p.at("rows").get<Eigen::Index>();
      const auto cols = p.at("cols").get<Eigen::Index>();
      const auto weight = p.at("weight").get<std::vector<double>>();
      const auto bias = p.at("bias").get<std::vector<double>>();
      if (static_cast<Eigen::Index>(weight.size()) != rows * cols)
        throw ValidationError("weight array size does not match rows*cols");
      DenseParams dp{Matrix(rows, cols), Eigen::Map<const Vector>(bias.data(), static_cast<Eigen::Index>(bias.size()))};
      for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) dp.weight(r, c) = weight[static_cast<std::size_t>(r * cols + c)];
      params.push_back(std::move(dp));
    }
    return Network(std::move(layers), std::move(params), doc.at("seed").get<Seed>());
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed network JSON: ") + e.what());
  }
}

void save_network(const Network& net, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << network_to_json(net) << '\n';
}

Network load_network(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return network_from_json(buf.str());
}

}  // namespace lidet
