#pragma once

#include "lidet/common.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lidet {

enum class LayerKind { dense, relu, dropout, softmax };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  Eigen::Index in_dim = 0;
  Eigen::Index out_dim = 0;
  double dropout_rate = 0.0;

  static LayerSpec dense(Eigen::Index in, Eigen::Index out) { return {LayerKind::dense, in, out, 0.0}; }
  static LayerSpec relu(Eigen::Index dim) { return {LayerKind::relu, dim, dim, 0.0}; }
  static LayerSpec dropout(Eigen::Index dim, double rate) { return {LayerKind::dropout, dim, dim, rate}; }
  static LayerSpec softmax(Eigen::Index dim) { return {LayerKind::softmax, dim, dim, 0.0}; }

  bool operator==(const LayerSpec&) const = default;
};

/// Throws ValidationError unless dims chain, exactly one softmax sits last,
/// and every dropout rate is in [0, 1).
void validate_layers(std::span<const LayerSpec> layers);

struct DenseParams {
  Matrix weight;  // out_dim x in_dim
  Vector bias;
};

/// Feedforward classifier made of dense/relu/dropout/softmax layers.
/// Immutable once constructed; training produces a new Network.
class Network {
 public:
  Network(std::vector<LayerSpec> layers, std::vector<DenseParams> params, Seed seed);

  /// Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases.
  static Network initialize(std::vector<LayerSpec> layers, Seed seed);

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const std::vector<DenseParams>& params() const { return params_; }
  Seed seed() const { return seed_; }

  Eigen::Index input_dim() const { return layers_.front().in_dim; }
  Eigen::Index num_classes() const { return layers_.back().out_dim; }

  /// Number of transformation layers L. Activation stacks hold L+1 entries.
  std::size_t num_layers() const { return layers_.size(); }
  std::size_t num_feature_layers() const { return layers_.size() + 1; }
  /// Activation-stack index of the softmax input (the logits).
  std::size_t pre_softmax_index() const { return layers_.size() - 1; }

  /// Index into params() for a dense layer, -1 otherwise.
  int param_slot(std::size_t layer) const { return param_slot_[layer]; }

  bool has_dropout() const;

 private:
  std::vector<LayerSpec> layers_;
  std::vector<DenseParams> params_;
  std::vector<int> param_slot_;
  Seed seed_;
};

/// Dropout handling for a forward pass. Deterministic mode scales dropout
/// outputs by (1 - rate); stochastic mode draws a Bernoulli keep-mask.
struct ForwardMode {
  std::optional<Seed> seed;

  static ForwardMode deterministic() { return {}; }
  static ForwardMode stochastic(Seed s) { return {s}; }
  bool is_stochastic() const { return seed.has_value(); }
};

struct ActivationStack {
  /// per_layer[0] is the input, per_layer[i] the output of layer i-1.
  std::vector<Vector> per_layer;
  Eigen::Index predicted_class = 0;
  Vector probs;

  const Vector& logits() const { return per_layer[per_layer.size() - 2]; }
};

ActivationStack forward_capture(const Network& net, const Eigen::Ref<const Vector>& x,
                                ForwardMode mode = ForwardMode::deterministic());

Eigen::Index predict(const Network& net, const Eigen::Ref<const Vector>& x);

/// Numerically stable softmax (max-subtracted).
Vector softmax(const Eigen::Ref<const Vector>& logits);

/// Scalar objective of a forward pass whose input gradient is wanted.
///
/// cross_entropy(y)   -log p_y, computed by log-sum-exp on the logits.
/// logit_margin(t)    Z_t - max_{j != t} Z_j.
/// custom             arbitrary function of one activation-stack entry; the
///                    callback returns the value and fills d/d(per_layer[layer]).
struct Objective {
  enum class Kind { cross_entropy, logit_margin, custom_scalar };
  using CustomFn = std::function<double(const ActivationStack&, Vector& grad_at_layer)>;

  Kind kind = Kind::cross_entropy;
  Eigen::Index label = 0;
  std::size_t layer = 0;
  CustomFn fn;

  static Objective cross_entropy(Eigen::Index label) { return {Kind::cross_entropy, label, 0, {}}; }
  static Objective logit_margin(Eigen::Index target) { return {Kind::logit_margin, target, 0, {}}; }
  static Objective custom(std::size_t layer, CustomFn fn) {
    return {Kind::custom_scalar, 0, layer, std::move(fn)};
  }
};

struct ValueAndGradient {
  double value = 0.0;
  Vector gradient;
  ActivationStack activations;
};

ValueAndGradient value_and_input_gradient(const Network& net, const Eigen::Ref<const Vector>& x,
                                          const Objective& objective);

/// d objective / dx at x with deterministic dropout scaling.
Vector input_gradient(const Network& net, const Eigen::Ref<const Vector>& x,
                      const Objective& objective);

/// Rows are d Z_c / dx for every logit c.
Matrix logit_jacobian(const Network& net, const Eigen::Ref<const Vector>& x);

struct SgdConfig {
  std::size_t epochs = 60;
  double learning_rate = 0.05;
  std::size_t batch_size = 32;
  double momentum = 0.9;
  Seed seed = 0;
};

/// Mean cross-entropy over the dataset under deterministic dropout.
double dataset_loss(const Network& net, const Dataset& data);
double accuracy(const Network& net, const Dataset& data);

/// Minibatch SGD with momentum on mean cross-entropy, stochastic dropout
/// during training. `epoch_losses`, when given, receives the deterministic
/// dataset loss before training followed by one entry per epoch.
Network train_sgd(const Dataset& data, std::vector<LayerSpec> layers, const SgdConfig& cfg,
                  std::vector<double>* epoch_losses = nullptr);

std::string network_to_json(const Network& net);
Network network_from_json(const std::string& text);
void save_network(const Network& net, const std::string& path);
Network load_network(const std::string& path);

}  // namespace lidet
