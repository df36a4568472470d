#include "lidet/detector.hpp"

#include "json.hpp"
#include "lidet/data.hpp"
#include "lidet/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace lidet {

namespace {

using json = nlohmann::json;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Seed mix(Seed seed, std::size_t i) {
  // splitmix64 step
  Seed z = seed + 0x9e3779b97f4a7c15ULL * (static_cast<Seed>(i) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Per-layer activations of the three blocks.
struct BlockActivations {
  std::vector<RowMatrix> normal, adversarial, noisy;
  std::vector<Eigen::Index> pred_adversarial, pred_noisy;
};

std::vector<RowMatrix> layer_activations(const Network& net, const RowMatrix& inputs, std::size_t workers,
                                         std::vector<Eigen::Index>* predictions = nullptr) {
  const auto n = static_cast<std::size_t>(inputs.rows());
  std::vector<ActivationStack> stacks(n);
  parallel_for(n, workers, [&](std::size_t i) {
    stacks[i] = forward_capture(net, inputs.row(static_cast<Eigen::Index>(i)).transpose());
  });
  std::vector<RowMatrix> layers;
  for (std::size_t l = 0; l < net.num_feature_layers(); ++l) {
    RowMatrix m(inputs.rows(), stacks.empty() ? 0 : stacks.front().per_layer[l].size());
    for (std::size_t i = 0; i < n; ++i) m.row(static_cast<Eigen::Index>(i)) = stacks[i].per_layer[l].transpose();
    layers.push_back(std::move(m));
  }
  if (predictions) {
    predictions->resize(n);
    for (std::size_t i = 0; i < n; ++i) (*predictions)[i] = stacks[i].predicted_class;
  }
  return layers;
}

BlockActivations block_activations(const Network& net, const Counterparts& parts, std::size_t workers) {
  BlockActivations acts;
  acts.normal = layer_activations(net, parts.normal, workers);
  acts.adversarial = layer_activations(net, parts.adversarial, workers, &acts.pred_adversarial);
  acts.noisy = layer_activations(net, parts.noisy, workers, &acts.pred_noisy);
  return acts;
}

/// LID of one query for several neighborhood sizes from one profile.
std::vector<double> lid_prefixes(const Eigen::Ref<const Vector>& query, const RowMatrix& refs,
                                 std::optional<Eigen::Index> self, std::span<const std::size_t> ks,
                                 bool tolerate_degenerate) {
  const std::size_t kmax = *std::max_element(ks.begin(), ks.end());
  std::vector<double> out(ks.size(), kNaN);
  try {
    const DistanceProfile profile = knn_profile_distinct(query, refs, kmax, self);
    const std::span<const double> dist(profile.distances);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      try {
        out[i] = mle_lid_value<double>(dist.first(ks[i]));
      } catch (const DegenerateProfileError&) {
        if (!tolerate_degenerate) throw;
      } catch (const InfiniteEstimateError&) {
        if (!tolerate_degenerate) throw;
      }
    }
  } catch (const DegenerateProfileError&) {
    if (!tolerate_degenerate) throw;
  }
  return out;
}

/// lid[k_index] is an N x L block.
struct LidBlocks {
  std::vector<RowMatrix> normal, adversarial, noisy;
};

LidBlocks lid_blocks(const BlockActivations& acts, const Counterparts& parts, std::span<const std::size_t> ks,
                     std::size_t workers) {
  const auto n = static_cast<Eigen::Index>(parts.size());
  const auto layers = static_cast<Eigen::Index>(acts.normal.size());
  LidBlocks out;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    out.normal.emplace_back(n, layers);
    out.adversarial.emplace_back(n, layers);
    out.noisy.emplace_back(n, layers);
  }
  parallel_for(static_cast<std::size_t>(n * layers), workers, [&](std::size_t task) {
    const auto j = static_cast<Eigen::Index>(task) / layers;
    const auto l = static_cast<Eigen::Index>(task) % layers;
    const RowMatrix& refs = acts.normal[static_cast<std::size_t>(l)];
    const bool failed = !parts.outcomes[static_cast<std::size_t>(j)].success;
    const auto norm = lid_prefixes(refs.row(j).transpose(), refs, j, ks, false);
    const auto adv = lid_prefixes(acts.adversarial[static_cast<std::size_t>(l)].row(j).transpose(), refs,
                                  std::nullopt, ks, failed);
    const auto noisy =
        lid_prefixes(acts.noisy[static_cast<std::size_t>(l)].row(j).transpose(), refs, std::nullopt, ks, false);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      out.normal[i](j, l) = norm[i];
      out.adversarial[i](j, l) = adv[i];
      out.noisy[i](j, l) = noisy[i];
    }
  });
  return out;
}

/// KD block: queries against normal rows of the query's predicted class.
RowMatrix kd_block(const std::vector<RowMatrix>& queries, const std::vector<RowMatrix>& normal,
                   std::span<const Eigen::Index> predicted, std::span<const int> labels, bool self_is_member,
                   double sigma, std::size_t workers) {
  const auto n = static_cast<Eigen::Index>(predicted.size());
  const auto layers = static_cast<Eigen::Index>(normal.size());
  std::map<int, std::vector<Eigen::Index>> by_class;
  for (std::size_t j = 0; j < labels.size(); ++j) by_class[labels[j]].push_back(static_cast<Eigen::Index>(j));
  RowMatrix out(n, layers);
  const KdConfig cfg{sigma};
  parallel_for(static_cast<std::size_t>(n), workers, [&](std::size_t task) {
    const auto j = static_cast<Eigen::Index>(task);
    const auto it = by_class.find(static_cast<int>(predicted[static_cast<std::size_t>(j)]));
    std::vector<Eigen::Index> members;
    if (it != by_class.end())
      for (Eigen::Index m : it->second)
        if (!(self_is_member && m == j)) members.push_back(m);
    if (members.empty()) throw EmptyClassError("no normal reference of the predicted class for KD");
    for (Eigen::Index l = 0; l < layers; ++l) {
      const RowMatrix& layer = normal[static_cast<std::size_t>(l)];
      RowMatrix refs(static_cast<Eigen::Index>(members.size()), layer.cols());
      for (std::size_t r = 0; r < members.size(); ++r) refs.row(static_cast<Eigen::Index>(r)) = layer.row(members[r]);
      out(j, l) = kernel_density(queries[static_cast<std::size_t>(l)].row(j).transpose(), refs, cfg);
    }
  });
  return out;
}

Vector bu_block(const Network& net, const RowMatrix& inputs, const BuConfig& cfg, std::size_t workers) {
  Vector out(inputs.rows());
  parallel_for(static_cast<std::size_t>(inputs.rows()), workers, [&](std::size_t i) {
    out[static_cast<Eigen::Index>(i)] = bayes_uncertainty(net, inputs.row(static_cast<Eigen::Index>(i)).transpose(), cfg);
  });
  return out;
}

RowMatrix hconcat(std::initializer_list<const RowMatrix*> parts) {
  Eigen::Index cols = 0, rows = -1;
  for (const RowMatrix* p : parts) {
    cols += p->cols();
    rows = p->rows();
  }
  RowMatrix out(rows, cols);
  Eigen::Index c = 0;
  for (const RowMatrix* p : parts) {
    out.middleCols(c, p->cols()) = *p;
    c += p->cols();
  }
  return out;
}

ExtractionResult assemble(const Counterparts& parts, FeatureKind kind, RowMatrix normal, RowMatrix adversarial,
                          RowMatrix noisy) {
  ExtractionResult res;
  res.features.kind = kind;
  const auto n = static_cast<Eigen::Index>(parts.size());
  std::vector<Eigen::Index> kept_adv;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (parts.outcomes[static_cast<std::size_t>(j)].success)
      kept_adv.push_back(j);
    else
      res.dropped_ids.push_back(parts.ids[static_cast<std::size_t>(j)]);
  }
  const auto kept = static_cast<Eigen::Index>(kept_adv.size());
  res.features.values.resize(2 * n + kept, normal.cols());
  res.features.values.topRows(n) = normal;
  res.features.values.middleRows(n, n) = noisy;
  for (Eigen::Index r = 0; r < kept; ++r) res.features.values.row(2 * n + r) = adversarial.row(kept_adv[static_cast<std::size_t>(r)]);
  for (Eigen::Index j = 0; j < n; ++j) {
    res.features.provenance.push_back(Provenance::normal);
    res.features.source_ids.push_back(parts.ids[static_cast<std::size_t>(j)]);
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    res.features.provenance.push_back(Provenance::noisy);
    res.features.source_ids.push_back(parts.ids[static_cast<std::size_t>(j)]);
  }
  for (Eigen::Index j : kept_adv) {
    res.features.provenance.push_back(Provenance::adversarial);
    res.features.source_ids.push_back(parts.ids[static_cast<std::size_t>(j)]);
  }
  res.normal_block = std::move(normal);
  res.adversarial_block = std::move(adversarial);
  res.noisy_block = std::move(noisy);
  return res;
}

double sigmoid(double z) { return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

double softplus(double t) { return std::max(t, 0.0) + std::log1p(std::exp(-std::abs(t))); }

Eigen::RowVectorXd to_row(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::RowVectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

std::string to_string(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::lid: return "lid";
    case FeatureKind::kd: return "kd";
    case FeatureKind::bu: return "bu";
    case FeatureKind::kd_bu: return "kd_bu";
    case FeatureKind::combined: return "combined";
  }
  return "?";
}

FeatureKind feature_kind_from_string(const std::string& name) {
  for (FeatureKind k : {FeatureKind::lid, FeatureKind::kd, FeatureKind::bu, FeatureKind::kd_bu, FeatureKind::combined})
    if (to_string(k) == name) return k;
  throw ValidationError("unknown feature kind '" + name + "'");
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::normal: return "normal";
    case Provenance::noisy: return "noisy";
    case Provenance::adversarial: return "adversarial";
  }
  return "?";
}

Provenance provenance_from_string(const std::string& name) {
  for (Provenance p : {Provenance::normal, Provenance::noisy, Provenance::adversarial})
    if (to_string(p) == name) return p;
  throw ValidationError("unknown provenance '" + name + "'");
}

std::size_t FeatureMatrix::count_positive() const {
  return static_cast<std::size_t>(std::count(provenance.begin(), provenance.end(), Provenance::adversarial));
}

void FeatureMatrix::append(const FeatureMatrix& other) {
  if (values.rows() == 0) {
    *this = other;
    return;
  }
  if (other.kind != kind || other.cols() != cols()) throw ValidationError("cannot append features of a different shape");
  RowMatrix merged(rows() + other.rows(), cols());
  merged << values, other.values;
  values = std::move(merged);
  provenance.insert(provenance.end(), other.provenance.begin(), other.provenance.end());
  source_ids.insert(source_ids.end(), other.source_ids.begin(), other.source_ids.end());
}

FeatureMatrix FeatureMatrix::select_rows(std::span<const Eigen::Index> rows_) const {
  FeatureMatrix out;
  out.kind = kind;
  out.values.resize(static_cast<Eigen::Index>(rows_.size()), cols());
  for (std::size_t i = 0; i < rows_.size(); ++i) {
    out.values.row(static_cast<Eigen::Index>(i)) = values.row(rows_[i]);
    out.provenance.push_back(provenance[static_cast<std::size_t>(rows_[i])]);
    out.source_ids.push_back(source_ids[static_cast<std::size_t>(rows_[i])]);
  }
  return out;
}

FeatureMatrix FeatureMatrix::select_columns(std::span<const Eigen::Index> cols_) const {
  FeatureMatrix out = *this;
  out.values.resize(rows(), static_cast<Eigen::Index>(cols_.size()));
  for (std::size_t c = 0; c < cols_.size(); ++c) {
    if (cols_[c] < 0 || cols_[c] >= cols()) throw RangeError("feature column out of range");
    out.values.col(static_cast<Eigen::Index>(c)) = values.col(cols_[c]);
  }
  return out;
}

std::size_t Counterparts::successes() const {
  return static_cast<std::size_t>(
      std::count_if(outcomes.begin(), outcomes.end(), [](const AttackOutcome& o) { return o.success; }));
}

Counterparts craft_counterparts(const Network& net, const Minibatch& normal_batch, std::span<const int> labels,
                                const AttackConfig& attack, Seed seed, std::size_t workers,
                                std::optional<NoiseStyle> noise) {
  const auto n = static_cast<std::size_t>(normal_batch.size());
  if (labels.size() != n) throw ValidationError("label count does not match the minibatch");
  attack.validate();
  Counterparts parts;
  parts.attack = attack.kind;
  parts.ids = normal_batch.member_ids();
  parts.normal = normal_batch.vectors();
  parts.labels.assign(labels.begin(), labels.end());
  parts.outcomes.resize(n);
  parts.adversarial.resize(normal_batch.size(), normal_batch.dim());
  parts.noisy.resize(normal_batch.size(), normal_batch.dim());

  parallel_for(n, workers, [&](std::size_t i) {
    const Vector x = parts.normal.row(static_cast<Eigen::Index>(i)).transpose();
    AttackConfig cfg = attack;
    cfg.seed = mix(seed, i);
    try {
      parts.outcomes[i] = run_attack(net, x, labels[i], cfg, &normal_batch);
    } catch (const NoDirectionError&) {
      AttackOutcome failed;
      failed.adversarial = x;
      failed.status = AttackStatus::no_direction;
      parts.outcomes[i] = std::move(failed);
    }
  });

  double norm_sum = 0.0;
  std::size_t changed_sum = 0, successes = 0;
  for (const AttackOutcome& o : parts.outcomes)
    if (o.success) {
      norm_sum += o.l2_perturbation;
      changed_sum += o.changed_features;
      ++successes;
    }
  if (successes == 0) throw EmptyClassError("every attack in the batch failed; no positive examples");

  // Stand-in for failed attacks: the batch's mean successful perturbation.
  AttackOutcome mean_outcome;
  mean_outcome.success = true;
  mean_outcome.l2_perturbation = norm_sum / static_cast<double>(successes);
  mean_outcome.changed_features =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(changed_sum) / static_cast<double>(successes))));

  const NoiseStyle style = noise.value_or(attack.kind == AttackKind::jsma ? NoiseStyle::minmax_pixels : NoiseStyle::gaussian_l2);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const Vector x = parts.normal.row(r).transpose();
    const AttackOutcome& o = parts.outcomes[i];
    parts.adversarial.row(r) = o.adversarial.transpose();
    const AttackOutcome& matched = o.success && o.l2_perturbation > 0.0 ? o : mean_outcome;
    parts.noisy.row(r) = matched_noise(x, matched, style, mix(seed ^ 0xa5a5a5a5ULL, i), attack.clip_min, attack.clip_max).transpose();
  }
  return parts;
}

Eigen::Index feature_columns(FeatureKind kind, std::size_t feature_layers) {
  const auto l = static_cast<Eigen::Index>(feature_layers);
  switch (kind) {
    case FeatureKind::lid:
    case FeatureKind::kd: return l;
    case FeatureKind::bu: return 1;
    case FeatureKind::kd_bu: return l + 1;
    case FeatureKind::combined: return 2 * l + 1;
  }
  return 0;
}

ExtractionResult compute_features(const Network& net, const Counterparts& parts, FeatureKind kind,
                                  const FeatureParams& params, std::size_t workers) {
  if (parts.size() < 2) throw ValidationError("feature extraction needs at least two normal examples");
  const BlockActivations acts = block_activations(net, parts, workers);
  const bool want_lid = kind == FeatureKind::lid || kind == FeatureKind::combined;
  const bool want_kd = kind == FeatureKind::kd || kind == FeatureKind::kd_bu || kind == FeatureKind::combined;
  const bool want_bu = kind == FeatureKind::bu || kind == FeatureKind::kd_bu || kind == FeatureKind::combined;

  RowMatrix lid_n, lid_a, lid_z, kd_n, kd_a, kd_z, bu_n, bu_a, bu_z;
  if (want_lid) {
    const std::size_t ks[] = {params.k};
    LidBlocks lid = lid_blocks(acts, parts, ks, workers);
    lid_n = std::move(lid.normal[0]);
    lid_a = std::move(lid.adversarial[0]);
    lid_z = std::move(lid.noisy[0]);
  }
  if (want_kd) {
    std::vector<Eigen::Index> normal_pred(parts.labels.begin(), parts.labels.end());
    kd_n = kd_block(acts.normal, acts.normal, normal_pred, parts.labels, true, params.sigma, workers);
    kd_a = kd_block(acts.adversarial, acts.normal, acts.pred_adversarial, parts.labels, false, params.sigma, workers);
    kd_z = kd_block(acts.noisy, acts.normal, acts.pred_noisy, parts.labels, false, params.sigma, workers);
  }
  if (want_bu) {
    bu_n = bu_block(net, parts.normal, params.bu, workers);
    bu_a = bu_block(net, parts.adversarial, params.bu, workers);
    bu_z = bu_block(net, parts.noisy, params.bu, workers);
  }
  switch (kind) {
    case FeatureKind::lid: return assemble(parts, kind, lid_n, lid_a, lid_z);
    case FeatureKind::kd: return assemble(parts, kind, kd_n, kd_a, kd_z);
    case FeatureKind::bu: return assemble(parts, kind, bu_n, bu_a, bu_z);
    case FeatureKind::kd_bu:
      return assemble(parts, kind, hconcat({&kd_n, &bu_n}), hconcat({&kd_a, &bu_a}), hconcat({&kd_z, &bu_z}));
    case FeatureKind::combined:
      return assemble(parts, kind, hconcat({&lid_n, &kd_n, &bu_n}), hconcat({&lid_a, &kd_a, &bu_a}),
                      hconcat({&lid_z, &kd_z, &bu_z}));
  }
  throw ValidationError("unknown feature kind");
}

std::vector<FeatureMatrix> compute_lid_for_ks(const Network& net, const Counterparts& parts,
                                              std::span<const std::size_t> ks, std::size_t workers) {
  if (ks.empty()) throw ValidationError("no neighborhood sizes given");
  const BlockActivations acts = block_activations(net, parts, workers);
  LidBlocks lid = lid_blocks(acts, parts, ks, workers);
  std::vector<FeatureMatrix> out;
  for (std::size_t i = 0; i < ks.size(); ++i)
    out.push_back(assemble(parts, FeatureKind::lid, std::move(lid.normal[i]), std::move(lid.adversarial[i]),
                           std::move(lid.noisy[i]))
                      .features);
  return out;
}

ExtractionResult extract_features(const Network& net, const Minibatch& normal_batch, std::span<const int> labels,
                                  const AttackConfig& attack, FeatureKind kind, const FeatureParams& params,
                                  Seed seed, std::size_t workers) {
  const Counterparts parts = craft_counterparts(net, normal_batch, labels, attack, seed, workers);
  return compute_features(net, parts, kind, params, workers);
}

DetectorModel train_detector(const FeatureMatrix& features, const LogRegConfig& cfg,
                             const std::string& training_attack) {
  const Eigen::Index n = features.rows();
  const std::size_t positives = features.count_positive();
  if (positives == 0 || positives == static_cast<std::size_t>(n))
    throw EmptyClassError("detector training needs both positive and negative rows");
  if (!features.values.allFinite()) throw ValidationError("training features contain non-finite values");

  DetectorModel model;
  model.kind = features.kind;
  model.training_attack = training_attack;
  model.input_columns = features.cols();
  std::vector<double> means, stds;
  for (Eigen::Index c = 0; c < features.cols(); ++c) {
    const double mean = features.values.col(c).mean();
    const double sd = std::sqrt((features.values.col(c).array() - mean).square().mean());
    if (!(sd > 1e-12 * (1.0 + std::abs(mean)))) {
      model.dropped_columns.push_back(c);
      continue;
    }
    model.kept_columns.push_back(c);
    means.push_back(mean);
    stds.push_back(sd);
  }
  if (model.kept_columns.empty()) throw ValidationError("every feature column has zero variance");
  model.mean = Eigen::Map<const Vector>(means.data(), static_cast<Eigen::Index>(means.size()));
  model.stddev = Eigen::Map<const Vector>(stds.data(), static_cast<Eigen::Index>(stds.size()));

  const auto p = static_cast<Eigen::Index>(model.kept_columns.size());
  Matrix x(n, p);
  for (Eigen::Index c = 0; c < p; ++c)
    x.col(c) = (features.values.col(model.kept_columns[static_cast<std::size_t>(c)]).array() - model.mean[c]) / model.stddev[c];
  Vector y(n);
  for (Eigen::Index r = 0; r < n; ++r) y[r] = features.positive(r) ? 1.0 : 0.0;

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> init(0.0, 0.01);
  Vector w(p);
  for (Eigen::Index c = 0; c < p; ++c) w[c] = init(rng);
  double b = 0.0;
  double prev = std::numeric_limits<double>::infinity();
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const Vector z = (x * w).array() + b;
    double loss = 0.0;
    Vector residual(n);
    for (Eigen::Index r = 0; r < n; ++r) {
      loss += y[r] > 0.5 ? softplus(-z[r]) : softplus(z[r]);
      residual[r] = sigmoid(z[r]) - y[r];
    }
    loss = loss * inv_n + 0.5 * cfg.l2_penalty * w.squaredNorm();
    if (!std::isfinite(loss)) throw NumericOverflowError("logistic regression diverged");
    if (std::abs(prev - loss) < cfg.tolerance) break;
    prev = loss;
    const Vector grad_w = inv_n * (x.transpose() * residual) + cfg.l2_penalty * w;
    w -= cfg.learning_rate * grad_w;
    b -= cfg.learning_rate * residual.mean();
  }
  model.weights = w;
  model.bias = b;
  return model;
}

Vector decision_function(const DetectorModel& model, const RowMatrix& values) {
  if (values.cols() != model.input_columns)
    throw InputShapeError("detector expects " + std::to_string(model.input_columns) + " feature columns, got " +
                          std::to_string(values.cols()));
  Vector out = Vector::Constant(values.rows(), model.bias);
  for (std::size_t c = 0; c < model.kept_columns.size(); ++c) {
    const auto ci = static_cast<Eigen::Index>(c);
    out.array() += model.weights[ci] * (values.col(model.kept_columns[c]).array() - model.mean[ci]) / model.stddev[ci];
  }
  return out;
}

Vector score(const DetectorModel& model, const RowMatrix& values) {
  return decision_function(model, values).unaryExpr([](double z) {
    return std::clamp(sigmoid(z), std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
  });
}

double auc(std::span<const double> scores_pos, std::span<const double> scores_neg) {
  if (scores_pos.empty() || scores_neg.empty()) throw EmptyClassError("AUC needs both positive and negative scores");
  std::vector<std::pair<double, bool>> all;
  all.reserve(scores_pos.size() + scores_neg.size());
  for (double s : scores_pos) all.emplace_back(s, true);
  for (double s : scores_neg) all.emplace_back(s, false);
  for (const auto& [s, _] : all)
    if (std::isnan(s)) throw ValidationError("AUC input contains NaN");
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  // Twice the Mann-Whitney count, kept integral.
  std::uint64_t twice = 0, neg_below = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    std::uint64_t pos = 0, neg = 0;
    for (; j < all.size() && all[j].first == all[i].first; ++j) (all[j].second ? pos : neg) += 1;
    twice += 2 * pos * neg_below + pos * neg;
    neg_below += neg;
    i = j;
  }
  return static_cast<double>(twice) /
         (2.0 * static_cast<double>(scores_pos.size()) * static_cast<double>(scores_neg.size()));
}

double evaluate_auc(const DetectorModel& model, const FeatureMatrix& features) {
  const Vector s = decision_function(model, features.values);
  std::vector<double> pos, neg;
  for (Eigen::Index r = 0; r < features.rows(); ++r) (features.positive(r) ? pos : neg).push_back(s[r]);
  return auc(pos, neg);
}

double transfer_evaluate(const DetectorModel& model, const FeatureMatrix& test_features) {
  if (model.kind != test_features.kind)
    throw ValidationError("detector trained on " + to_string(model.kind) + " features cannot score " +
                          to_string(test_features.kind) + " features");
  return evaluate_auc(model, test_features);
}

std::vector<std::pair<std::size_t, double>> layerwise_auc(const FeatureMatrix& features) {
  std::vector<std::pair<std::size_t, double>> out;
  for (Eigen::Index c = 0; c < features.cols(); ++c) {
    std::vector<double> pos, neg;
    for (Eigen::Index r = 0; r < features.rows(); ++r) (features.positive(r) ? pos : neg).push_back(features.values(r, c));
    out.emplace_back(static_cast<std::size_t>(c), auc(pos, neg));
  }
  return out;
}

double cross_validated_auc(const FeatureMatrix& features, std::size_t folds, const LogRegConfig& cfg, Seed seed) {
  if (folds < 2) throw ValidationError("cross validation needs at least two folds");
  std::vector<std::size_t> ids(features.source_ids);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::map<std::size_t, std::size_t> fold_of;
  for (std::size_t i = 0; i < ids.size(); ++i) fold_of[ids[i]] = i % folds;

  double total = 0.0;
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<Eigen::Index> train_rows, test_rows;
    for (Eigen::Index r = 0; r < features.rows(); ++r)
      (fold_of[features.source_ids[static_cast<std::size_t>(r)]] == f ? test_rows : train_rows).push_back(r);
    const FeatureMatrix train = features.select_rows(train_rows);
    const FeatureMatrix test = features.select_rows(test_rows);
    for (const FeatureMatrix* part : {&train, &test}) {
      const std::size_t pos = part->count_positive();
      if (pos == 0 || pos == static_cast<std::size_t>(part->rows()))
        throw ValidationError("degenerate cross-validation fold: a class is missing");
    }
    total += evaluate_auc(train_detector(train, cfg), test);
  }
  return total / static_cast<double>(folds);
}

std::size_t select_best(const std::vector<double>& grid, const std::vector<double>& mean_auc) {
  if (grid.empty() || grid.size() != mean_auc.size()) throw ValidationError("tuning grid is empty or misaligned");
  std::size_t best = 0;
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (mean_auc[i] > mean_auc[best] || (mean_auc[i] == mean_auc[best] && grid[i] < grid[best])) best = i;
  return best;
}

TuningResult tune_parameter(const Network& net, const std::vector<std::vector<Counterparts>>& batches,
                            const std::vector<std::string>& attack_names, const TuneOptions& options) {
  if (options.grid.empty()) throw ValidationError("tuning grid is empty");
  if (batches.empty() || batches.size() != attack_names.size()) throw ValidationError("tuning needs one batch list per attack");
  TuningResult result;
  result.parameter = options.parameter;
  result.grid = options.grid;
  result.attacks = attack_names;

  for (std::size_t a = 0; a < batches.size(); ++a) {
    std::vector<FeatureMatrix> per_cell(options.grid.size());
    if (options.parameter == TunedParameter::k && options.kind == FeatureKind::lid) {
      std::vector<std::size_t> ks;
      for (double g : options.grid) {
        if (!(g >= 1.0) || g != std::floor(g)) throw ValidationError("k grid values must be positive integers");
        ks.push_back(static_cast<std::size_t>(g));
      }
      for (const Counterparts& parts : batches[a]) {
        auto cells = compute_lid_for_ks(net, parts, ks, options.workers);
        for (std::size_t g = 0; g < cells.size(); ++g) per_cell[g].append(cells[g]);
      }
    } else {
      for (std::size_t g = 0; g < options.grid.size(); ++g) {
        FeatureParams params = options.base;
        if (options.parameter == TunedParameter::k)
          params.k = static_cast<std::size_t>(options.grid[g]);
        else
          params.sigma = options.grid[g];
        for (const Counterparts& parts : batches[a])
          per_cell[g].append(compute_features(net, parts, options.kind, params, options.workers).features);
      }
    }
    std::vector<double> aucs;
    for (const FeatureMatrix& cell : per_cell) aucs.push_back(cross_validated_auc(cell, options.folds, options.logreg, options.seed));
    result.per_attack_auc.push_back(std::move(aucs));
  }
  result.mean_auc.assign(options.grid.size(), 0.0);
  for (const auto& row : result.per_attack_auc)
    for (std::size_t g = 0; g < row.size(); ++g) result.mean_auc[g] += row[g] / static_cast<double>(batches.size());
  result.selected_index = select_best(result.grid, result.mean_auc);
  result.selected = result.grid[result.selected_index];
  return result;
}

FailureRates detection_failure_rates(const Network& net, const DetectorModel& all_layers,
                                     const DetectorModel& pre_softmax, std::span<const AttackOutcome> outcomes,
                                     const Minibatch& refs, std::size_t k) {
  const std::vector<RowMatrix> ref_acts = layer_activations(net, refs.vectors(), 1);
  const auto layers = static_cast<Eigen::Index>(ref_acts.size());
  const auto pre = static_cast<Eigen::Index>(net.pre_softmax_index());
  FailureRates rates;
  rates.inputs = outcomes.size();
  std::size_t failures1 = 0, failures2 = 0;
  for (const AttackOutcome& o : outcomes) {
    if (!o.success) {
      ++rates.attack_failures;
      ++failures1;
      ++failures2;
      continue;
    }
    const ActivationStack stack = forward_capture(net, o.adversarial);
    RowMatrix row(1, layers);
    for (Eigen::Index l = 0; l < layers; ++l)
      row(0, l) = mle_lid(knn_profile_distinct(stack.per_layer[static_cast<std::size_t>(l)], ref_acts[static_cast<std::size_t>(l)], k, std::nullopt)).value;
    const RowMatrix single = row.col(pre);
    if (decision_function(all_layers, row)[0] > 0.0) {
      ++rates.detected_scenario1;
      ++failures1;
    }
    if (decision_function(pre_softmax, single)[0] > 0.0) {
      ++rates.detected_scenario2;
      ++failures2;
    }
  }
  if (!outcomes.empty()) {
    rates.scenario1 = static_cast<double>(failures1) / static_cast<double>(outcomes.size());
    rates.scenario2 = static_cast<double>(failures2) / static_cast<double>(outcomes.size());
  }
  return rates;
}

FailureRates adaptive_failure_rate(const Network& net, const DetectorModel& all_layers,
                                   const DetectorModel& pre_softmax, const Dataset& inputs, const Minibatch& refs,
                                   const AttackConfig& cfg, std::size_t workers, std::vector<AttackOutcome>* outcomes) {
  std::vector<AttackOutcome> results(static_cast<std::size_t>(inputs.size()));
  parallel_for(results.size(), workers, [&](std::size_t i) {
    AttackConfig c = cfg;
    c.seed = mix(cfg.seed, i);
    results[i] = adaptive_opt_lid(net, inputs.features.row(static_cast<Eigen::Index>(i)).transpose(), inputs.labels[i], refs, c);
  });
  FailureRates rates = detection_failure_rates(net, all_layers, pre_softmax, results, refs, cfg.adaptive_k);
  if (outcomes) *outcomes = std::move(results);
  return rates;
}

void save_features_csv(const FeatureMatrix& features, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  for (Eigen::Index c = 0; c < features.cols(); ++c) out << "feature_" << c << ',';
  out << "label,provenance\n";
  for (Eigen::Index r = 0; r < features.rows(); ++r) {
    for (Eigen::Index c = 0; c < features.cols(); ++c) out << format_double(features.values(r, c)) << ',';
    out << (features.positive(r) ? 1 : 0) << ',' << to_string(features.provenance[static_cast<std::size_t>(r)]) << '\n';
  }
}

FeatureMatrix load_features_csv(const std::string& path, FeatureKind kind) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw ParseError("empty feature file", line_no);
  const auto header = split_csv_line(line);
  if (header.size() < 3 || header[header.size() - 2] != "label" || header.back() != "provenance")
    throw ParseError("feature header must end with label,provenance", line_no);
  const std::size_t width = header.size() - 2;
  std::vector<std::vector<double>> rows;
  FeatureMatrix out;
  out.kind = kind;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != width + 2) throw ParseError("wrong column count", line_no);
    std::vector<double> row;
    for (std::size_t c = 0; c < width; ++c) row.push_back(parse_double(fields[c], line_no));
    Provenance p;
    try {
      p = provenance_from_string(fields.back());
    } catch (const ValidationError&) {
      throw ParseError("unknown provenance '" + fields.back() + "'", line_no);
    }
    const bool positive = fields[width] == "1";
    if (positive != (p == Provenance::adversarial) || (fields[width] != "0" && fields[width] != "1"))
      throw ParseError("label does not agree with provenance", line_no);
    out.provenance.push_back(p);
    out.source_ids.push_back(rows.size());
    rows.push_back(std::move(row));
  }
  out.values.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
  for (std::size_t r = 0; r < rows.size(); ++r) out.values.row(static_cast<Eigen::Index>(r)) = to_row(rows[r]);
  return out;
}

std::string detector_to_json(const DetectorModel& model) {
  auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  json doc;
  doc["weights"] = vec(model.weights);
  doc["bias"] = model.bias;
  doc["scaler"] = {{"mean", vec(model.mean)},
                   {"std", vec(model.stddev)},
                   {"kept_columns", model.kept_columns},
                   {"dropped_columns", model.dropped_columns},
                   {"input_columns", model.input_columns}};
  doc["feature_kind"] = to_string(model.kind);
  doc["training_attack"] = model.training_attack;
  return doc.dump(1);
}

DetectorModel detector_from_json(const std::string& text) {
  try {
    const json doc = json::parse(text);
    auto vec = [](const json& j) {
      const auto v = j.get<std::vector<double>>();
      return Vector(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
    };
    DetectorModel m;
    m.weights = vec(doc.at("weights"));
    m.bias = doc.at("bias").get<double>();
    const json& s = doc.at("scaler");
    m.mean = vec(s.at("mean"));
    m.stddev = vec(s.at("std"));
    m.kept_columns = s.at("kept_columns").get<std::vector<Eigen::Index>>();
    m.dropped_columns = s.at("dropped_columns").get<std::vector<Eigen::Index>>();
    m.input_columns = s.at("input_columns").get<Eigen::Index>();
    m.kind = feature_kind_from_string(doc.at("feature_kind").get<std::string>());
    m.training_attack = doc.at("training_attack").get<std::string>();
    const auto p = static_cast<Eigen::Index>(m.kept_columns.size());
    if (m.weights.size() != p || m.mean.size() != p || m.stddev.size() != p)
      throw ValidationError("detector JSON has inconsistent scaler/weight sizes");
    return m;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed detector JSON: ") + e.what());
  }
}

void save_detector(const DetectorModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << detector_to_json(model) << '\n';
}

DetectorModel load_detector(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return detector_from_json(buf.str());
}

}  // namespace lidet
