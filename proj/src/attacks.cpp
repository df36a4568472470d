#include "lidet/attacks.hpp"

#include "lidet/characteristics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>

namespace lidet {

namespace {

void require_correct(const Network& net, const Vector& x, Eigen::Index label) {
  if (predict(net, x) != label) throw ValidationError("attack input is not correctly classified");
}

Vector clip(const Vector& v, const AttackConfig& cfg) { return v.cwiseMax(cfg.clip_min).cwiseMin(cfg.clip_max); }

AttackOutcome make_outcome(const Network& net, const Vector& x, Eigen::Index label, Vector adv,
                           std::size_t iterations, AttackStatus status) {
  AttackOutcome out;
  out.success = predict(net, adv) != label;
  if (out.success) status = AttackStatus::misclassified;
  out.l2_perturbation = l2_distance(adv, x);
  out.changed_features = count_changed(adv, x);
  out.iterations_used = iterations;
  out.status = status;
  out.adversarial = std::move(adv);
  return out;
}

AttackOutcome iterative_method(const Network& net, const Vector& x, Eigen::Index label, const AttackConfig& cfg,
                               bool stop_early) {
  cfg.validate();
  require_correct(net, x, label);
  if (cfg.max_iters == 0) throw ValidationError("BIM needs at least one iteration");
  const double step = cfg.epsilon / static_cast<double>(cfg.max_iters);
  const Objective loss = Objective::cross_entropy(label);
  Vector adv = x;
  std::size_t iters = 0;
  AttackStatus status = AttackStatus::budget_exhausted;
  while (iters < cfg.max_iters) {
    const Vector g = input_gradient(net, adv, loss);
    const double norm = g.norm();
    if (norm == 0.0) {
      status = AttackStatus::no_direction;
      break;
    }
    adv = clip(adv + (step / norm) * g, cfg);
    ++iters;
    if (stop_early && predict(net, adv) != label) break;
  }
  return make_outcome(net, x, label, std::move(adv), iters, status);
}

/// Adversarial part of an optimization objective at x': the
/// constant-weighted gradient plus the predicted class at x'.
struct AdversarialTerm {
  Vector gradient;
  Eigen::Index predicted = 0;
};
using TermFn = std::function<AdversarialTerm(const Vector& candidate, double constant)>;

/// Change-of-variables Adam descent on |x' - x|^2 + term, with the
/// constant chosen by ConstantSearch. Returns the smallest-norm
/// misclassifying iterate over all constants. Exceptions from `term`
/// propagate.
AttackOutcome constant_search_descent(const Network& net, const Vector& x, Eigen::Index label,
                                      const AttackConfig& cfg, const ConstantSearch& search, const TermFn& term) {
  const double span = cfg.clip_max - cfg.clip_min;
  const double edge = 1.0 - 1e-6;
  const Vector w0 = (((x.array() - cfg.clip_min) / span) * 2.0 - 1.0).cwiseMax(-edge).cwiseMin(edge).atanh().matrix();
  auto to_input = [&](const Vector& w) -> Vector {
    return (cfg.clip_min + span * 0.5 * (w.array().tanh() + 1.0)).matrix();
  };

  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double lo = search.lo, hi = search.hi;
  double constant = std::clamp(search.initial, search.lo, search.hi);
  bool found_upper = false;

  std::optional<Vector> best;
  double best_norm = std::numeric_limits<double>::infinity();
  std::size_t total_iters = 0;

  for (std::size_t step = 0; step < search.steps; ++step) {
    Vector w = w0;
    Vector m = Vector::Zero(w.size()), v = Vector::Zero(w.size());
    bool succeeded = false;
    auto record = [&](const Vector& candidate, Eigen::Index predicted) {
      if (predicted == label) return;
      succeeded = true;
      const double norm = l2_distance(candidate, x);
      if (norm < best_norm) {
        best_norm = norm;
        best = candidate;
      }
    };
    for (std::size_t it = 1; it <= cfg.opt_iterations; ++it) {
      const Vector candidate = to_input(w);
      const AdversarialTerm t = term(candidate, constant);
      record(candidate, t.predicted);
      ++total_iters;
      const Vector grad_input = 2.0 * (candidate - x) + t.gradient;
      const Vector dinput_dw = (span * 0.5 * (1.0 - w.array().tanh().square())).matrix();
      const Vector g = grad_input.cwiseProduct(dinput_dw);
      m = beta1 * m + (1.0 - beta1) * g;
      v = beta2 * v + (1.0 - beta2) * g.cwiseAbs2();
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(it));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(it));
      w.array() -= cfg.opt_learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + adam_eps);
    }
    const Vector final_candidate = to_input(w);
    record(final_candidate, predict(net, final_candidate));

    if (succeeded) {
      hi = std::min(hi, constant);
      found_upper = true;
      constant = 0.5 * (lo + hi);
    } else {
      lo = std::max(lo, constant);
      constant = found_upper ? 0.5 * (lo + hi) : std::min(constant * 10.0, search.hi);
    }
  }

  if (!best) return make_outcome(net, x, label, x, total_iters, AttackStatus::budget_exhausted);
  return make_outcome(net, x, label, *best, total_iters, AttackStatus::misclassified);
}

}  // namespace

std::string to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::fgm: return "fgm";
    case AttackKind::bim_a: return "bim_a";
    case AttackKind::bim_b: return "bim_b";
    case AttackKind::jsma: return "jsma";
    case AttackKind::opt: return "opt";
    case AttackKind::adaptive_opt: return "adaptive_opt";
  }
  return "?";
}

AttackKind attack_kind_from_string(const std::string& name) {
  for (AttackKind k : {AttackKind::fgm, AttackKind::bim_a, AttackKind::bim_b, AttackKind::jsma, AttackKind::opt,
                       AttackKind::adaptive_opt})
    if (to_string(k) == name) return k;
  throw ValidationError("unknown attack kind '" + name + "'");
}

std::string to_string(AttackStatus status) {
  switch (status) {
    case AttackStatus::misclassified: return "misclassified";
    case AttackStatus::budget_exhausted: return "budget_exhausted";
    case AttackStatus::no_direction: return "no_direction";
    case AttackStatus::features_exhausted: return "features_exhausted";
  }
  return "?";
}

void AttackConfig::validate() const {
  if (!(epsilon > 0.0)) throw ValidationError("attack epsilon must be positive");
  if (!(clip_min < clip_max)) throw ValidationError("clip range must be ordered");
  for (const ConstantSearch* s : {&opt_search, &alpha_search})
    if (!(s->lo > 0.0 && s->lo <= s->hi)) throw ValidationError("constant search range must be positive and ordered");
  if (opt_learning_rate <= 0.0) throw ValidationError("opt learning rate must be positive");
}

std::size_t count_changed(const Vector& a, const Vector& b) {
  std::size_t n = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) ++n;
  return n;
}

AttackOutcome fgm(const Network& net, const Vector& x, Eigen::Index label, const AttackConfig& cfg) {
  cfg.validate();
  require_correct(net, x, label);
  const Vector g = input_gradient(net, x, Objective::cross_entropy(label));
  const double norm = g.norm();
  if (norm == 0.0) throw NoDirectionError("FGM: loss gradient is zero");
  const Vector step = cfg.fgm_sign ? Vector(cfg.epsilon * g.array().sign().matrix()) : Vector((cfg.epsilon / norm) * g);
  return make_outcome(net, x, label, clip(x + step, cfg), 1, AttackStatus::budget_exhausted);
}

AttackOutcome bim_a(const Network& net, const Vector& x, Eigen::Index label, const AttackConfig& cfg) {
  return iterative_method(net, x, label, cfg, true);
}

AttackOutcome bim_b(const Network& net, const Vector& x, Eigen::Index label, const AttackConfig& cfg) {
  return iterative_method(net, x, label, cfg, false);
}

std::optional<double> jsma_pair_score(double target_sum, double other_sum, bool increase) {
  if (increase) {
    if (target_sum > 0.0 && other_sum < 0.0) return target_sum * -other_sum;
  } else {
    if (target_sum < 0.0 && other_sum > 0.0) return -target_sum * other_sum;
  }
  return std::nullopt;
}

std::optional<JsmaChoice> jsma_select_pair(const Vector& target_grad, const Vector& other_grad, const Vector& x,
                                           const std::vector<bool>& searchable, double clip_min, double clip_max) {
  const Eigen::Index n = x.size();
  for (bool increase : {true, false}) {
    std::optional<JsmaChoice> best;
    auto admissible = [&](Eigen::Index i) {
      if (!searchable[static_cast<std::size_t>(i)]) return false;
      return increase ? x[i] < clip_max : x[i] > clip_min;
    };
    for (Eigen::Index p = 0; p < n; ++p) {
      if (!admissible(p)) continue;
      for (Eigen::Index q = p + 1; q < n; ++q) {
        if (!admissible(q)) continue;
        const auto score = jsma_pair_score(target_grad[p] + target_grad[q], other_grad[p] + other_grad[q], increase);
        if (score && (!best || *score > best->score)) best = JsmaChoice{p, q, increase, *score};
      }
    }
    if (best) return best;
  }
  return std::nullopt;
}

AttackOutcome jsma(const Network& net, const Vector& x, Eigen::Index label, const AttackConfig& cfg) {
  cfg.validate();
  require_correct(net, x, label);
  const ActivationStack clean = forward_capture(net, x);
  const Vector& z = clean.logits();
  Eigen::Index target = label == 0 ? 1 : 0;
  for (Eigen::Index j = 0; j < z.size(); ++j)
    if (j != label && z[j] > z[target]) target = j;

  Vector adv = x;
  std::vector<bool> searchable(static_cast<std::size_t>(x.size()), true);
  std::size_t iters = 0;
  AttackStatus status = AttackStatus::budget_exhausted;
  while (iters < cfg.max_iters) {
    const Matrix jac = logit_jacobian(net, adv);
    const Vector target_grad = jac.row(target).transpose();
    const Vector other_grad = jac.colwise().sum().transpose() - target_grad;
    const auto choice = jsma_select_pair(target_grad, other_grad, adv, searchable, cfg.clip_min, cfg.clip_max);
    if (!choice) {
      status = AttackStatus::features_exhausted;
      break;
    }
    const double value = choice->increase ? cfg.clip_max : cfg.clip_min;
    adv[choice->first] = value;
    adv[choice->second] = value;
    searchable[static_cast<std::size_t>(choice->first)] = false;
    searchable[static_cast<std::size_t>(choice->second)] = false;
    ++iters;
    if (predict(net, adv) != label) break;
  }
  return make_outcome(net, x, label, std::move(adv), iters, status);
}

AttackOutcome opt_l2(const Network& net, const Vector& x, Eigen::Index label, const AttackConfig& cfg) {
  cfg.validate();
  require_correct(net, x, label);
  const Objective margin = Objective::logit_margin(label);
  auto term = [&](const Vector& candidate, double c) {
    ValueAndGradient vg = value_and_input_gradient(net, candidate, margin);
    AdversarialTerm t;
    t.predicted = vg.activations.predicted_class;
    t.gradient = vg.value > 0.0 ? Vector(c * vg.gradient) : Vector(Vector::Zero(candidate.size()));
    return t;
  };
  return constant_search_descent(net, x, label, cfg, cfg.opt_search, term);
}

AttackOutcome adaptive_opt_lid(const Network& net, const Vector& x, Eigen::Index label, const Minibatch& refs,
                               const AttackConfig& cfg, const Minibatch* fallback_refs) {
  cfg.validate();
  require_correct(net, x, label);
  const std::size_t layer = net.pre_softmax_index();
  auto activations_of = [&](const Minibatch& batch) {
    if (batch.dim() != net.input_dim()) throw InputShapeError("adaptive attack references must be network inputs");
    RowMatrix acts(batch.size(), net.num_classes());
    for (Eigen::Index r = 0; r < batch.size(); ++r)
      acts.row(r) = forward_capture(net, batch.vectors().row(r).transpose()).per_layer[layer].transpose();
    return acts;
  };
  const RowMatrix primary = activations_of(refs);
  const RowMatrix fallback = fallback_refs ? activations_of(*fallback_refs) : RowMatrix();
  const std::size_t k = cfg.adaptive_k;
  if (k < 1 || static_cast<Eigen::Index>(k) > refs.size())
    throw RangeError("adaptive_k must lie in [1, |refs|]");

  // Switches to the fallback set after the first degenerate profile.
  const RowMatrix* active = &primary;
  auto lid_term = [&](const ActivationStack& stack, Vector& grad) -> double {
    const Vector& z = stack.per_layer[layer];
    DistanceProfile profile;
    try {
      profile = knn_profile(z, *active, k, std::nullopt);
      mle_lid_value<double>(profile.distances);
    } catch (const DegenerateProfileError&) {
      if (active == &fallback || fallback.rows() == 0) throw;
      active = &fallback;
      profile = knn_profile(z, *active, k, std::nullopt);
    } catch (const InfiniteEstimateError&) {
      if (active == &fallback || fallback.rows() == 0) throw DegenerateProfileError("degenerate adaptive LID profile");
      active = &fallback;
      profile = knn_profile(z, *active, k, std::nullopt);
    }
    const double r_k = profile.distances.back();
    double sum = 0.0;
    for (double r : profile.distances) sum += std::log(r / r_k);
    if (!(sum < 0.0)) throw InfiniteEstimateError("adaptive LID profile has no spread");
    const double kk = static_cast<double>(k);
    const double lid = -kk / sum;
    // d sum / dz, neighbor set frozen.
    Vector dsum = Vector::Zero(z.size());
    for (std::size_t i = 0; i < profile.k(); ++i) {
      const double r = profile.distances[i];
      dsum += (z - active->row(profile.neighbors[i]).transpose()) / (r * r);
    }
    const Eigen::Index kth = profile.neighbors.back();
    dsum -= kk * (z - active->row(kth).transpose()) / (r_k * r_k);
    grad += (kk / (sum * sum)) * dsum;
    return lid;
  };
  const Objective lid_objective = Objective::custom(layer, lid_term);
  const Objective margin = Objective::logit_margin(label);

  // Opt's objective plus alpha * LID, with Opt's own search over c. The
  // alpha search keeps the largest alpha that still misclassifies.
  const ConstantSearch& search = cfg.alpha_search;
  double lo = search.lo, hi = search.hi;
  double alpha = std::clamp(search.initial, search.lo, search.hi);
  bool found_failure = false;
  std::optional<AttackOutcome> best;
  double best_alpha = 0.0;
  std::size_t total_iters = 0;
  for (std::size_t step = 0; step < search.steps; ++step) {
    auto term = [&, alpha](const Vector& candidate, double c) {
      const ValueAndGradient lid = value_and_input_gradient(net, candidate, lid_objective);
      const ValueAndGradient vg = value_and_input_gradient(net, candidate, margin);
      Vector grad = alpha * lid.gradient;
      if (vg.value > 0.0) grad += c * vg.gradient;
      return AdversarialTerm{std::move(grad), vg.activations.predicted_class};
    };
    bool succeeded = false;
    try {
      AttackOutcome out = constant_search_descent(net, x, label, cfg, cfg.opt_search, term);
      total_iters += out.iterations_used;
      if (out.success) {
        succeeded = true;
        if (!best || alpha > best_alpha) {
          best = std::move(out);
          best_alpha = alpha;
        }
      }
    } catch (const DegenerateProfileError&) {
    } catch (const InfiniteEstimateError&) {
    }
    const double previous = alpha;
    if (succeeded) {
      lo = std::max(lo, alpha);
      alpha = found_failure ? 0.5 * (lo + hi) : std::min(alpha * 10.0, search.hi);
    } else {
      hi = std::min(hi, alpha);
      found_failure = true;
      alpha = 0.5 * (lo + hi);
    }
    if (alpha == previous) break;
  }
  if (!best) return make_outcome(net, x, label, x, total_iters, AttackStatus::budget_exhausted);
  best->iterations_used = total_iters;
  return *best;
}

AttackOutcome run_attack(const Network& net, const Vector& x, Eigen::Index label, const AttackConfig& cfg,
                         const Minibatch* refs) {
  switch (cfg.kind) {
    case AttackKind::fgm: return fgm(net, x, label, cfg);
    case AttackKind::bim_a: return bim_a(net, x, label, cfg);
    case AttackKind::bim_b: return bim_b(net, x, label, cfg);
    case AttackKind::jsma: return jsma(net, x, label, cfg);
    case AttackKind::opt: return opt_l2(net, x, label, cfg);
    case AttackKind::adaptive_opt:
      if (!refs) throw ValidationError("adaptive attack needs a reference minibatch");
      return adaptive_opt_lid(net, x, label, *refs, cfg);
  }
  throw ValidationError("unknown attack kind");
}

std::string to_string(NoiseStyle style) {
  return style == NoiseStyle::gaussian_l2 ? "gaussian_l2" : "minmax_pixels";
}

NoiseStyle noise_style_from_string(const std::string& name) {
  if (name == "gaussian_l2") return NoiseStyle::gaussian_l2;
  if (name == "minmax_pixels") return NoiseStyle::minmax_pixels;
  throw ValidationError("unknown noise style '" + name + "'");
}

Vector gaussian_perturbation(Eigen::Index dim, double norm, Seed seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector z(dim);
  do {
    for (Eigen::Index i = 0; i < dim; ++i) z[i] = normal(rng);
  } while (z.norm() == 0.0);
  return z * (norm / z.norm());
}

Vector matched_noise(const Vector& x, const AttackOutcome& adv, NoiseStyle style, Seed seed, double clip_min,
                     double clip_max) {
  if (!adv.success) throw ValidationError("noise is matched only to successful adversarial examples");
  if (!(adv.l2_perturbation > 0.0)) throw ZeroPerturbationError("adversarial perturbation has zero norm");
  if (style == NoiseStyle::gaussian_l2) {
    const Vector noisy = x + gaussian_perturbation(x.size(), adv.l2_perturbation, seed);
    return noisy.cwiseMax(clip_min).cwiseMin(clip_max);
  }
  const std::size_t changed = adv.changed_features;
  const auto picks = sample_indices(static_cast<std::size_t>(x.size()), changed, seed);
  std::mt19937_64 coin(seed ^ 0x5bd1e995ULL);
  std::bernoulli_distribution high(0.5);
  Vector noisy = x;
  for (std::size_t i : picks) noisy[static_cast<Eigen::Index>(i)] = high(coin) ? clip_max : clip_min;
  return noisy;
}

}  // namespace lidet
