#pragma once

#include "lidet/common.hpp"
#include "lidet/neighborhood.hpp"
#include "lidet/network.hpp"

#include <optional>
#include <string>
#include <vector>

namespace lidet {

enum class AttackKind { fgm, bim_a, bim_b, jsma, opt, adaptive_opt };

std::string to_string(AttackKind kind);
AttackKind attack_kind_from_string(const std::string& name);

/// Binary search over a positive trade-off constant. Starts at `initial`
/// clamped into [lo, hi]. Opt's c grows tenfold on failure until a first
/// success, then bisects toward the smallest succeeding value. The adaptive
/// attack's alpha mirrors this toward the largest succeeding value.
struct ConstantSearch {
  double lo = 1e-3;
  double hi = 1e6;
  double initial = 1.0;
  std::size_t steps = 8;
};

struct AttackConfig {
  AttackKind kind = AttackKind::fgm;
  /// FGM step length; total L2 budget for BIM (per-step epsilon / max_iters).
  double epsilon = 0.3;
  /// BIM iterations and JSMA pair budget.
  std::size_t max_iters = 50;
  double clip_min = 0.0;
  double clip_max = 1.0;
  /// Sign-gradient FGM instead of the L2-normalized step.
  bool fgm_sign = false;

  ConstantSearch opt_search{};
  std::size_t opt_iterations = 300;
  double opt_learning_rate = 0.01;

  ConstantSearch alpha_search{1e-3, 1e6, 1.0, 8};
  /// Neighborhood size of the LID term in the adaptive attack.
  std::size_t adaptive_k = 20;

  Seed seed = 0;

  /// Throws ValidationError on a non-positive epsilon or unordered ranges.
  void validate() const;
};

enum class AttackStatus { misclassified, budget_exhausted, no_direction, features_exhausted };

std::string to_string(AttackStatus status);

struct AttackOutcome {
  Vector adversarial;
  bool success = false;
  std::size_t iterations_used = 0;
  double l2_perturbation = 0.0;
  AttackStatus status = AttackStatus::budget_exhausted;
  /// Number of coordinates that differ from the clean input.
  std::size_t changed_features = 0;
};

AttackOutcome fgm(const Network& net, const Vector& x, Eigen::Index label, const AttackConfig& cfg);
AttackOutcome bim_a(const Network& net, const Vector& x, Eigen::Index label, const AttackConfig& cfg);
AttackOutcome bim_b(const Network& net, const Vector& x, Eigen::Index label, const AttackConfig& cfg);
AttackOutcome jsma(const Network& net, const Vector& x, Eigen::Index label, const AttackConfig& cfg);
AttackOutcome opt_l2(const Network& net, const Vector& x, Eigen::Index label, const AttackConfig& cfg);

/// Opt objective |d|^2 + c * hinge plus alpha * LID of the pre-softmax
/// activation, measured against the pre-softmax activations of `refs`
/// (normal inputs). For each alpha, c is searched as in opt_l2; alpha is
/// searched for the largest value that still misclassifies. k-NN membership
/// is recomputed before every descent step and held fixed while
/// differentiating. A degenerate profile switches to `fallback_refs` once;
/// a second one abandons the current alpha.
AttackOutcome adaptive_opt_lid(const Network& net, const Vector& x, Eigen::Index label, const Minibatch& refs,
                               const AttackConfig& cfg, const Minibatch* fallback_refs = nullptr);

/// Dispatch on cfg.kind. `refs` is required for adaptive_opt.
AttackOutcome run_attack(const Network& net, const Vector& x, Eigen::Index label, const AttackConfig& cfg,
                         const Minibatch* refs = nullptr);

/// JSMA saliency selection over one iteration.
struct JsmaChoice {
  Eigen::Index first = 0;
  Eigen::Index second = 0;
  bool increase = true;
  double score = 0.0;
};

/// Best admissible feature pair for pushing toward the target class.
///
/// `target_grad` is dZ_target/dx and `other_grad` the sum of dZ_j/dx over
/// j != target. Increasing pairs need a positive target sum and a negative
/// other sum, scored target * |other|; only when none exists are decreasing
/// pairs (mirrored signs) considered. Features outside `searchable`, or
/// already at the bound they would move to, are inadmissible. Ties keep the
/// lexicographically first pair.
std::optional<JsmaChoice> jsma_select_pair(const Vector& target_grad, const Vector& other_grad, const Vector& x,
                                           const std::vector<bool>& searchable, double clip_min, double clip_max);

/// Saliency score of one pair in one direction, or nullopt if the sign
/// conditions fail.
std::optional<double> jsma_pair_score(double target_sum, double other_sum, bool increase);

enum class NoiseStyle { gaussian_l2, minmax_pixels };

std::string to_string(NoiseStyle style);
NoiseStyle noise_style_from_string(const std::string& name);

/// Gaussian direction rescaled to L2 norm `norm` exactly (before clipping).
Vector gaussian_perturbation(Eigen::Index dim, double norm, Seed seed);

/// Noisy counterpart matched to a successful adversarial outcome.
/// gaussian_l2: clip(x + gaussian_perturbation(l2_perturbation)).
/// minmax_pixels: as many randomly chosen features as the adversarial
/// changed are set to clip_min or clip_max at random.
Vector matched_noise(const Vector& x, const AttackOutcome& adv, NoiseStyle style, Seed seed,
                     double clip_min = 0.0, double clip_max = 1.0);

std::size_t count_changed(const Vector& a, const Vector& b);

}  // namespace lidet
