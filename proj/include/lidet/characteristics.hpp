#pragma once

#include "lidet/common.hpp"
#include "lidet/neighborhood.hpp"
#include "lidet/network.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace lidet {

/// Maximum-likelihood LID from ascending k-NN distances:
///   -( (1/k) sum_i ln(r_i / r_k) )^-1
/// Throws DegenerateProfileError on a zero distance and InfiniteEstimateError
/// when every r_i equals r_k.
template <typename Scalar>
Scalar mle_lid_value(std::span<const Scalar> distances) {
  if (distances.empty()) throw RangeError("empty distance profile");
  const Scalar r_k = distances.back();
  Scalar sum(0);
  for (const Scalar r : distances) {
    if (!(r > Scalar(0))) throw DegenerateProfileError("zero neighbor distance in LID profile");
    using std::log;
    sum += log(r / r_k);
  }
  if (sum == Scalar(0)) throw InfiniteEstimateError("all neighbor distances equal r_k; LID is unbounded");
  const Scalar k(static_cast<double>(distances.size()));
  return -k / sum;
}

struct LidEstimate {
  double value = 0.0;
  std::size_t k = 0;
  std::size_t layer_index = 0;
};

LidEstimate mle_lid(const DistanceProfile& profile, std::size_t layer_index = 0);

struct KdConfig {
  double bandwidth_sigma = 1.0;
};

/// Mean unnormalized Gaussian kernel exp(-|q - r|^2 / sigma^2) over the
/// rows of `class_refs`. Lies in (0, 1].
double kernel_density(const Eigen::Ref<const Vector>& query, const RowMatrix& class_refs,
                      const KdConfig& cfg);

struct BuConfig {
  std::size_t num_runs = 50;
  Seed base_seed = 0;
};

/// Mean over classes of the sample variance (T - 1 denominator) of the
/// softmax output across T stochastic-dropout passes seeded
/// base_seed, ..., base_seed + T - 1.
double bayes_uncertainty(const Network& net, const Eigen::Ref<const Vector>& x, const BuConfig& cfg);

/// (v - min) / (max - min); a constant list maps to zeros.
std::vector<double> minmax_normalize(std::span<const double> values);

}  // namespace lidet
