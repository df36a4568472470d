#include "lidet/characteristics.hpp"

#include <algorithm>

namespace lidet {

LidEstimate mle_lid(const DistanceProfile& profile, std::size_t layer_index) {
  const double value = mle_lid_value<double>(profile.distances);
  if (!std::isfinite(value) || value <= 0.0)
    throw InfiniteEstimateError("LID estimate is not a finite positive number");
  return {value, profile.k(), layer_index};
}

double kernel_density(const Eigen::Ref<const Vector>& query, const RowMatrix& class_refs,
                      const KdConfig& cfg) {
  if (!(cfg.bandwidth_sigma > 0.0)) throw ValidationError("KD bandwidth must be positive");
  if (class_refs.rows() == 0) throw EmptyClassError("kernel density needs at least one reference");
  if (class_refs.cols() != query.size()) throw InputShapeError("kernel density: dimension mismatch");
  const double inv_var = 1.0 / (cfg.bandwidth_sigma * cfg.bandwidth_sigma);
  double total = 0.0;
  for (Eigen::Index j = 0; j < class_refs.rows(); ++j) {
    const double d2 = (class_refs.row(j).transpose() - query).squaredNorm();
    total += std::exp(-d2 * inv_var);
  }
  return total / static_cast<double>(class_refs.rows());
}

double bayes_uncertainty(const Network& net, const Eigen::Ref<const Vector>& x, const BuConfig& cfg) {
  if (cfg.num_runs < 2) throw ValidationError("Bayesian uncertainty needs at least two runs");
  const auto runs = static_cast<Eigen::Index>(cfg.num_runs);
  Matrix probs(runs, net.num_classes());
  for (Eigen::Index t = 0; t < runs; ++t)
    probs.row(t) = forward_capture(net, x, ForwardMode::stochastic(cfg.base_seed + static_cast<Seed>(t)))
                       .probs.transpose();
  const Eigen::RowVectorXd mean = probs.colwise().mean();
  const Eigen::RowVectorXd var =
      (probs.rowwise() - mean).array().square().colwise().sum() / static_cast<double>(runs - 1);
  return var.mean();
}

std::vector<double> minmax_normalize(std::span<const double> values) {
  std::vector<double> out(values.size(), 0.0);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  if (range <= 0.0) return out;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - *lo) / range;
  return out;
}

}  // namespace lidet
