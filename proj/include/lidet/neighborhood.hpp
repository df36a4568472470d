#pragma once

#include "lidet/common.hpp"

#include <optional>
#include <string>
#include <vector>

namespace lidet {

/// Euclidean distance between two equally sized vectors.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar l2_distance(const Eigen::MatrixBase<DerivedA>& a,
                                      const Eigen::MatrixBase<DerivedB>& b) {
  if (a.size() != b.size())
    throw InputShapeError("l2_distance: dimensions " + std::to_string(a.size()) + " and " +
                          std::to_string(b.size()) + " differ");
  typename DerivedA::Scalar sum(0);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const auto d = a.derived().coeff(i) - b.derived().coeff(i);
    sum += d * d;
  }
  using std::sqrt;
  return sqrt(sum);
}

enum class Source { normal, adversarial, noisy };

std::string to_string(Source source);

/// A reference sample of examples (or of their activations at one layer).
/// Row r of `vectors()` belongs to dataset index `member_ids()[r]`.
class Minibatch {
 public:
  /// Throws ValidationError on duplicate ids, non-finite values, a size
  /// below 2, or an id count that does not match the row count.
  Minibatch(std::vector<std::size_t> member_ids, RowMatrix vectors, Source source = Source::normal);

  const std::vector<std::size_t>& member_ids() const { return ids_; }
  const RowMatrix& vectors() const { return vectors_; }
  Source source() const { return source_; }
  Eigen::Index size() const { return vectors_.rows(); }
  Eigen::Index dim() const { return vectors_.cols(); }

  /// Row position of a dataset id, if it is a member.
  std::optional<Eigen::Index> position_of(std::size_t id) const;

 private:
  std::vector<std::size_t> ids_;
  RowMatrix vectors_;
  Source source_;
};

/// Uniform sample of `size` rows without replacement, in draw order.
Minibatch sample_minibatch(const RowMatrix& dataset, std::size_t size, Seed seed,
                           Source source = Source::normal);

/// Index-only variant: a uniform `size`-subset of [0, population), in draw order.
std::vector<std::size_t> sample_indices(std::size_t population, std::size_t size, Seed seed);

struct DistanceProfile {
  std::optional<std::size_t> query_id;
  /// r_1 <= ... <= r_k
  std::vector<double> distances;
  /// Row positions in the reference minibatch, aligned with `distances`.
  std::vector<Eigen::Index> neighbors;
  /// Members at distance exactly zero left out by knn_profile_distinct.
  std::size_t skipped_duplicates = 0;

  std::size_t k() const { return distances.size(); }
};

/// The k smallest distances from `query` to the members of `refs`, ascending,
/// ties broken by lower row position.
///
/// With `exclude_self`, the query's own member is skipped: the member whose
/// id equals `query_id` when one is given, otherwise the first member at
/// distance exactly zero. Throws RangeError when k is outside [1, available]
/// and DegenerateProfileError when r_k is zero.
DistanceProfile knn_profile(const Eigen::Ref<const Vector>& query, const Minibatch& refs, std::size_t k,
                            bool exclude_self, std::optional<std::size_t> query_id = std::nullopt);

/// Overload taking an unwrapped reference matrix (rows are members).
DistanceProfile knn_profile(const Eigen::Ref<const Vector>& query, const RowMatrix& refs, std::size_t k,
                            std::optional<Eigen::Index> self_position);

/// As above, but members at distance exactly zero from the query are left
/// out, so the profile is built from the k nearest distinct points. ReLU
/// layers map whole input regions to one activation; this keeps LID defined
/// there. Throws DegenerateProfileError when fewer than k distinct members
/// remain.
DistanceProfile knn_profile_distinct(const Eigen::Ref<const Vector>& query, const RowMatrix& refs, std::size_t k,
                                     std::optional<Eigen::Index> self_position);

}  // namespace lidet
