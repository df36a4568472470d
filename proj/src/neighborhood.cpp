#include "lidet/neighborhood.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <unordered_set>

namespace lidet {

std::string to_string(Source source) {
  switch (source) {
    case Source::normal: return "normal";
    case Source::adversarial: return "adversarial";
    case Source::noisy: return "noisy";
  }
  return "?";
}

Minibatch::Minibatch(std::vector<std::size_t> member_ids, RowMatrix vectors, Source source)
    : ids_(std::move(member_ids)), vectors_(std::move(vectors)), source_(source) {
  if (static_cast<Eigen::Index>(ids_.size()) != vectors_.rows())
    throw ValidationError("minibatch id count does not match its row count");
  if (ids_.size() < 2) throw ValidationError("minibatch needs at least two members");
  std::unordered_set<std::size_t> seen;
  for (std::size_t id : ids_)
    if (!seen.insert(id).second) throw ValidationError("duplicate id " + std::to_string(id) + " in minibatch");
  if (!vectors_.allFinite()) throw ValidationError("minibatch contains non-finite values");
}

std::optional<Eigen::Index> Minibatch::position_of(std::size_t id) const {
  const auto it = std::find(ids_.begin(), ids_.end(), id);
  if (it == ids_.end()) return std::nullopt;
  return static_cast<Eigen::Index>(it - ids_.begin());
}

std::vector<std::size_t> sample_indices(std::size_t population, std::size_t size, Seed seed) {
  if (size > population)
    throw RangeError("cannot sample " + std::to_string(size) + " of " + std::to_string(population) + " items");
  std::vector<std::size_t> pool(population);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, population - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(size);
  return pool;
}

Minibatch sample_minibatch(const RowMatrix& dataset, std::size_t size, Seed seed, Source source) {
  std::vector<std::size_t> ids = sample_indices(static_cast<std::size_t>(dataset.rows()), size, seed);
  RowMatrix rows(static_cast<Eigen::Index>(size), dataset.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) rows.row(static_cast<Eigen::Index>(r)) = dataset.row(static_cast<Eigen::Index>(ids[r]));
  return Minibatch(std::move(ids), std::move(rows), source);
}

DistanceProfile knn_profile(const Eigen::Ref<const Vector>& query, const RowMatrix& refs, std::size_t k,
                            std::optional<Eigen::Index> self_position) {
  if (query.size() != refs.cols())
    throw InputShapeError("query dimension " + std::to_string(query.size()) + " does not match references (" +
                          std::to_string(refs.cols()) + ")");
  const auto n = static_cast<std::size_t>(refs.rows());
  const std::size_t available = self_position ? n - 1 : n;
  if (k < 1 || k > available)
    throw RangeError("k = " + std::to_string(k) + " outside [1, " + std::to_string(available) + "]");

  std::vector<std::pair<double, Eigen::Index>> all;
  all.reserve(available);
  for (Eigen::Index j = 0; j < refs.rows(); ++j) {
    if (self_position && j == *self_position) continue;
    all.emplace_back(l2_distance(refs.row(j).transpose(), query), j);
  }
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end());

  DistanceProfile profile;
  profile.distances.reserve(k);
  profile.neighbors.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    profile.distances.push_back(all[i].first);
    profile.neighbors.push_back(all[i].second);
  }
  if (profile.distances.back() <= 0.0)
    throw DegenerateProfileError("query duplicates at least k reference points (r_k = 0)");
  return profile;
}

DistanceProfile knn_profile_distinct(const Eigen::Ref<const Vector>& query, const RowMatrix& refs, std::size_t k,
                                     std::optional<Eigen::Index> self_position) {
  if (query.size() != refs.cols())
    throw InputShapeError("query dimension " + std::to_string(query.size()) + " does not match references (" +
                          std::to_string(refs.cols()) + ")");
  if (k < 1) throw RangeError("k must be positive");
  std::vector<std::pair<double, Eigen::Index>> all;
  std::size_t duplicates = 0;
  for (Eigen::Index j = 0; j < refs.rows(); ++j) {
    if (self_position && j == *self_position) continue;
    const double d = l2_distance(refs.row(j).transpose(), query);
    if (d == 0.0)
      ++duplicates;
    else
      all.emplace_back(d, j);
  }
  if (k > all.size() + duplicates)
    throw RangeError("k = " + std::to_string(k) + " outside [1, " + std::to_string(all.size() + duplicates) + "]");
  if (k > all.size())
    throw DegenerateProfileError("fewer than k references differ from the query");
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end());
  DistanceProfile profile;
  profile.skipped_duplicates = duplicates;
  for (std::size_t i = 0; i < k; ++i) {
    profile.distances.push_back(all[i].first);
    profile.neighbors.push_back(all[i].second);
  }
  return profile;
}

DistanceProfile knn_profile(const Eigen::Ref<const Vector>& query, const Minibatch& refs, std::size_t k,
                            bool exclude_self, std::optional<std::size_t> query_id) {
  std::optional<Eigen::Index> self;
  if (exclude_self) {
    if (query_id) {
      self = refs.position_of(*query_id);
    } else {
      for (Eigen::Index j = 0; j < refs.size(); ++j)
        if (l2_distance(refs.vectors().row(j).transpose(), query) == 0.0) {
          self = j;
          break;
        }
    }
  }
  DistanceProfile profile = knn_profile(query, refs.vectors(), k, self);
  profile.query_id = query_id;
  return profile;
}

}  // namespace lidet
