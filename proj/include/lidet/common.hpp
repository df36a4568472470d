#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace lidet {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
/// Rows are examples, columns are features.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Seed = std::uint64_t;

// Error hierarchy. ValidationError covers bad inputs and configuration
// (CLI exit code 1); everything else derived from Error is a runtime
// failure (exit code 2).

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class InputShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class RangeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ParseError : public ValidationError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : ValidationError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class NumericOverflowError : public Error {
 public:
  using Error::Error;
};

class TrainingDivergedError : public Error {
 public:
  TrainingDivergedError(const std::string& what, std::size_t epoch)
      : Error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

/// A k-NN profile with r_k = 0 or some r_i = 0.
class DegenerateProfileError : public Error {
 public:
  using Error::Error;
};

/// All r_i equal r_k, so the log-ratio sum vanishes.
class InfiniteEstimateError : public Error {
 public:
  using Error::Error;
};

class NoDirectionError : public Error {
 public:
  using Error::Error;
};

class EmptyClassError : public Error {
 public:
  using Error::Error;
};

class ZeroPerturbationError : public Error {
 public:
  using Error::Error;
};

/// Labeled examples, one per row of `features`.
struct Dataset {
  RowMatrix features;
  std::vector<int> labels;

  Eigen::Index size() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }
  int num_classes() const {
    int hi = -1;
    for (int y : labels) hi = y > hi ? y : hi;
    return hi + 1;
  }
};

}  // namespace lidet
