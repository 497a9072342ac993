#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace sm3 {

/// Dense row-major matrix used for every computation on the tape.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IndexMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense n-dimensional array with an optional gradient buffer of the same
/// shape. Used for samples, dataset storage and checkpoint tensors.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor from_matrix(const Matrix& m);
  /// Rank-1 tensors become a single row; rank-2 map directly.
  Matrix to_matrix() const;

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  bool all_finite() const;

  std::optional<std::vector<double>>& grad() { return grad_; }
  const std::optional<std::vector<double>>& grad() const { return grad_; }
  void zero_grad() { grad_.emplace(values_.size(), 0.0); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
  std::optional<std::vector<double>> grad_;
};

std::size_t shape_product(std::span<const std::size_t> shape);

bool all_finite(const Matrix& m);

/// Rounds every entry to the nearest 32-bit float. Stored parameters and
/// dataset values are kept float-representable so that 32-bit blobs
/// round-trip bitwise.
void round_to_float(Matrix& m);

}  // namespace sm3
