#include "sm3/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>

#include "sm3/errors.hpp"

namespace sm3 {

std::size_t shape_product(std::span<const std::size_t> shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

void check_shape(const std::vector<std::size_t>& shape) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive");
  }
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  values_.assign(shape_product(shape_), fill);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  check_shape(shape_);
  if (values_.size() != shape_product(shape_)) {
    throw ShapeError("tensor value count does not match shape");
  }
}

Tensor Tensor::from_matrix(const Matrix& m) {
  std::vector<double> values(m.data(), m.data() + m.size());
  return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                std::move(values));
}

Matrix Tensor::to_matrix() const {
  if (rank() == 1) {
    return Eigen::Map<const Matrix>(values_.data(), 1, static_cast<Eigen::Index>(shape_[0]));
  }
  if (rank() != 2) throw ShapeError("to_matrix requires a rank-1 or rank-2 tensor");
  return Eigen::Map<const Matrix>(values_.data(), static_cast<Eigen::Index>(shape_[0]),
                                  static_cast<Eigen::Index>(shape_[1]));
}

bool Tensor::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

void round_to_float(Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
  }
}

}  // namespace sm3
