#pragma once

#include <functional>
#include <span>
#include <vector>

#include "sm3/tape.hpp"

namespace sm3 {

inline constexpr double kNormGuard = 1e-12;

struct CosineResult {
  double value = 0.0;
  /// Set when either input had norm below the guard; value is then 0.
  bool degenerate = false;
};

/// u.v / (|u| |v|). Inputs with norm below kNormGuard give 0 and set the
/// degenerate flag.
CosineResult cosine_similarity(std::span<const double> u, std::span<const double> v);

/// softmax(v / temperature), max-shifted.
std::vector<double> softmax(std::span<const double> v, double temperature = 1.0);

/// Row-wise softmax of a matrix (not recorded on any tape).
Matrix softmax_rows(const Matrix& logits);

/// Builds a scalar on the given tape from the parameters it closes over.
using ScalarFunction = std::function<Var(Tape&)>;

struct GradCheckReport {
  double max_relative_error = 0.0;
  double max_abs_analytic = 0.0;
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of `f` with central differences
/// (f(x+eps) - f(x-eps)) / (2 eps), coordinate by coordinate over every
/// entry of every parameter. Relative error uses the denominator
/// max(|analytic|, |numeric|, 1e-8). Throws NonFiniteError when f is not
/// finite at any probe point. Parameter values are restored on return.
GradCheckReport grad_check_report(const ScalarFunction& f, std::span<Parameter* const> params,
                                  double eps = 1e-5);

double grad_check(const ScalarFunction& f, std::span<Parameter* const> params, double eps = 1e-5);

}  // namespace sm3
