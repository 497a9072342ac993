#include "sm3/functional.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace sm3 {

CosineResult cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw ShapeError("cosine_similarity: length mismatch");
  double dot = 0.0;
  double uu = 0.0;
  double vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (!std::isfinite(dot) || !std::isfinite(uu) || !std::isfinite(vv)) {
    throw NonFiniteError("cosine_similarity: non-finite input");
  }
  double nu = std::sqrt(uu);
  double nv = std::sqrt(vv);
  if (nu < kNormGuard || nv < kNormGuard) return {0.0, true};
  double c = dot / (nu * nv);
  return {std::clamp(c, -1.0, 1.0), false};
}

std::vector<double> softmax(std::span<const double> v, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("softmax: temperature must be positive");
  if (v.empty()) return {};
  for (double x : v) {
    if (!std::isfinite(x)) throw NonFiniteError("softmax: non-finite input");
  }
  double m = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp((v[i] - m) / temperature);
    total += out[i];
  }
  for (double& x : out) x /= total;
  return out;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double m = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - m).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

namespace {

double evaluate(const ScalarFunction& f) {
  Tape tape;
  double value = f(tape).item();
  if (!std::isfinite(value)) throw NonFiniteError("grad_check: function is not finite at a probe point");
  return value;
}

}  // namespace

GradCheckReport grad_check_report(const ScalarFunction& f, std::span<Parameter* const> params,
                                  double eps) {
  if (!(eps > 0.0)) throw ValidationError("grad_check: eps must be positive");
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var out = f(tape);
    if (!std::isfinite(out.item())) throw NonFiniteError("grad_check: function is not finite");
    tape.backward(out);
  }
  GradCheckReport report;
  for (Parameter* p : params) {
    Matrix analytic = p->has_grad ? p->grad : Matrix::Zero(p->value.rows(), p->value.cols());
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double saved = x;
      x = saved + eps;
      double up = evaluate(f);
      x = saved - eps;
      double down = evaluate(f);
      x = saved;
      double numeric = (up - down) / (2.0 * eps);
      double a = analytic.data()[i];
      double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      report.max_relative_error = std::max(report.max_relative_error, std::abs(a - numeric) / denom);
      report.max_abs_analytic = std::max(report.max_abs_analytic, std::abs(a));
      ++report.coordinates;
    }
  }
  return report;
}

double grad_check(const ScalarFunction& f, std::span<Parameter* const> params, double eps) {
  return grad_check_report(f, params, eps).max_relative_error;
}

}  // namespace sm3
