#include "sm3/ops.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace sm3::ops {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

void same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
  }
}

Tape& tape_of(Var a) { return *a.tape(); }

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + ")");
  }
  Matrix out = a.value() * b.value();
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.requires_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

Var transpose(Var a) {
  Matrix out = a.value().transpose();
  return tape_of(a).record(std::move(out), {a},
                           [a](Tape& t, const Matrix& g) { t.accumulate(a, g.transpose()); });
}

Var add(Var a, Var b) {
  same_shape(a, b, "add");
  Matrix out = a.value() + b.value();
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  same_shape(a, b, "sub");
  Matrix out = a.value() - b.value();
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var hadamard(Var a, Var b) {
  same_shape(a, b, "hadamard");
  Matrix out = a.value().cwiseProduct(b.value());
  return tape_of(a).record(std::move(out), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
    if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var scale(Var a, double s) {
  Matrix out = a.value() * s;
  return tape_of(a).record(std::move(out), {a},
                           [a, s](Tape& t, const Matrix& g) { t.accumulate(a, g * s); });
}

Var add_row(Var a, Var row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: row must be 1 x cols(a)");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return tape_of(a).record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

Var mul_row(Var a, Var row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "mul_row: row must be 1 x cols(a)");
  Matrix out = a.value().array().rowwise() * row.value().row(0).array();
  return tape_of(a).record(std::move(out), {a, row}, [a, row](Tape& t, const Matrix& g) {
    if (t.requires_grad(a)) {
      Matrix ga = g.array().rowwise() * row.value().row(0).array();
      t.accumulate(a, ga);
    }
    if (t.requires_grad(row)) t.accumulate(row, g.cwiseProduct(a.value()).colwise().sum());
  });
}

Var relu(Var a) {
  Matrix out = a.value().cwiseMax(0.0);
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    Matrix ga = (a.value().array() > 0.0).select(g, 0.0);
    t.accumulate(a, ga);
  });
}

Var tanh(Var a) {
  Matrix out = a.value().array().tanh().matrix();
  Matrix deriv = (1.0 - out.array().square()).matrix();
  return tape_of(a).record(std::move(out), {a}, [a, deriv = std::move(deriv)](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(deriv));
  });
}

Var dropout(Var a, double p, Rng& rng) {
  require(p >= 0.0 && p < 1.0, "dropout: probability must be in [0, 1)");
  Matrix mask(a.rows(), a.cols());
  const double keep = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = rng.bernoulli(p) ? 0.0 : keep;
  }
  Var m = tape_of(a).constant(std::move(mask));
  return hadamard(a, m);
}

Var normalize_rows(Var a, double eps) {
  const Matrix& x = a.value();
  Matrix norms(x.rows(), 1);
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    norms(i, 0) = std::max(x.row(i).norm(), eps);
    out.row(i) = x.row(i) / norms(i, 0);
  }
  Matrix y = out;
  return tape_of(a).record(
      std::move(out), {a},
      [a, y = std::move(y), norms = std::move(norms), eps](Tape& t, const Matrix& g) {
        const Matrix& x = a.value();
        Matrix ga(g.rows(), g.cols());
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
          double n = norms(i, 0);
          if (x.row(i).norm() > eps) {
            double dot = y.row(i).dot(g.row(i));
            ga.row(i) = (g.row(i) - y.row(i) * dot) / n;
          } else {
            ga.row(i) = g.row(i) / eps;
          }
        }
        t.accumulate(a, ga);
      });
}

Var layer_norm_rows(Var a, double eps) {
  const Matrix& x = a.value();
  const auto cols = static_cast<double>(x.cols());
  Matrix xhat(x.rows(), x.cols());
  Matrix inv_std(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mu = x.row(i).mean();
    double var = (x.row(i).array() - mu).square().sum() / cols;
    inv_std(i, 0) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.row(i).array() - mu) * inv_std(i, 0);
  }
  Matrix saved = xhat;
  return tape_of(a).record(
      std::move(xhat), {a},
      [a, saved = std::move(saved), inv_std = std::move(inv_std)](Tape& t, const Matrix& g) {
        Matrix ga(g.rows(), g.cols());
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
          double mg = g.row(i).mean();
          double mgx = g.row(i).cwiseProduct(saved.row(i)).mean();
          ga.row(i) = inv_std(i, 0) * (g.row(i).array() - mg - saved.row(i).array() * mgx).matrix();
        }
        t.accumulate(a, ga);
      });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    require(p.rows() == rows, "concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape_of(parts[0]).record(std::move(out), inputs, [inputs](Tape& t, const Matrix& g) {
    Eigen::Index c = 0;
    for (const Var& p : inputs) {
      t.accumulate(p, g.middleCols(c, p.cols()));
      c += p.cols();
    }
  });
}

Var interleave_rows(std::span<const Var> parts) {
  require(!parts.empty(), "interleave_rows: no inputs");
  const auto k = static_cast<Eigen::Index>(parts.size());
  Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = parts[0].cols();
  for (const Var& p : parts) {
    require(p.rows() == rows && p.cols() == cols, "interleave_rows: inputs differ in shape");
  }
  Matrix out(rows * k, cols);
  for (Eigen::Index j = 0; j < k; ++j) {
    const Matrix& v = parts[j].value();
    for (Eigen::Index b = 0; b < rows; ++b) out.row(b * k + j) = v.row(b);
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape_of(parts[0]).record(std::move(out), inputs, [inputs, rows, k](Tape& t, const Matrix& g) {
    for (Eigen::Index j = 0; j < k; ++j) {
      if (!t.requires_grad(inputs[j])) continue;
      Matrix gj(rows, g.cols());
      for (Eigen::Index b = 0; b < rows; ++b) gj.row(b) = g.row(b * k + j);
      t.accumulate(inputs[j], gj);
    }
  });
}

Var strided_rows(Var a, Eigen::Index stride, Eigen::Index offset) {
  require(stride > 0 && offset >= 0 && offset < stride, "strided_rows: bad stride/offset");
  require(a.rows() % stride == 0, "strided_rows: row count not a multiple of stride");
  const Eigen::Index n = a.rows() / stride;
  Matrix out(n, a.cols());
  for (Eigen::Index b = 0; b < n; ++b) out.row(b) = a.value().row(b * stride + offset);
  return tape_of(a).record(std::move(out), {a}, [a, stride, offset, n](Tape& t, const Matrix& g) {
    Matrix ga = Matrix::Zero(a.rows(), a.cols());
    for (Eigen::Index b = 0; b < n; ++b) ga.row(b * stride + offset) = g.row(b);
    t.accumulate(a, ga);
  });
}

namespace {

void softmax_rows_inplace(Eigen::Ref<Matrix> s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    double m = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - m).exp().matrix();
    s.row(i) /= s.row(i).sum();
  }
}

}  // namespace

Matrix grouped_attention_weights(const Matrix& q, const Matrix& k, Eigen::Index group,
                                 double scale) {
  const Eigen::Index groups = q.rows() / group;
  Matrix w(q.rows(), group);
  for (Eigen::Index b = 0; b < groups; ++b) {
    Matrix s = q.middleRows(b * group, group) * k.middleRows(b * group, group).transpose() * scale;
    softmax_rows_inplace(s);
    w.middleRows(b * group, group) = s;
  }
  return w;
}

Var grouped_attention(Var q, Var k, Var v, Eigen::Index group, double scale) {
  require(group > 0, "grouped_attention: group must be positive");
  same_shape(q, k, "grouped_attention(q, k)");
  require(v.rows() == q.rows(), "grouped_attention: value rows differ");
  require(q.rows() % group == 0, "grouped_attention: rows not a multiple of group");
  Matrix probs = grouped_attention_weights(q.value(), k.value(), group, scale);
  const Eigen::Index groups = q.rows() / group;
  Matrix out(q.rows(), v.cols());
  for (Eigen::Index b = 0; b < groups; ++b) {
    out.middleRows(b * group, group) =
        probs.middleRows(b * group, group) * v.value().middleRows(b * group, group);
  }
  return tape_of(q).record(
      std::move(out), {q, k, v},
      [q, k, v, group, scale, groups, probs = std::move(probs)](Tape& t, const Matrix& g) {
        Matrix gq(q.rows(), q.cols());
        Matrix gk(k.rows(), k.cols());
        Matrix gv(v.rows(), v.cols());
        for (Eigen::Index b = 0; b < groups; ++b) {
          const auto r = b * group;
          Matrix p = probs.middleRows(r, group);
          Matrix go = g.middleRows(r, group);
          gv.middleRows(r, group) = p.transpose() * go;
          Matrix gp = go * v.value().middleRows(r, group).transpose();
          Matrix gs(group, group);
          for (Eigen::Index i = 0; i < group; ++i) {
            double dot = gp.row(i).dot(p.row(i));
            gs.row(i) = p.row(i).array() * (gp.row(i).array() - dot);
          }
          gq.middleRows(r, group) = gs * k.value().middleRows(r, group) * scale;
          gk.middleRows(r, group) = gs.transpose() * q.value().middleRows(r, group) * scale;
        }
        t.accumulate(q, gq);
        t.accumulate(k, gk);
        t.accumulate(v, gv);
      });
}

Var mask_diagonal(Var a, double fill) {
  require(a.rows() == a.cols(), "mask_diagonal: matrix must be square");
  Matrix out = a.value();
  out.diagonal().setConstant(fill);
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    Matrix ga = g;
    ga.diagonal().setZero();
    t.accumulate(a, ga);
  });
}

Var diagonal(Var a) {
  require(a.rows() == a.cols(), "diagonal: matrix must be square");
  Matrix out = a.value().diagonal();
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    Matrix ga = Matrix::Zero(a.rows(), a.cols());
    ga.diagonal() = g.col(0);
    t.accumulate(a, ga);
  });
}

Var logsumexp_rows(Var a) {
  const Matrix& x = a.value();
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  Matrix out(x.rows(), 1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double m = x.row(i).maxCoeff();
    if (m == kNegInf) {
      out(i, 0) = kNegInf;
      continue;
    }
    out(i, 0) = m + std::log((x.row(i).array() - m).exp().sum());
  }
  Matrix lse = out;
  return tape_of(a).record(std::move(out), {a}, [a, lse = std::move(lse)](Tape& t, const Matrix& g) {
    const Matrix& x = a.value();
    Matrix ga(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if (!std::isfinite(lse(i, 0))) {
        ga.row(i).setZero();
        continue;
      }
      ga.row(i) = (x.row(i).array() - lse(i, 0)).exp() * g(i, 0);
    }
    t.accumulate(a, ga);
  });
}

Var log_softmax_rows(Var a) {
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double m = x.row(i).maxCoeff();
    double lse = m + std::log((x.row(i).array() - m).exp().sum());
    out.row(i) = x.row(i).array() - lse;
  }
  Matrix saved = out;
  return tape_of(a).record(std::move(out), {a}, [a, saved = std::move(saved)](Tape& t, const Matrix& g) {
    Matrix ga(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      double total = g.row(i).sum();
      ga.row(i) = g.row(i).array() - saved.row(i).array().exp() * total;
    }
    t.accumulate(a, ga);
  });
}

Var pick(Var a, std::span<const int> index) {
  require(static_cast<Eigen::Index>(index.size()) == a.rows(), "pick: one index per row required");
  Matrix out(a.rows(), 1);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    int j = index[static_cast<std::size_t>(i)];
    require(j >= 0 && j < a.cols(), "pick: index out of range");
    out(i, 0) = a.value()(i, j);
  }
  std::vector<int> idx(index.begin(), index.end());
  return tape_of(a).record(std::move(out), {a}, [a, idx = std::move(idx)](Tape& t, const Matrix& g) {
    Matrix ga = Matrix::Zero(a.rows(), a.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i) ga(i, idx[static_cast<std::size_t>(i)]) = g(i, 0);
    t.accumulate(a, ga);
  });
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return tape_of(a).record(std::move(out), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var mean(Var a) {
  const auto n = static_cast<double>(a.value().size());
  require(n > 0, "mean: empty input");
  return scale(sum(a), 1.0 / n);
}

}  // namespace sm3::ops
