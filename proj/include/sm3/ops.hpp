#pragma once

#include <span>
#include <vector>

#include "sm3/rng.hpp"
#include "sm3/tape.hpp"

/// Differentiable primitives. Every op records one node on the tape of its
/// first argument and checks shapes eagerly.
namespace sm3::ops {

Var matmul(Var a, Var b);
Var transpose(Var a);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double s);
/// a + row, row broadcast over every row of a (row is 1 x cols).
Var add_row(Var a, Var row);
/// a .* row, row broadcast over every row of a.
Var mul_row(Var a, Var row);

Var relu(Var a);
Var tanh(Var a);

/// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
/// The mask is a constant, so the op is differentiable in `a`.
Var dropout(Var a, double p, Rng& rng);

/// Each row divided by max(||row||, eps). Zero rows map to zero rows.
Var normalize_rows(Var a, double eps = 1e-12);
/// Zero-mean, unit-variance rows (no affine part).
Var layer_norm_rows(Var a, double eps = 1e-5);

Var concat_cols(std::span<const Var> parts);
/// Stacks K equally shaped B x C inputs into a (B*K) x C matrix whose row
/// b*K + k is row b of input k.
Var interleave_rows(std::span<const Var> parts);
/// Rows offset, offset + stride, ... (inverse of interleave_rows).
Var strided_rows(Var a, Eigen::Index stride, Eigen::Index offset);

/// Scaled dot-product attention within consecutive row groups of size
/// `group`: for each group, softmax(Q K^T * scale) V.
Var grouped_attention(Var q, Var k, Var v, Eigen::Index group, double scale);
/// The attention probabilities grouped_attention would use, stacked
/// ((B*group) x group). Not differentiable.
Matrix grouped_attention_weights(const Matrix& q, const Matrix& k, Eigen::Index group,
                                 double scale);

/// Square a with its diagonal overwritten by `fill` (gradient zero there).
Var mask_diagonal(Var a, double fill);
/// Column of diagonal entries of a square matrix.
Var diagonal(Var a);
/// Column of log(sum_j exp(a_ij)) with max-subtraction.
Var logsumexp_rows(Var a);
Var log_softmax_rows(Var a);
/// Column of a(i, index[i]).
Var pick(Var a, std::span<const int> index);

Var sum(Var a);
Var mean(Var a);

}  // namespace sm3::ops
