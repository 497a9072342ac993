#pragma once

#include <span>
#include <vector>

#include "sm3/ops.hpp"

namespace sm3 {

/// Batch-mean NT-Xent anchored at view 1. For sample i:
///
///   -log  e(s(z1_i, z2_i)/tau) / ( sum_j e(s(z1_i, z2_j)/tau)
///                                  + sum_{j != i} e(s(z1_i, z1_j)/tau) )
///
/// with s the cosine similarity. Evaluated as a row-wise log-sum-exp over
/// [S12 | S11 with -inf on the diagonal].
Var nt_xent(Var z1, Var z2, double tau);

/// 0.5 * (nt_xent(z1, z2) + nt_xent(z2, z1)).
Var nt_xent_symmetric(Var z1, Var z2, double tau);

/// Cross-modality loss anchored at dermoscopy view 1: one term contrasting
/// against clinical view 1 and one against clinical view 2, each with
/// within-dermoscopy negatives. Both terms are batch means and are summed.
/// `zd2` enters only the mirrored (clinical-anchored) variant.
Var l_mm(Var zd1, Var zd2, Var zc1, Var zc2, double tau, bool mirror = false);

/// Projected embeddings of both views of both modalities.
struct ContrastiveViews {
  Var derm1, derm2, clinic1, clinic2;
};

struct SslLoss {
  Var derm;
  Var clinic;
  Var mm;
  Var total;
};

/// L_derm + L_clinic + L_mm, with each addend also returned. The total is
/// (derm + clinic) + mm.
SslLoss l_ssl(const ContrastiveViews& per_modality, const ContrastiveViews& cross_modal, double tau,
              bool symmetric = false);

/// Sum over labels k of the batch-mean cross-entropy of logits[k] against
/// labels(:, k). Throws ValidationError on out-of-range labels.
Var multilabel_ce(std::span<const Var> logits, const IndexMatrix& labels);

}  // namespace sm3
