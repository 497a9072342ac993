#include "sm3/losses.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace sm3 {

namespace {

void check_pair(Var a, Var b, double tau) {
  if (!(tau > 0.0)) throw ValidationError("temperature must be positive");
  if (a.rows() == 0) throw ShapeError("contrastive batch must contain at least one sample");
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("contrastive views must share shape");
  }
}

}  // namespace

Var nt_xent(Var z1, Var z2, double tau) {
  check_pair(z1, z2, tau);
  Var n1 = ops::normalize_rows(z1);
  Var n2 = ops::normalize_rows(z2);
  Var s12 = ops::scale(ops::matmul(n1, ops::transpose(n2)), 1.0 / tau);
  Var s11 = ops::scale(ops::matmul(n1, ops::transpose(n1)), 1.0 / tau);
  Var negatives = ops::mask_diagonal(s11, -std::numeric_limits<double>::infinity());
  std::vector<Var> parts{s12, negatives};
  Var lse = ops::logsumexp_rows(ops::concat_cols(parts));
  return ops::mean(ops::sub(lse, ops::diagonal(s12)));
}

Var nt_xent_symmetric(Var z1, Var z2, double tau) {
  return ops::scale(ops::add(nt_xent(z1, z2, tau), nt_xent(z2, z1, tau)), 0.5);
}

Var l_mm(Var zd1, Var zd2, Var zc1, Var zc2, double tau, bool mirror) {
  check_pair(zd1, zd2, tau);
  check_pair(zd1, zc1, tau);
  check_pair(zd1, zc2, tau);
  // With z1 = zd1 the NT-Xent denominator is exactly the printed one: the
  // cross-modality sum over all j plus within-dermoscopy negatives j != i.
  Var anchored = ops::add(nt_xent(zd1, zc1, tau), nt_xent(zd1, zc2, tau));
  if (!mirror) return anchored;
  Var mirrored = ops::add(nt_xent(zc1, zd1, tau), nt_xent(zc1, zd2, tau));
  return ops::scale(ops::add(anchored, mirrored), 0.5);
}

SslLoss l_ssl(const ContrastiveViews& per_modality, const ContrastiveViews& cross_modal, double tau,
              bool symmetric) {
  SslLoss out;
  if (symmetric) {
    out.derm = nt_xent_symmetric(per_modality.derm1, per_modality.derm2, tau);
    out.clinic = nt_xent_symmetric(per_modality.clinic1, per_modality.clinic2, tau);
  } else {
    out.derm = nt_xent(per_modality.derm1, per_modality.derm2, tau);
    out.clinic = nt_xent(per_modality.clinic1, per_modality.clinic2, tau);
  }
  out.mm = l_mm(cross_modal.derm1, cross_modal.derm2, cross_modal.clinic1, cross_modal.clinic2, tau, symmetric);
  out.total = ops::add(ops::add(out.derm, out.clinic), out.mm);
  return out;
}

Var multilabel_ce(std::span<const Var> logits, const IndexMatrix& labels) {
  if (logits.empty()) throw ShapeError("multilabel_ce needs at least one head");
  if (labels.cols() != static_cast<Eigen::Index>(logits.size())) {
    throw ShapeError("multilabel_ce: label columns (" + std::to_string(labels.cols()) +
                     ") do not match head count (" + std::to_string(logits.size()) + ")");
  }
  Var total;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const Var& z = logits[k];
    if (z.rows() != labels.rows()) throw ShapeError("multilabel_ce: batch size mismatch");
    std::vector<int> target(static_cast<std::size_t>(labels.rows()));
    for (Eigen::Index i = 0; i < labels.rows(); ++i) {
      int y = labels(i, static_cast<Eigen::Index>(k));
      if (y < 0 || y >= z.cols()) {
        throw ValidationError("pseudo-label " + std::to_string(y) + " out of range for label " +
                              std::to_string(k) + " with " + std::to_string(z.cols()) + " classes");
      }
      target[static_cast<std::size_t>(i)] = y;
    }
    Var nll = ops::scale(ops::mean(ops::pick(ops::log_softmax_rows(z), target)), -1.0);
    total = k == 0 ? nll : ops::add(total, nll);
  }
  return total;
}

}  // namespace sm3
