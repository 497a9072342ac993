#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. Everything here is written as plain loops so it shares no code
// with the library paths it checks.

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "sm3/rng.hpp"
#include "sm3/tensor.hpp"

namespace sm3::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

/// Pair counting over every (positive, negative) pair.
inline std::optional<double> brute_auc(std::span<const double> scores, std::span<const int> labels) {
  double good = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) good += 1.0;
      else if (scores[i] == scores[j]) good += 0.5;
    }
  }
  if (pairs == 0) return std::nullopt;
  return good / static_cast<double>(pairs);
}

inline double adjusted_rand_index(std::span<const int> a, std::span<const int> b) {
  auto choose2 = [](double x) { return x * (x - 1.0) / 2.0; };
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1.0;
    ra[a[i]] += 1.0;
    rb[b[i]] += 1.0;
  }
  double index = 0.0, sa = 0.0, sb = 0.0;
  for (auto& [key, n] : joint) index += choose2(n);
  for (auto& [key, n] : ra) sa += choose2(n);
  for (auto& [key, n] : rb) sb += choose2(n);
  const double expected = sa * sb / choose2(static_cast<double>(a.size()));
  const double max_index = 0.5 * (sa + sb);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

inline double brute_cos(const Matrix& a, Eigen::Index i, const Matrix& b, Eigen::Index j) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    dot += a(i, c) * b(j, c);
    na += a(i, c) * a(i, c);
    nb += b(j, c) * b(j, c);
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

/// Literal per-sample transcription of the contrastive term anchored at z1.
inline double brute_nt_xent(const Matrix& z1, const Matrix& z2, double tau) {
  const Eigen::Index n = z1.rows();
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double num = std::exp(brute_cos(z1, i, z2, i) / tau);
    double den = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) den += std::exp(brute_cos(z1, i, z2, j) / tau);
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) den += std::exp(brute_cos(z1, i, z1, j) / tau);
    }
    total += -std::log(num / den);
  }
  return total / static_cast<double>(n);
}

inline double brute_l_mm(const Matrix& zd1, const Matrix& zc1, const Matrix& zc2, double tau) {
  const Eigen::Index n = zd1.rows();
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (const Matrix* zc : {&zc1, &zc2}) {
      double num = std::exp(brute_cos(zd1, i, *zc, i) / tau);
      double den = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        den += std::exp(brute_cos(zd1, i, *zc, j) / tau);
        if (j != i) den += std::exp(brute_cos(zd1, i, zd1, j) / tau);
      }
      total += -std::log(num / den);
    }
  }
  return total / static_cast<double>(n);
}

struct Blobs {
  Matrix points;
  std::vector<int> labels;
};

/// k spherical unit-variance blobs whose centers sit `separation` sigmas
/// apart along distinct axes; cluster sizes differ by at most one.
inline Blobs planted_blobs(int n, int d, int k, double separation, Rng& rng) {
  Blobs b;
  b.points.resize(n, d);
  b.labels.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int c = i % k;
    b.labels[static_cast<std::size_t>(i)] = c;
    for (int j = 0; j < d; ++j) b.points(i, j) = rng.normal() + (j == c % d ? separation : 0.0);
  }
  return b;
}

}  // namespace sm3::testing
