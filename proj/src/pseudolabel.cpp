#include "sm3/pseudolabel.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>

#include "sm3/errors.hpp"

namespace sm3 {

namespace {

double squared_distance(const Matrix& a, Eigen::Index i, const Matrix& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

Matrix plus_plus_seeding(const Matrix& points, int k, Rng& rng) {
  const Eigen::Index n = points.rows();
  Matrix centroids(k, points.cols());
  auto first = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n)));
  centroids.row(0) = points.row(first);
  std::vector<double> nearest(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) nearest[static_cast<std::size_t>(i)] = squared_distance(points, i, centroids, 0);
  for (int c = 1; c < k; ++c) {
    double total = std::accumulate(nearest.begin(), nearest.end(), 0.0);
    Eigen::Index pick = n - 1;
    if (total > 0.0) {
      double r = rng.uniform() * total;
      double acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += nearest[static_cast<std::size_t>(i)];
        if (r < acc) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(n)));
    }
    centroids.row(c) = points.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) {
      auto& d = nearest[static_cast<std::size_t>(i)];
      d = std::min(d, squared_distance(points, i, centroids, c));
    }
  }
  return centroids;
}

/// Assigns every point to its nearest centroid; returns (changed, inertia).
std::pair<bool, double> assign(const Matrix& points, const Matrix& centroids, std::vector<int>& assignment,
                               std::vector<double>& distance) {
  bool changed = false;
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
      double d = squared_distance(points, i, centroids, c);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    auto& slot = assignment[static_cast<std::size_t>(i)];
    if (slot != best) changed = true;
    slot = best;
    distance[static_cast<std::size_t>(i)] = best_d;
    inertia += best_d;
  }
  return {changed, inertia};
}

void update_centroids(const Matrix& points, const std::vector<int>& assignment, Matrix& centroids) {
  const Eigen::Index k = centroids.rows();
  Matrix sums = Matrix::Zero(k, points.cols());
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    int c = assignment[static_cast<std::size_t>(i)];
    sums.row(c) += points.row(i);
    ++counts[static_cast<std::size_t>(c)];
  }
  std::vector<Eigen::Index> empty;
  for (Eigen::Index c = 0; c < k; ++c) {
    int count = counts[static_cast<std::size_t>(c)];
    if (count > 0) {
      centroids.row(c) = sums.row(c) / static_cast<double>(count);
    } else {
      empty.push_back(c);
    }
  }
  if (empty.empty()) return;
  // Reseed each empty centroid at the point farthest from its own centroid.
  std::vector<double> far(static_cast<std::size_t>(points.rows()));
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    far[static_cast<std::size_t>(i)] = squared_distance(points, i, centroids, assignment[static_cast<std::size_t>(i)]);
  }
  for (Eigen::Index c : empty) {
    auto it = std::max_element(far.begin(), far.end());
    auto i = static_cast<Eigen::Index>(it - far.begin());
    centroids.row(c) = points.row(i);
    *it = -1.0;
  }
}

ClusterModel lloyd(const Matrix& points, int k, Rng& rng, int max_iterations) {
  ClusterModel model;
  model.centroids = plus_plus_seeding(points, k, rng);
  model.assignment.assign(static_cast<std::size_t>(points.rows()), -1);
  std::vector<double> distance(static_cast<std::size_t>(points.rows()));

  auto [changed, inertia] = assign(points, model.centroids, model.assignment, distance);
  model.inertia_history.push_back(inertia);
  for (int it = 0; it < max_iterations; ++it) {
    update_centroids(points, model.assignment, model.centroids);
    std::tie(changed, inertia) = assign(points, model.centroids, model.assignment, distance);
    model.inertia_history.push_back(inertia);
    model.iterations = it + 1;
    if (!changed) break;
  }
  model.inertia = inertia;
  return model;
}

}  // namespace

ClusterModel kmeans(const Matrix& points, int k, Rng& rng, int restarts, int max_iterations) {
  if (k < 1) throw ValidationError("kmeans: k must be >= 1");
  if (restarts < 1) throw ValidationError("kmeans: restarts must be >= 1");
  if (points.rows() < k) {
    throw ValidationError("kmeans: need at least k points (n=" + std::to_string(points.rows()) +
                          ", k=" + std::to_string(k) + ")");
  }
  if (!points.allFinite()) throw NonFiniteError("kmeans: non-finite point");

  const std::uint64_t seed = rng.seed();
  ClusterModel best;
  for (int run = 0; run < restarts; ++run) {
    ClusterModel model = lloyd(points, k, rng, max_iterations);
    model.seed = seed;
    if (run == 0 || model.inertia < best.inertia) best = std::move(model);
  }
  return best;
}

std::vector<int> best_label_permutation(std::span<const int> current, std::span<const int> reference, int k) {
  if (current.size() != reference.size()) throw ShapeError("label permutation: length mismatch");
  std::vector<std::vector<long>> overlap(static_cast<std::size_t>(k), std::vector<long>(static_cast<std::size_t>(k), 0));
  for (std::size_t i = 0; i < current.size(); ++i) {
    int a = current[i];
    int b = reference[i];
    if (a >= 0 && a < k && b >= 0 && b < k) ++overlap[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
  }
  std::vector<int> perm(static_cast<std::size_t>(k));
  std::iota(perm.begin(), perm.end(), 0);
  if (k <= 8) {
    std::vector<int> best = perm;
    long best_score = -1;
    do {
      long score = 0;
      for (int a = 0; a < k; ++a) score += overlap[static_cast<std::size_t>(a)][static_cast<std::size_t>(perm[static_cast<std::size_t>(a)])];
      if (score > best_score) {
        best_score = score;
        best = perm;
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
  }
  // Greedy matching on the largest remaining overlap.
  std::vector<bool> used_a(static_cast<std::size_t>(k), false);
  std::vector<bool> used_b(static_cast<std::size_t>(k), false);
  for (int step = 0; step < k; ++step) {
    long best = -1;
    int ba = 0;
    int bb = 0;
    for (int a = 0; a < k; ++a) {
      if (used_a[static_cast<std::size_t>(a)]) continue;
      for (int b = 0; b < k; ++b) {
        if (used_b[static_cast<std::size_t>(b)]) continue;
        if (overlap[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] > best) {
          best = overlap[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
          ba = a;
          bb = b;
        }
      }
    }
    perm[static_cast<std::size_t>(ba)] = bb;
    used_a[static_cast<std::size_t>(ba)] = true;
    used_b[static_cast<std::size_t>(bb)] = true;
  }
  return perm;
}

PseudoLabelSet generate_pseudo_multilabels(std::span<const Matrix> embeddings, std::span<const int> cluster_counts,
                                           std::uint64_t seed, int epoch, const PseudoLabelSet* previous) {
  if (embeddings.size() != cluster_counts.size()) {
    throw ValidationError("pseudo-labels: " + std::to_string(embeddings.size()) + " embedding matrices for " +
                          std::to_string(cluster_counts.size()) + " labels");
  }
  if (embeddings.empty()) throw ValidationError("pseudo-labels: K must be >= 1");
  const Eigen::Index n = embeddings[0].rows();
  for (const Matrix& e : embeddings) {
    if (e.rows() != n) throw ShapeError("pseudo-labels: embedding matrices are not row-aligned");
  }
  if (previous != nullptr &&
      (previous->assignments.rows() != n || previous->cluster_counts != std::vector<int>(cluster_counts.begin(), cluster_counts.end()))) {
    previous = nullptr;
  }

  PseudoLabelSet out;
  out.cluster_counts.assign(cluster_counts.begin(), cluster_counts.end());
  out.epoch = epoch;
  out.assignments.resize(n, static_cast<Eigen::Index>(cluster_counts.size()));
  for (std::size_t j = 0; j < embeddings.size(); ++j) {
    Rng rng(derive_seed(seed, "pseudolabel", {static_cast<std::uint64_t>(epoch), j}));
    ClusterModel model = kmeans(embeddings[j], cluster_counts[j], rng);
    std::vector<int> labels = model.assignment;
    if (previous != nullptr) {
      std::vector<int> ref(static_cast<std::size_t>(n));
      for (Eigen::Index i = 0; i < n; ++i) ref[static_cast<std::size_t>(i)] = previous->assignments(i, static_cast<Eigen::Index>(j));
      std::vector<int> perm = best_label_permutation(labels, ref, cluster_counts[j]);
      for (int& y : labels) y = perm[static_cast<std::size_t>(y)];
    }
    for (Eigen::Index i = 0; i < n; ++i) out.assignments(i, static_cast<Eigen::Index>(j)) = labels[static_cast<std::size_t>(i)];
  }
  return out;
}

void write_pseudolabel_csv(const PseudoLabelSet& labels, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "sample_id";
  for (int k = 0; k < labels.label_count(); ++k) out << ",y_" << (k + 1);
  out << '\n';
  for (Eigen::Index i = 0; i < labels.assignments.rows(); ++i) {
    out << i;
    for (Eigen::Index k = 0; k < labels.assignments.cols(); ++k) out << ',' << labels.assignments(i, k);
    out << '\n';
  }
}

}  // namespace sm3
