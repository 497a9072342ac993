#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "sm3/rng.hpp"
#include "sm3/tensor.hpp"

namespace sm3 {

struct ClusterModel {
  Matrix centroids;  // k x d
  std::vector<int> assignment;
  /// Sum of squared Euclidean distances to the assigned centroids.
  double inertia = 0.0;
  /// Inertia after every assignment step of the returned run; element 0 is its
  /// k-means++ seeding.
  std::vector<double> inertia_history;
  int iterations = 0;
  std::uint64_t seed = 0;
};

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iterations` updates have run. An empty cluster is
/// reseeded at the point farthest from its assigned centroid. Ties go to the
/// lowest centroid index. The run with the lowest inertia out of `restarts`
/// is returned, all drawn from `rng` in sequence. Requires n >= k >= 1.
ClusterModel kmeans(const Matrix& points, int k, Rng& rng, int restarts = 10, int max_iterations = 300);

struct PseudoLabelSet {
  IndexMatrix assignments;  // n x K, column k in [0, cluster_counts[k])
  std::vector<int> cluster_counts;
  int epoch = 0;

  int label_count() const { return static_cast<int>(cluster_counts.size()); }
};

/// Runs one independent k-means per label (k = cluster_counts[j] on
/// embeddings[j]) with seeds derive_seed(seed, "pseudolabel", {epoch, j}).
/// When `previous` is given, each new column is relabeled by the cluster-id
/// permutation that maximizes agreement with the previous column, so class
/// indices stay stable across refreshes.
PseudoLabelSet generate_pseudo_multilabels(std::span<const Matrix> embeddings,
                                           std::span<const int> cluster_counts, std::uint64_t seed,
                                           int epoch = 0, const PseudoLabelSet* previous = nullptr);

/// Permutation perm (new id -> aligned id) maximizing sum_i [perm[a_i] == b_i].
std::vector<int> best_label_permutation(std::span<const int> current, std::span<const int> reference, int k);

/// Writes "sample_id,y_1,...,y_K" rows.
void write_pseudolabel_csv(const PseudoLabelSet& labels, const std::filesystem::path& path);

}  // namespace sm3
