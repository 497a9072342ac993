#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sm3/models.hpp"
#include "sm3/synthdata.hpp"
#include "sm3/train.hpp"

namespace sm3 {

struct PairMatchReport {
  double avg_rank = 0.0;
  double acc_at_1 = 0.0;
  double acc_at_5 = 0.0;
  int m = 0;
  /// Rank of the true pair for each query (1 = best, ties count one half).
  std::vector<double> ranks;
};

/// Row i of z_derm queries all rows of z_clinic by cosine similarity; row i of
/// z_clinic is the true match.
PairMatchReport pair_match(const Matrix& z_derm, const Matrix& z_clinic);

/// Mann-Whitney AUC: fraction of (positive, negative) pairs ordered
/// correctly, ties counting one half. Empty when only one class is present.
std::optional<double> auc(std::span<const double> scores, std::span<const int> labels);

struct ConfusionMetrics {
  long tp = 0, fn = 0, tn = 0, fp = 0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double precision = 0.0;
  /// Set when nothing was predicted positive; precision is then reported 0.
  bool precision_undefined = false;
  /// Set when the labels hold no positives (or no negatives); the matching
  /// rate is reported 0.
  bool sensitivity_undefined = false;
  bool specificity_undefined = false;
};

ConfusionMetrics confusion_metrics(std::span<const int> predictions, std::span<const int> labels, int positive_class);

struct ClassMetrics {
  int label = 0;
  int cls = 0;
  /// Class c_k - 1 is the designated positive class of label k.
  bool designated = false;
  std::optional<double> auc;
  ConfusionMetrics confusion;
};

struct MetricsReport {
  std::vector<ClassMetrics> classes;
  /// Means over every (label, class) pair; AUC skips undefined entries.
  double macro_auc = 0.0;
  double macro_sensitivity = 0.0;
  double macro_specificity = 0.0;
  double macro_precision = 0.0;
  /// Mean AUC over the designated positive classes only.
  double designated_auc = 0.0;
  std::vector<double> loss_history;
};

/// Per-class one-vs-rest metrics from softmax probabilities; predictions are
/// the per-label argmax.
MetricsReport classification_metrics(std::span<const Matrix> probabilities, const IndexMatrix& labels);

struct EvalConfig {
  StageConfig probe{128, 1e-3, 50};
  StageConfig finetune{64, 1e-4, 50};
  /// Held-out pairs (first M test samples) used for pair matching.
  int pair_queries = 100;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const EvalConfig& c);
EvalConfig eval_config_from_json(const nlohmann::json& j);

struct ProbeResult {
  MetricsReport report;
  Network network;
};

/// Trains the classifier stack on the train split with the true labels,
/// encoders frozen, and scores the test split. A network without a
/// classifier gets fresh linear heads on the fused features.
ProbeResult linear_probe(const Network& network, const Dataset& dataset, const EvalConfig& config,
                         const TrainConfig& optimizer = {});

/// As linear_probe with every parameter trainable.
ProbeResult finetune(const Network& network, const Dataset& dataset, const EvalConfig& config,
                     const TrainConfig& optimizer = {});

/// Pair matching on the first `pair_queries` test samples.
PairMatchReport evaluate_pair_matching(Network& network, const Dataset& dataset, int pair_queries);

nlohmann::json to_json(const PairMatchReport& r);
nlohmann::json to_json(const MetricsReport& r);
/// Rows keyed by (label, class, metric).
std::string metrics_csv(const MetricsReport& r);

}  // namespace sm3
