#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sm3/augment.hpp"
#include "sm3/models.hpp"
#include "sm3/pseudolabel.hpp"
#include "sm3/synthdata.hpp"

namespace sm3 {

struct StageConfig {
  int batch_size = 64;
  double learning_rate = 1e-3;
  int epochs = 100;
};

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct TrainConfig {
  StageConfig stage1{64, 1e-3, 100};
  StageConfig stage2{64, 1e-3, 50};
  double temperature = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  MmStrategy mm_strategy = MmStrategy::sep_sep;
  MlStrategy ml_strategy = MlStrategy::tel;
  /// Average each NT-Xent with its view-swapped counterpart.
  bool symmetric = false;
  /// Average the cross-modality loss with its clinical-anchored mirror.
  bool mirror_mm = false;
  /// Cluster label embeddings before the relation module instead of after.
  bool cluster_pre_relation = false;
  /// Let stage-2 gradients reach the encoders.
  bool finetune_encoders = false;
  /// Feed augmented views to the stage-2 classifier; clustering always sees plain inputs.
  bool augment_stage2 = false;
  ModelConfig model;
  AugmentationPolicy augment;
  std::uint64_t seed = 0;

  /// Batch 96 / lr 1e-6 / 400 epochs and batch 256 / lr 1e-4 / 150 epochs.
  static TrainConfig full_scale();

  AdamWConfig optimizer(double learning_rate) const {
    return {learning_rate, beta1, beta2, eps, weight_decay};
  }
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep their defaults; bad values raise ValidationError.
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AugmentationPolicy& p);
AugmentationPolicy augmentation_from_json(const nlohmann::json& j);

struct MomentState {
  Matrix m;
  Matrix v;
  long step = 0;
};

/// Adam moments keyed by parameter name.
using OptimizerState = std::map<std::string, MomentState>;

/// One AdamW update of every trainable parameter that received a gradient:
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)
/// with bias-corrected m_hat, v_hat and a per-parameter step count. All
/// gradients are checked first; a non-finite one raises NonFiniteError and
/// leaves every parameter and moment untouched.
void optimizer_step(std::span<const NamedParameter> params, OptimizerState& state, const AdamWConfig& hyper);

struct SslEpoch {
  int epoch = 0;
  double l_derm = 0.0;
  double l_clinic = 0.0;
  double l_mm = 0.0;
  double l_total = 0.0;
};

struct CeEpoch {
  int epoch = 0;
  double l_ce = 0.0;
};

enum class Stage { mm, ml };

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  Stage stage = Stage::mm;
  TrainConfig config;
  Network network{ModelConfig{}, MmStrategy::sep_sep};
  int epoch = 0;
  std::vector<SslEpoch> ssl_history;
  std::vector<CeEpoch> ce_history;
};

/// JSON manifest at `path` plus a float32 parameter blob beside it.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Loss history as CSV: (epoch,l_derm,l_clinic,l_mm,l_total) or (epoch,l_ce).
void write_loss_csv(const Checkpoint& ckpt, const std::filesystem::path& path);

/// Called once per finished epoch with a one-line summary.
using EpochLogger = std::function<void(const std::string&)>;

/// Copies input widths and label structure from the dataset into `model`.
ModelConfig model_for_dataset(const ModelConfig& model, const Dataset& dataset);

/// Stage 1. Strategy semantics:
///   simclr     : L_derm + L_clinic only
///   concat     : one NT-Xent over projections of [h_derm, h_clinic]
///   sep_shared : L_derm + L_clinic + L_mm through one shared mm head
///   sep_sep    : L_derm + L_clinic + L_mm through per-modality mm heads
/// Trains on the train split, drops the last incomplete batch.
Checkpoint pretrain_mm(const Dataset& dataset, const TrainConfig& config, const EpochLogger& log = {});

/// Stage 2 on the train split: each epoch embeds every sample, regenerates
/// pseudo-labels by per-label k-means (k = c_k) and minimizes the summed
/// cross-entropy against them. The last epoch's labels land in
/// `final_labels` when given.
Checkpoint pretrain_ml(const Dataset& dataset, const Checkpoint& stage1, const TrainConfig& config,
                       const EpochLogger& log = {}, PseudoLabelSet* final_labels = nullptr);

/// Label embeddings used for clustering, one n x d matrix per label.
std::vector<Matrix> clustering_embeddings(Network& net, const Matrix& x_derm, const Matrix& x_clinic,
                                          bool pre_relation);

}  // namespace sm3
