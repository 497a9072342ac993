#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sm3/ops.hpp"
#include "sm3/rng.hpp"
#include "sm3/tape.hpp"

namespace sm3 {

/// Stage-1 fusion strategy.
enum class MmStrategy { simclr, concat, sep_shared, sep_sep };
/// Stage-2 classifier layout.
enum class MlStrategy { no_proj, proj, msa, tel, te };

std::string_view to_string(MmStrategy s);
std::string_view to_string(MlStrategy s);
MmStrategy parse_mm_strategy(std::string_view name);
MlStrategy parse_ml_strategy(std::string_view name);

struct ModelConfig {
  int derm_dim = 64;
  int clinic_dim = 64;
  std::vector<int> encoder_hidden{64};
  int feature_dim = 32;
  int projection_dim = 128;
  int label_dim = 64;
  std::vector<int> class_counts{3, 2, 3, 3, 3, 3, 3, 5};
  int attention_heads = 1;
  int ff_dim = 128;
  double dropout = 0.1;

  int label_count() const { return static_cast<int>(class_counts.size()); }
  void validate() const;
};

/// Dropout is applied only when `training` is set and a generator is given.
struct ForwardMode {
  bool training = false;
  Rng* rng = nullptr;
  double dropout = 0.0;

  static ForwardMode eval() { return {}; }
  bool dropout_active() const { return training && rng != nullptr && dropout > 0.0; }
};

struct NamedParameter {
  std::string name;
  Parameter* param;
};

/// y = x W + b with W stored in x out. A bias-free layer has an empty bias.
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, bool with_bias = true);

  Var forward(Tape& tape, Var x);
  /// Uniform fan-in init: U(-1/sqrt(in), 1/sqrt(in)) for weight and bias.
  void init(std::uint64_t seed, const std::string& name);
  void collect(const std::string& prefix, std::vector<NamedParameter>& out);

  int in() const { return static_cast<int>(weight.value.rows()); }
  int out() const { return static_cast<int>(weight.value.cols()); }
  bool has_bias() const { return bias.value.size() > 0; }

  Parameter weight;
  Parameter bias;
};

/// MLP over modality vectors; ReLU after every layer, so h >= 0.
class Encoder {
 public:
  Encoder() = default;
  /// widths = {input, hidden..., feature}
  explicit Encoder(std::vector<int> widths);

  Var forward(Tape& tape, Var x);
  void init(std::uint64_t seed, const std::string& name);
  void collect(const std::string& prefix, std::vector<NamedParameter>& out);

  int input_dim() const { return layers.front().in(); }
  int feature_dim() const { return layers.back().out(); }

  std::vector<Linear> layers;
};

/// Two-layer perceptron: Linear(in, in) -> ReLU -> Linear(in, out).
class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(int in, int out);

  Var forward(Tape& tape, Var h);
  void init(std::uint64_t seed, const std::string& name);
  void collect(const std::string& prefix, std::vector<NamedParameter>& out);

  int output_dim() const { return output.out(); }

  Linear hidden;
  Linear output;
};

/// K single-layer label heads p_k, each mapping the fused feature to its own
/// label-specific embedding.
class LabelProjection {
 public:
  LabelProjection() = default;
  LabelProjection(int in, int out, int label_count);

  std::vector<Var> forward(Tape& tape, Var h_cat);
  void init(std::uint64_t seed, const std::string& name);
  void collect(const std::string& prefix, std::vector<NamedParameter>& out);

  std::vector<Linear> heads;
};

struct LayerNormParams {
  Parameter gamma;
  Parameter beta;
};

/// Single-head scaled dot-product self-attention over groups of `tokens`
/// consecutive rows, with output projection. The key projection has no bias:
/// it would shift every score of a query row equally and never get a gradient.
class SelfAttention {
 public:
  SelfAttention() = default;
  explicit SelfAttention(int dim);

  Var forward(Tape& tape, Var x, int tokens);
  void init(std::uint64_t seed, const std::string& name);
  void collect(const std::string& prefix, std::vector<NamedParameter>& out);

  Linear query, key, value, output;
};

/// Pre-norm Transformer encoder layer:
///   y   = x + Dropout(Attn(LN1(x)))
///   out = y + Dropout(FF2(Dropout(ReLU(FF1(LN2(y))))))
class TransformerEncoderLayer {
 public:
  TransformerEncoderLayer() = default;
  TransformerEncoderLayer(int dim, int ff_dim);

  Var forward(Tape& tape, Var x, int tokens, const ForwardMode& mode);
  void init(std::uint64_t seed, const std::string& name);
  void collect(const std::string& prefix, std::vector<NamedParameter>& out);

  LayerNormParams norm1, norm2;
  SelfAttention attention;
  Linear ff1, ff2;
};

/// Label-relation module W over K label tokens. tel = one encoder layer,
/// te = two stacked layers, msa = bare residual self-attention (no
/// feed-forward, no normalization). No positional encoding.
class RelationModule {
 public:
  RelationModule() = default;
  RelationModule(MlStrategy kind, int dim, int ff_dim);

  /// tokens[k] is the B x dim embedding of label k.
  std::vector<Var> forward(Tape& tape, std::span<const Var> tokens, const ForwardMode& mode);
  void init(std::uint64_t seed, const std::string& name);
  void collect(const std::string& prefix, std::vector<NamedParameter>& out);

  MlStrategy kind = MlStrategy::tel;
  std::optional<SelfAttention> bare_attention;
  std::vector<TransformerEncoderLayer> layers;
};

/// K linear heads q_k; head k emits c_k logits.
class ClassificationHeads {
 public:
  ClassificationHeads() = default;
  ClassificationHeads(int in, std::span<const int> class_counts);

  std::vector<Var> forward(Tape& tape, std::span<const Var> tokens);
  void init(std::uint64_t seed, const std::string& name);
  void collect(const std::string& prefix, std::vector<NamedParameter>& out);

  std::vector<Linear> heads;
};

/// Output of the multi-label classifier stack for one batch.
struct ClassifierOutput {
  /// Per-label inputs to the classification heads; these are what gets
  /// clustered into pseudo-labels.
  std::vector<Var> embeddings;
  /// Label embeddings before the relation module (equal to `embeddings`
  /// when there is no relation module).
  std::vector<Var> pre_relation;
  std::vector<Var> logits;
};

/// Every learnable component of the two-branch model. Which projection
/// heads exist depends on the stage-1 strategy; the classifier stack exists
/// once a stage-2 strategy is attached.
class Network {
 public:
  Network(ModelConfig config, MmStrategy mm);

  const ModelConfig& config() const { return config_; }
  MmStrategy mm_strategy() const { return mm_; }
  const std::optional<MlStrategy>& ml_strategy() const { return ml_; }

  /// Builds p_k / W / q_k for `ml` (replacing any existing stack).
  void attach_classifier(MlStrategy ml);

  /// Initializes every parameter from `seed`; each parameter's stream is
  /// derived from its name, so results do not depend on component order.
  void initialize(std::uint64_t seed);
  void initialize_classifier(std::uint64_t seed);

  /// Stable, ordered list of all parameters.
  std::vector<NamedParameter> parameters();
  std::vector<NamedParameter> encoder_parameters();
  std::vector<NamedParameter> classifier_parameters();

  void set_encoders_trainable(bool trainable);
  void zero_grad();

  Var encode_derm(Tape& tape, Var x) { return encoder_derm.forward(tape, x); }
  Var encode_clinic(Tape& tape, Var x) { return encoder_clinic.forward(tape, x); }
  /// [h_derm, h_clinic]
  Var fused_features(Tape& tape, Var x_derm, Var x_clinic);

  ClassifierOutput classify(Tape& tape, Var h_cat, const ForwardMode& mode);

  /// Embeddings used for cross-modality retrieval: the cross-modal
  /// projection space when the strategy has one, otherwise encoder features.
  std::pair<Matrix, Matrix> pair_embeddings(const Matrix& x_derm, const Matrix& x_clinic);

  /// Fused features for every row without recording gradients.
  Matrix features(const Matrix& x_derm, const Matrix& x_clinic);

  Encoder encoder_derm;
  Encoder encoder_clinic;
  std::optional<ProjectionHead> head_derm;
  std::optional<ProjectionHead> head_clinic;
  std::optional<ProjectionHead> head_concat;
  std::optional<ProjectionHead> head_mm_shared;
  std::optional<ProjectionHead> head_mm_derm;
  std::optional<ProjectionHead> head_mm_clinic;

  std::optional<LabelProjection> label_projection;
  std::optional<RelationModule> relation;
  std::optional<ClassificationHeads> classifier;

 private:
  ModelConfig config_;
  MmStrategy mm_;
  std::optional<MlStrategy> ml_;
};

}  // namespace sm3
