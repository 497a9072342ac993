#include "sm3/models.hpp"

#include <cmath>

#include "sm3/errors.hpp"

namespace sm3 {

std::string_view to_string(MmStrategy s) {
  switch (s) {
    case MmStrategy::simclr: return "simclr";
    case MmStrategy::concat: return "concat";
    case MmStrategy::sep_shared: return "sep_shared";
    case MmStrategy::sep_sep: return "sep_sep";
  }
  return "?";
}

std::string_view to_string(MlStrategy s) {
  switch (s) {
    case MlStrategy::no_proj: return "no_proj";
    case MlStrategy::proj: return "proj";
    case MlStrategy::msa: return "msa";
    case MlStrategy::tel: return "tel";
    case MlStrategy::te: return "te";
  }
  return "?";
}

MmStrategy parse_mm_strategy(std::string_view name) {
  for (auto s : {MmStrategy::simclr, MmStrategy::concat, MmStrategy::sep_shared, MmStrategy::sep_sep}) {
    if (to_string(s) == name) return s;
  }
  throw ValidationError("train.mm_strategy must be one of simclr, concat, sep_shared, sep_sep (got '" +
                        std::string(name) + "')");
}

MlStrategy parse_ml_strategy(std::string_view name) {
  for (auto s : {MlStrategy::no_proj, MlStrategy::proj, MlStrategy::msa, MlStrategy::tel, MlStrategy::te}) {
    if (to_string(s) == name) return s;
  }
  throw ValidationError("train.ml_strategy must be one of no_proj, proj, msa, tel, te (got '" +
                        std::string(name) + "')");
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* field) {
    if (v <= 0) throw ValidationError(std::string("model.") + field + " must be positive");
  };
  positive(derm_dim, "derm_dim");
  positive(clinic_dim, "clinic_dim");
  for (int w : encoder_hidden) positive(w, "encoder_hidden");
  positive(feature_dim, "feature_dim");
  positive(projection_dim, "projection_dim");
  positive(label_dim, "label_dim");
  positive(ff_dim, "ff_dim");
  if (class_counts.empty()) throw ValidationError("model.class_counts must name at least one label");
  for (std::size_t k = 0; k < class_counts.size(); ++k) {
    if (class_counts[k] < 2) {
      throw ValidationError("model.class_counts[" + std::to_string(k) + "] must be >= 2");
    }
  }
  if (attention_heads != 1) throw ValidationError("model.attention_heads must be 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("model.dropout must be in [0, 1)");
}

// ---------------------------------------------------------------------------

Linear::Linear(int in, int out, bool with_bias) : weight(in, out), bias(with_bias ? 1 : 0, out) {}

Var Linear::forward(Tape& tape, Var x) {
  Var y = ops::matmul(x, tape.parameter(weight));
  return has_bias() ? ops::add_row(y, tape.parameter(bias)) : y;
}

void Linear::init(std::uint64_t seed, const std::string& name) {
  Rng rng(derive_seed(seed, name));
  const double bound = 1.0 / std::sqrt(static_cast<double>(in()));
  for (Eigen::Index i = 0; i < weight.value.size(); ++i) weight.value.data()[i] = rng.uniform(-bound, bound);
  for (Eigen::Index i = 0; i < bias.value.size(); ++i) bias.value.data()[i] = rng.uniform(-bound, bound);
  round_to_float(weight.value);
  round_to_float(bias.value);
}

void Linear::collect(const std::string& prefix, std::vector<NamedParameter>& out) {
  out.push_back({prefix + ".weight", &weight});
  if (has_bias()) out.push_back({prefix + ".bias", &bias});
}

// ---------------------------------------------------------------------------

Encoder::Encoder(std::vector<int> widths) {
  if (widths.size() < 2) throw ValidationError("encoder needs at least input and feature widths");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) layers.emplace_back(widths[i], widths[i + 1]);
}

Var Encoder::forward(Tape& tape, Var x) {
  if (x.cols() != input_dim()) {
    throw ShapeError("encoder expects " + std::to_string(input_dim()) + " input columns, got " +
                     std::to_string(x.cols()));
  }
  for (Linear& layer : layers) x = ops::relu(layer.forward(tape, x));
  return x;
}

void Encoder::init(std::uint64_t seed, const std::string& name) {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].init(seed, name + "." + std::to_string(i));
}

void Encoder::collect(const std::string& prefix, std::vector<NamedParameter>& out) {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + "." + std::to_string(i), out);
}

// ---------------------------------------------------------------------------

ProjectionHead::ProjectionHead(int in, int out) : hidden(in, in), output(in, out) {}

Var ProjectionHead::forward(Tape& tape, Var h) {
  if (h.cols() != hidden.in()) throw ShapeError("projection head input width mismatch");
  return output.forward(tape, ops::relu(hidden.forward(tape, h)));
}

void ProjectionHead::init(std::uint64_t seed, const std::string& name) {
  hidden.init(seed, name + ".hidden");
  output.init(seed, name + ".output");
}

void ProjectionHead::collect(const std::string& prefix, std::vector<NamedParameter>& out) {
  hidden.collect(prefix + ".hidden", out);
  output.collect(prefix + ".output", out);
}

// ---------------------------------------------------------------------------

LabelProjection::LabelProjection(int in, int out, int label_count) {
  if (label_count <= 0) throw ValidationError("label projection needs K >= 1");
  heads.reserve(static_cast<std::size_t>(label_count));
  for (int k = 0; k < label_count; ++k) heads.emplace_back(in, out);
}

std::vector<Var> LabelProjection::forward(Tape& tape, Var h_cat) {
  std::vector<Var> out;
  out.reserve(heads.size());
  for (Linear& head : heads) {
    if (h_cat.cols() != head.in()) throw ShapeError("label projection input width mismatch");
    out.push_back(head.forward(tape, h_cat));
  }
  return out;
}

void LabelProjection::init(std::uint64_t seed, const std::string& name) {
  for (std::size_t k = 0; k < heads.size(); ++k) heads[k].init(seed, name + "." + std::to_string(k));
}

void LabelProjection::collect(const std::string& prefix, std::vector<NamedParameter>& out) {
  for (std::size_t k = 0; k < heads.size(); ++k) heads[k].collect(prefix + "." + std::to_string(k), out);
}

// ---------------------------------------------------------------------------

SelfAttention::SelfAttention(int dim)
    : query(dim, dim), key(dim, dim, false), value(dim, dim), output(dim, dim) {}

Var SelfAttention::forward(Tape& tape, Var x, int tokens) {
  Var q = query.forward(tape, x);
  Var k = key.forward(tape, x);
  Var v = value.forward(tape, x);
  const double scale = 1.0 / std::sqrt(static_cast<double>(x.cols()));
  return output.forward(tape, ops::grouped_attention(q, k, v, tokens, scale));
}

void SelfAttention::init(std::uint64_t seed, const std::string& name) {
  query.init(seed, name + ".query");
  key.init(seed, name + ".key");
  value.init(seed, name + ".value");
  output.init(seed, name + ".output");
}

void SelfAttention::collect(const std::string& prefix, std::vector<NamedParameter>& out) {
  query.collect(prefix + ".query", out);
  key.collect(prefix + ".key", out);
  value.collect(prefix + ".value", out);
  output.collect(prefix + ".output", out);
}

// ---------------------------------------------------------------------------

namespace {

LayerNormParams make_norm(int dim) {
  LayerNormParams n{Parameter(1, dim), Parameter(1, dim)};
  n.gamma.value.setOnes();
  return n;
}

Var apply_norm(Tape& tape, LayerNormParams& n, Var x) {
  return ops::add_row(ops::mul_row(ops::layer_norm_rows(x), tape.parameter(n.gamma)), tape.parameter(n.beta));
}

Var maybe_dropout(Var x, const ForwardMode& mode) {
  return mode.dropout_active() ? ops::dropout(x, mode.dropout, *mode.rng) : x;
}

}  // namespace

TransformerEncoderLayer::TransformerEncoderLayer(int dim, int ff_dim)
    : norm1(make_norm(dim)), norm2(make_norm(dim)), attention(dim), ff1(dim, ff_dim), ff2(ff_dim, dim) {}

Var TransformerEncoderLayer::forward(Tape& tape, Var x, int tokens, const ForwardMode& mode) {
  Var attended = attention.forward(tape, apply_norm(tape, norm1, x), tokens);
  Var y = ops::add(x, maybe_dropout(attended, mode));
  Var hidden = maybe_dropout(ops::relu(ff1.forward(tape, apply_norm(tape, norm2, y))), mode);
  return ops::add(y, maybe_dropout(ff2.forward(tape, hidden), mode));
}

void TransformerEncoderLayer::init(std::uint64_t seed, const std::string& name) {
  norm1 = make_norm(static_cast<int>(norm1.gamma.value.cols()));
  norm2 = make_norm(static_cast<int>(norm2.gamma.value.cols()));
  attention.init(seed, name + ".attention");
  ff1.init(seed, name + ".ff1");
  ff2.init(seed, name + ".ff2");
}

void TransformerEncoderLayer::collect(const std::string& prefix, std::vector<NamedParameter>& out) {
  out.push_back({prefix + ".norm1.gamma", &norm1.gamma});
  out.push_back({prefix + ".norm1.beta", &norm1.beta});
  attention.collect(prefix + ".attention", out);
  out.push_back({prefix + ".norm2.gamma", &norm2.gamma});
  out.push_back({prefix + ".norm2.beta", &norm2.beta});
  ff1.collect(prefix + ".ff1", out);
  ff2.collect(prefix + ".ff2", out);
}

// ---------------------------------------------------------------------------

RelationModule::RelationModule(MlStrategy kind_, int dim, int ff_dim) : kind(kind_) {
  switch (kind) {
    case MlStrategy::msa: bare_attention.emplace(dim); break;
    case MlStrategy::tel: layers.emplace_back(dim, ff_dim); break;
    case MlStrategy::te:
      layers.emplace_back(dim, ff_dim);
      layers.emplace_back(dim, ff_dim);
      break;
    default: throw ValidationError("relation module requires strategy msa, tel or te");
  }
}

std::vector<Var> RelationModule::forward(Tape& tape, std::span<const Var> tokens, const ForwardMode& mode) {
  if (tokens.empty()) throw ShapeError("relation module needs at least one token");
  for (const Var& t : tokens) {
    if (t.cols() != tokens[0].cols() || t.rows() != tokens[0].rows()) {
      throw ShapeError("relation module tokens must share one embedding width");
    }
  }
  const auto k = static_cast<int>(tokens.size());
  Var x = ops::interleave_rows(tokens);
  if (bare_attention) {
    x = ops::add(x, maybe_dropout(bare_attention->forward(tape, x, k), mode));
  }
  for (TransformerEncoderLayer& layer : layers) x = layer.forward(tape, x, k, mode);
  std::vector<Var> out;
  out.reserve(tokens.size());
  for (int j = 0; j < k; ++j) out.push_back(ops::strided_rows(x, k, j));
  return out;
}

void RelationModule::init(std::uint64_t seed, const std::string& name) {
  if (bare_attention) bare_attention->init(seed, name + ".attention");
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].init(seed, name + ".layer" + std::to_string(i));
}

void RelationModule::collect(const std::string& prefix, std::vector<NamedParameter>& out) {
  if (bare_attention) bare_attention->collect(prefix + ".attention", out);
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(prefix + ".layer" + std::to_string(i), out);
}

// ---------------------------------------------------------------------------

ClassificationHeads::ClassificationHeads(int in, std::span<const int> class_counts) {
  for (int c : class_counts) heads.emplace_back(in, c);
}

std::vector<Var> ClassificationHeads::forward(Tape& tape, std::span<const Var> tokens) {
  if (tokens.size() != heads.size()) {
    throw ShapeError("classification heads expect " + std::to_string(heads.size()) + " tokens, got " +
                     std::to_string(tokens.size()));
  }
  std::vector<Var> out;
  out.reserve(heads.size());
  for (std::size_t k = 0; k < heads.size(); ++k) {
    if (tokens[k].cols() != heads[k].in()) throw ShapeError("classification head input width mismatch");
    out.push_back(heads[k].forward(tape, tokens[k]));
  }
  return out;
}

void ClassificationHeads::init(std::uint64_t seed, const std::string& name) {
  for (std::size_t k = 0; k < heads.size(); ++k) heads[k].init(seed, name + "." + std::to_string(k));
}

void ClassificationHeads::collect(const std::string& prefix, std::vector<NamedParameter>& out) {
  for (std::size_t k = 0; k < heads.size(); ++k) heads[k].collect(prefix + "." + std::to_string(k), out);
}

// ---------------------------------------------------------------------------

Network::Network(ModelConfig config, MmStrategy mm) : config_(std::move(config)), mm_(mm) {
  config_.validate();
  std::vector<int> derm{config_.derm_dim};
  std::vector<int> clinic{config_.clinic_dim};
  for (int w : config_.encoder_hidden) {
    derm.push_back(w);
    clinic.push_back(w);
  }
  derm.push_back(config_.feature_dim);
  clinic.push_back(config_.feature_dim);
  encoder_derm = Encoder(derm);
  encoder_clinic = Encoder(clinic);

  const int f = config_.feature_dim;
  const int z = config_.projection_dim;
  switch (mm_) {
    case MmStrategy::concat: head_concat.emplace(2 * f, z); break;
    case MmStrategy::sep_shared:
      head_derm.emplace(f, z);
      head_clinic.emplace(f, z);
      head_mm_shared.emplace(f, z);
      break;
    case MmStrategy::sep_sep:
      head_derm.emplace(f, z);
      head_clinic.emplace(f, z);
      head_mm_derm.emplace(f, z);
      head_mm_clinic.emplace(f, z);
      break;
    case MmStrategy::simclr:
      head_derm.emplace(f, z);
      head_clinic.emplace(f, z);
      break;
  }
}

void Network::attach_classifier(MlStrategy ml) {
  ml_ = ml;
  const int fused = 2 * config_.feature_dim;
  const int k = config_.label_count();
  label_projection.reset();
  relation.reset();
  if (ml == MlStrategy::no_proj) {
    classifier.emplace(fused, config_.class_counts);
    return;
  }
  label_projection.emplace(fused, config_.label_dim, k);
  if (ml != MlStrategy::proj) relation.emplace(ml, config_.label_dim, config_.ff_dim);
  classifier.emplace(config_.label_dim, config_.class_counts);
}

void Network::initialize(std::uint64_t seed) {
  encoder_derm.init(seed, "encoder.derm");
  encoder_clinic.init(seed, "encoder.clinic");
  if (head_derm) head_derm->init(seed, "head.derm");
  if (head_clinic) head_clinic->init(seed, "head.clinic");
  if (head_concat) head_concat->init(seed, "head.concat");
  if (head_mm_shared) head_mm_shared->init(seed, "head.mm_shared");
  if (head_mm_derm) head_mm_derm->init(seed, "head.mm_derm");
  if (head_mm_clinic) head_mm_clinic->init(seed, "head.mm_clinic");
  initialize_classifier(seed);
}

void Network::initialize_classifier(std::uint64_t seed) {
  if (label_projection) label_projection->init(seed, "label_projection");
  if (relation) relation->init(seed, "relation");
  if (classifier) classifier->init(seed, "classifier");
}

std::vector<NamedParameter> Network::encoder_parameters() {
  std::vector<NamedParameter> out;
  encoder_derm.collect("encoder.derm", out);
  encoder_clinic.collect("encoder.clinic", out);
  return out;
}

std::vector<NamedParameter> Network::classifier_parameters() {
  std::vector<NamedParameter> out;
  if (label_projection) label_projection->collect("label_projection", out);
  if (relation) relation->collect("relation", out);
  if (classifier) classifier->collect("classifier", out);
  return out;
}

std::vector<NamedParameter> Network::parameters() {
  std::vector<NamedParameter> out = encoder_parameters();
  if (head_derm) head_derm->collect("head.derm", out);
  if (head_clinic) head_clinic->collect("head.clinic", out);
  if (head_concat) head_concat->collect("head.concat", out);
  if (head_mm_shared) head_mm_shared->collect("head.mm_shared", out);
  if (head_mm_derm) head_mm_derm->collect("head.mm_derm", out);
  if (head_mm_clinic) head_mm_clinic->collect("head.mm_clinic", out);
  for (NamedParameter& p : classifier_parameters()) out.push_back(p);
  return out;
}

void Network::set_encoders_trainable(bool trainable) {
  for (NamedParameter& p : encoder_parameters()) p.param->trainable = trainable;
}

void Network::zero_grad() {
  for (NamedParameter& p : parameters()) p.param->zero_grad();
}

Var Network::fused_features(Tape& tape, Var x_derm, Var x_clinic) {
  std::vector<Var> parts{encode_derm(tape, x_derm), encode_clinic(tape, x_clinic)};
  return ops::concat_cols(parts);
}

ClassifierOutput Network::classify(Tape& tape, Var h_cat, const ForwardMode& mode) {
  if (!classifier) throw Error("network has no classifier stack attached");
  ClassifierOutput out;
  if (label_projection) {
    out.pre_relation = label_projection->forward(tape, h_cat);
  } else {
    out.pre_relation.assign(classifier->heads.size(), h_cat);
  }
  out.embeddings = relation ? relation->forward(tape, out.pre_relation, mode) : out.pre_relation;
  out.logits = classifier->forward(tape, out.embeddings);
  return out;
}

std::pair<Matrix, Matrix> Network::pair_embeddings(const Matrix& x_derm, const Matrix& x_clinic) {
  Tape tape;
  Var hd = encode_derm(tape, tape.constant(x_derm));
  Var hc = encode_clinic(tape, tape.constant(x_clinic));
  Var zd = hd;
  Var zc = hc;
  if (head_mm_derm && head_mm_clinic) {
    zd = head_mm_derm->forward(tape, hd);
    zc = head_mm_clinic->forward(tape, hc);
  } else if (head_mm_shared) {
    zd = head_mm_shared->forward(tape, hd);
    zc = head_mm_shared->forward(tape, hc);
  }
  // Var::value() refers into the tape, so take both only after recording.
  return {zd.value(), zc.value()};
}

Matrix Network::features(const Matrix& x_derm, const Matrix& x_clinic) {
  Tape tape;
  return fused_features(tape, tape.constant(x_derm), tape.constant(x_clinic)).value();
}

}  // namespace sm3
