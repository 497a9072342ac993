#include "sm3/train.hpp"

#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "sm3/errors.hpp"
#include "sm3/io.hpp"
#include "sm3/json_fields.hpp"
#include "sm3/losses.hpp"
#include "sm3/pseudolabel.hpp"

namespace sm3 {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

TrainConfig TrainConfig::full_scale() {
  TrainConfig c;
  c.stage1 = {96, 1e-6, 400};
  c.stage2 = {256, 1e-4, 150};
  return c;
}

namespace {

void check_stage(const StageConfig& s, const std::string& name) {
  if (s.batch_size <= 0) throw ValidationError("train." + name + ".batch_size must be positive");
  if (!(s.learning_rate > 0.0 && std::isfinite(s.learning_rate))) {
    throw ValidationError("train." + name + ".learning_rate must be positive");
  }
  if (s.epochs <= 0) throw ValidationError("train." + name + ".epochs must be positive");
}

json stage_json(const StageConfig& s) {
  return {{"batch_size", s.batch_size}, {"learning_rate", s.learning_rate}, {"epochs", s.epochs}};
}

void read_stage(const json* j, StageConfig& s, const std::string& name) {
  if (j == nullptr) return;
  FieldReader r(*j, "train." + name);
  r("batch_size", s.batch_size)("learning_rate", s.learning_rate)("epochs", s.epochs);
  r.finish();
}

json interval_json(const Interval& i) { return json::array({i.lo, i.hi}); }

void read_interval(FieldReader& r, const char* key, Interval& out) {
  std::vector<double> v{out.lo, out.hi};
  r(key, v);
  if (v.size() != 2) throw ValidationError(r.path(key) + " must be a [lo, hi] pair");
  out = {v[0], v[1]};
}

}  // namespace

void TrainConfig::validate() const {
  check_stage(stage1, "stage1");
  check_stage(stage2, "stage2");
  if (!(temperature > 0.0 && std::isfinite(temperature))) throw ValidationError("train.temperature must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ValidationError("train.beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("train.beta2 must be in [0, 1)");
  if (!(eps > 0.0)) throw ValidationError("train.eps must be positive");
  if (!(weight_decay >= 0.0 && std::isfinite(weight_decay))) throw ValidationError("train.weight_decay must be >= 0");
  model.validate();
  augment.validate();
}

json to_json(const ModelConfig& c) {
  return {{"derm_dim", c.derm_dim},
          {"clinic_dim", c.clinic_dim},
          {"encoder_hidden", c.encoder_hidden},
          {"feature_dim", c.feature_dim},
          {"projection_dim", c.projection_dim},
          {"label_dim", c.label_dim},
          {"class_counts", c.class_counts},
          {"attention_heads", c.attention_heads},
          {"ff_dim", c.ff_dim},
          {"dropout", c.dropout}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  FieldReader r(j, "model");
  r("derm_dim", c.derm_dim)("clinic_dim", c.clinic_dim)("encoder_hidden", c.encoder_hidden);
  r("feature_dim", c.feature_dim)("projection_dim", c.projection_dim)("label_dim", c.label_dim);
  r("class_counts", c.class_counts)("attention_heads", c.attention_heads)("ff_dim", c.ff_dim);
  r("dropout", c.dropout);
  r.finish();
  return c;
}

json to_json(const AugmentationPolicy& p) {
  return {{"noise_std", p.noise_std},
          {"mask_prob", p.mask_prob},
          {"scale_range", interval_json(p.scale_range)},
          {"crop_fraction_range", interval_json(p.crop_fraction_range)},
          {"flip_prob", p.flip_prob},
          {"jitter_strength", p.jitter_strength},
          {"blur_sigma_range", interval_json(p.blur_sigma_range)}};
}

AugmentationPolicy augmentation_from_json(const json& j) {
  AugmentationPolicy p;
  FieldReader r(j, "augment");
  r("noise_std", p.noise_std)("mask_prob", p.mask_prob);
  read_interval(r, "scale_range", p.scale_range);
  read_interval(r, "crop_fraction_range", p.crop_fraction_range);
  r("flip_prob", p.flip_prob)("jitter_strength", p.jitter_strength);
  read_interval(r, "blur_sigma_range", p.blur_sigma_range);
  r.finish();
  return p;
}

json to_json(const TrainConfig& c) {
  return {{"stage1", stage_json(c.stage1)},
          {"stage2", stage_json(c.stage2)},
          {"temperature", c.temperature},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"weight_decay", c.weight_decay},
          {"mm_strategy", std::string(to_string(c.mm_strategy))},
          {"ml_strategy", std::string(to_string(c.ml_strategy))},
          {"symmetric", c.symmetric},
          {"mirror_mm", c.mirror_mm},
          {"cluster_pre_relation", c.cluster_pre_relation},
          {"finetune_encoders", c.finetune_encoders},
          {"augment_stage2", c.augment_stage2},
          {"model", to_json(c.model)},
          {"augment", to_json(c.augment)},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  FieldReader r(j, "train");
  read_stage(r.child("stage1"), c.stage1, "stage1");
  read_stage(r.child("stage2"), c.stage2, "stage2");
  r("temperature", c.temperature)("beta1", c.beta1)("beta2", c.beta2)("eps", c.eps);
  r("weight_decay", c.weight_decay);
  std::string mm(to_string(c.mm_strategy));
  std::string ml(to_string(c.ml_strategy));
  r("mm_strategy", mm)("ml_strategy", ml);
  c.mm_strategy = parse_mm_strategy(mm);
  c.ml_strategy = parse_ml_strategy(ml);
  r("symmetric", c.symmetric)("mirror_mm", c.mirror_mm)("cluster_pre_relation", c.cluster_pre_relation);
  r("finetune_encoders", c.finetune_encoders)("augment_stage2", c.augment_stage2);
  if (const json* m = r.child("model")) c.model = model_config_from_json(*m);
  if (const json* a = r.child("augment")) c.augment = augmentation_from_json(*a);
  r("seed", c.seed);
  r.finish();
  return c;
}

// ---------------------------------------------------------------------------
// Optimizer

void optimizer_step(std::span<const NamedParameter> params, OptimizerState& state, const AdamWConfig& hyper) {
  for (const NamedParameter& np : params) {
    const Parameter& p = *np.param;
    if (p.trainable && p.has_grad && !p.grad.allFinite()) {
      throw NonFiniteError("non-finite gradient for " + np.name);
    }
  }
  for (const NamedParameter& np : params) {
    Parameter& p = *np.param;
    if (!p.trainable || !p.has_grad) continue;
    MomentState& s = state[np.name];
    if (s.step == 0) {
      s.m = Matrix::Zero(p.value.rows(), p.value.cols());
      s.v = Matrix::Zero(p.value.rows(), p.value.cols());
    }
    s.step += 1;
    s.m = hyper.beta1 * s.m + (1.0 - hyper.beta1) * p.grad;
    s.v = hyper.beta2 * s.v + (1.0 - hyper.beta2) * p.grad.cwiseProduct(p.grad);
    const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(s.step));
    p.value *= 1.0 - hyper.learning_rate * hyper.weight_decay;
    p.value.array() -= hyper.learning_rate * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + hyper.eps);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

const char* stage_name(Stage s) { return s == Stage::mm ? "mm" : "ml"; }

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  Network net = ckpt.network;
  io::BlobWriter blob;
  for (const NamedParameter& np : net.parameters()) blob.add(np.name, np.param->value);
  json ssl = json::array();
  for (const SslEpoch& e : ckpt.ssl_history) {
    ssl.push_back({{"epoch", e.epoch}, {"l_derm", e.l_derm}, {"l_clinic", e.l_clinic}, {"l_mm", e.l_mm}, {"l_total", e.l_total}});
  }
  json ce = json::array();
  for (const CeEpoch& e : ckpt.ce_history) ce.push_back({{"epoch", e.epoch}, {"l_ce", e.l_ce}});
  json manifest{{"format", "sm3-checkpoint"},
                {"version", kCheckpointVersion},
                {"stage", stage_name(ckpt.stage)},
                {"config", to_json(ckpt.config)},
                {"model", to_json(net.config())},
                {"mm_strategy", std::string(to_string(net.mm_strategy()))},
                {"ml_strategy", net.ml_strategy() ? json(std::string(to_string(*net.ml_strategy()))) : json(nullptr)},
                {"epoch", ckpt.epoch},
                {"history", {{"ssl", ssl}, {"ce", ce}}}};
  io::save_manifest_and_blob(path, std::move(manifest), blob);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  io::LoadedBlob loaded = io::load_manifest_and_blob(path, "sm3-checkpoint", kCheckpointVersion);
  const json& m = loaded.manifest;
  Checkpoint ck;
  try {
    std::string stage = m.at("stage").get<std::string>();
    if (stage != "mm" && stage != "ml") throw FormatError(path.string() + ": unknown stage '" + stage + "'");
    ck.stage = stage == "mm" ? Stage::mm : Stage::ml;
    ck.config = train_config_from_json(m.at("config"));
    ModelConfig model = model_config_from_json(m.at("model"));
    ck.network = Network(model, parse_mm_strategy(m.at("mm_strategy").get<std::string>()));
    if (!m.at("ml_strategy").is_null()) {
      ck.network.attach_classifier(parse_ml_strategy(m.at("ml_strategy").get<std::string>()));
    }
    ck.epoch = m.at("epoch").get<int>();
    for (const json& e : m.at("history").at("ssl")) {
      ck.ssl_history.push_back({e.at("epoch").get<int>(), e.at("l_derm").get<double>(), e.at("l_clinic").get<double>(),
                                e.at("l_mm").get<double>(), e.at("l_total").get<double>()});
    }
    for (const json& e : m.at("history").at("ce")) {
      ck.ce_history.push_back({e.at("epoch").get<int>(), e.at("l_ce").get<double>()});
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  auto params = ck.network.parameters();
  if (params.size() != loaded.entries.size()) {
    throw FormatError(path.string() + ": tensor count does not match the declared model");
  }
  for (const NamedParameter& np : params) {
    Matrix v = io::read_matrix(loaded.blob, io::find_entry(loaded.entries, np.name));
    if (v.rows() != np.param->value.rows() || v.cols() != np.param->value.cols()) {
      throw FormatError(path.string() + ": tensor '" + np.name + "' has the wrong shape");
    }
    np.param->value = std::move(v);
    np.param->zero_grad();
  }
  return ck;
}

void write_loss_csv(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ostringstream out;
  out << std::setprecision(17);
  if (ckpt.stage == Stage::mm) {
    out << "epoch,l_derm,l_clinic,l_mm,l_total\n";
    for (const SslEpoch& e : ckpt.ssl_history) {
      out << e.epoch << ',' << e.l_derm << ',' << e.l_clinic << ',' << e.l_mm << ',' << e.l_total << '\n';
    }
  } else {
    out << "epoch,l_ce\n";
    for (const CeEpoch& e : ckpt.ce_history) out << e.epoch << ',' << e.l_ce << '\n';
  }
  io::write_text(path, out.str());
}

// ---------------------------------------------------------------------------
// Training

namespace {

void round_parameters(std::span<const NamedParameter> params) {
  for (const NamedParameter& np : params) {
    if (np.param->trainable) round_to_float(np.param->value);
  }
}

struct BatchLoss {
  Var total;
  double derm = 0.0;
  double clinic = 0.0;
  double mm = 0.0;
};

BatchLoss stage1_loss(Tape& tape, Network& net, const TrainConfig& cfg, const Matrix& xd1, const Matrix& xd2,
                      const Matrix& xc1, const Matrix& xc2) {
  Var hd1 = net.encode_derm(tape, tape.constant(xd1));
  Var hd2 = net.encode_derm(tape, tape.constant(xd2));
  Var hc1 = net.encode_clinic(tape, tape.constant(xc1));
  Var hc2 = net.encode_clinic(tape, tape.constant(xc2));
  const double tau = cfg.temperature;
  auto contrast = [&](Var a, Var b) { return cfg.symmetric ? nt_xent_symmetric(a, b, tau) : nt_xent(a, b, tau); };

  BatchLoss out;
  if (cfg.mm_strategy == MmStrategy::concat) {
    std::vector<Var> v1{hd1, hc1};
    std::vector<Var> v2{hd2, hc2};
    Var z1 = net.head_concat->forward(tape, ops::concat_cols(v1));
    Var z2 = net.head_concat->forward(tape, ops::concat_cols(v2));
    out.total = contrast(z1, z2);
    return out;
  }

  ContrastiveViews own{net.head_derm->forward(tape, hd1), net.head_derm->forward(tape, hd2),
                       net.head_clinic->forward(tape, hc1), net.head_clinic->forward(tape, hc2)};
  if (cfg.mm_strategy == MmStrategy::simclr) {
    Var derm = contrast(own.derm1, own.derm2);
    Var clinic = contrast(own.clinic1, own.clinic2);
    out.total = ops::add(derm, clinic);
    out.derm = derm.item();
    out.clinic = clinic.item();
    return out;
  }

  ProjectionHead& mm_derm = cfg.mm_strategy == MmStrategy::sep_sep ? *net.head_mm_derm : *net.head_mm_shared;
  ProjectionHead& mm_clinic = cfg.mm_strategy == MmStrategy::sep_sep ? *net.head_mm_clinic : *net.head_mm_shared;
  ContrastiveViews cross{mm_derm.forward(tape, hd1), mm_derm.forward(tape, hd2), mm_clinic.forward(tape, hc1),
                         mm_clinic.forward(tape, hc2)};
  SslLoss loss = l_ssl(own, cross, tau, cfg.symmetric);
  if (cfg.mirror_mm) {
    Var mm = l_mm(cross.derm1, cross.derm2, cross.clinic1, cross.clinic2, tau, true);
    loss.mm = mm;
    loss.total = ops::add(ops::add(loss.derm, loss.clinic), mm);
  }
  out.total = loss.total;
  out.derm = loss.derm.item();
  out.clinic = loss.clinic.item();
  out.mm = loss.mm.item();
  return out;
}

void check_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw NonFiniteError(what + " is not finite");
}

std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

}  // namespace

ModelConfig model_for_dataset(const ModelConfig& model, const Dataset& dataset) {
  ModelConfig m = model;
  m.derm_dim = static_cast<int>(dataset.derm.cols());
  m.clinic_dim = static_cast<int>(dataset.clinic.cols());
  m.class_counts = dataset.config.class_counts;
  return m;
}

Checkpoint pretrain_mm(const Dataset& dataset, const TrainConfig& config, const EpochLogger& log) {
  config.validate();
  TrainConfig cfg = config;
  cfg.model = model_for_dataset(config.model, dataset);
  cfg.model.validate();
  if (dataset.derm.cols() == 0 || dataset.clinic.cols() == 0) {
    throw ValidationError("pretrain-mm needs a dataset with both modalities");
  }
  const std::size_t batch = static_cast<std::size_t>(cfg.stage1.batch_size);
  if (dataset.train.size() < batch || batch < 2) {
    throw ValidationError("train.stage1.batch_size must be in [2, " + std::to_string(dataset.train.size()) +
                          "] for this train split");
  }

  Network net(cfg.model, cfg.mm_strategy);
  net.initialize(derive_seed(cfg.seed, "init"));
  auto params = net.parameters();
  OptimizerState state;
  const AdamWConfig hyper = cfg.optimizer(cfg.stage1.learning_rate);
  const std::uint64_t view_seed = derive_seed(cfg.seed, "views");
  const std::size_t batches = dataset.train.size() / batch;

  Checkpoint ck;
  ck.stage = Stage::mm;
  ck.config = cfg;
  for (int epoch = 0; epoch < cfg.stage1.epochs; ++epoch) {
    std::vector<std::size_t> order = dataset.train;
    Rng shuffle(derive_seed(cfg.seed, "shuffle", {1, static_cast<std::uint64_t>(epoch)}));
    shuffle.shuffle(std::span(order));
    double sum_derm = 0.0, sum_clinic = 0.0, sum_mm = 0.0, sum_total = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      std::span<const std::size_t> ids(order.data() + b * batch, batch);
      Matrix xd = gather_rows(dataset.derm, ids);
      Matrix xc = gather_rows(dataset.clinic, ids);
      const auto e = static_cast<std::uint64_t>(epoch);
      Matrix xd1 = augment_rows(xd, ids, cfg.augment, view_seed, 0, e);
      Matrix xd2 = augment_rows(xd, ids, cfg.augment, view_seed, 1, e);
      Matrix xc1 = augment_rows(xc, ids, cfg.augment, view_seed, 2, e);
      Matrix xc2 = augment_rows(xc, ids, cfg.augment, view_seed, 3, e);

      net.zero_grad();
      Tape tape;
      BatchLoss loss = stage1_loss(tape, net, cfg, xd1, xd2, xc1, xc2);
      check_finite(loss.total.item(), "stage-1 loss at epoch " + std::to_string(epoch + 1));
      tape.backward(loss.total);
      optimizer_step(params, state, hyper);
      round_parameters(params);
      sum_derm += loss.derm;
      sum_clinic += loss.clinic;
      sum_mm += loss.mm;
      sum_total += loss.total.item();
    }
    const double nb = static_cast<double>(batches);
    SslEpoch rec{epoch + 1, sum_derm / nb, sum_clinic / nb, sum_mm / nb, 0.0};
    rec.l_total = cfg.mm_strategy == MmStrategy::concat ? sum_total / nb : (rec.l_derm + rec.l_clinic) + rec.l_mm;
    ck.ssl_history.push_back(rec);
    if (log) {
      log("stage1 epoch " + std::to_string(rec.epoch) + " l_derm=" + format_double(rec.l_derm) +
          " l_clinic=" + format_double(rec.l_clinic) + " l_mm=" + format_double(rec.l_mm) +
          " l_total=" + format_double(rec.l_total));
    }
  }
  ck.epoch = cfg.stage1.epochs;
  ck.network = std::move(net);
  return ck;
}

std::vector<Matrix> clustering_embeddings(Network& net, const Matrix& x_derm, const Matrix& x_clinic,
                                          bool pre_relation) {
  Tape tape;
  Var h = net.fused_features(tape, tape.constant(x_derm), tape.constant(x_clinic));
  ClassifierOutput out = net.classify(tape, h, ForwardMode::eval());
  const std::vector<Var>& src = pre_relation ? out.pre_relation : out.embeddings;
  std::vector<Matrix> result;
  for (const Var& v : src) result.push_back(v.value());
  return result;
}

Checkpoint pretrain_ml(const Dataset& dataset, const Checkpoint& stage1, const TrainConfig& config,
                       const EpochLogger& log, PseudoLabelSet* final_labels) {
  config.validate();
  if (stage1.stage != Stage::mm) throw ValidationError("pretrain-ml needs a stage-1 checkpoint");
  const ModelConfig& model = stage1.network.config();
  if (model.derm_dim != dataset.derm.cols() || model.clinic_dim != dataset.clinic.cols() ||
      model.class_counts != dataset.config.class_counts) {
    throw ValidationError("stage-1 checkpoint does not match the dataset dimensions or label structure");
  }
  TrainConfig cfg = config;
  cfg.model = model;
  cfg.mm_strategy = stage1.network.mm_strategy();
  const std::size_t n = dataset.train.size();
  const std::size_t batch = static_cast<std::size_t>(cfg.stage2.batch_size);
  for (int c : model.class_counts) {
    if (static_cast<std::size_t>(c) > n) throw ValidationError("train split is smaller than a label's class count");
  }

  Network net = stage1.network;
  net.attach_classifier(cfg.ml_strategy);
  net.initialize_classifier(derive_seed(cfg.seed, "classifier-init"));
  net.set_encoders_trainable(cfg.finetune_encoders);
  auto params = net.parameters();
  OptimizerState state;
  const AdamWConfig hyper = cfg.optimizer(cfg.stage2.learning_rate);
  const Matrix xd = gather_rows(dataset.derm, dataset.train);
  const Matrix xc = gather_rows(dataset.clinic, dataset.train);
  const std::uint64_t label_seed = derive_seed(cfg.seed, "stage2");
  const std::uint64_t view_seed = derive_seed(cfg.seed, "views", {2});

  Checkpoint ck;
  ck.stage = Stage::ml;
  ck.config = cfg;
  ck.ssl_history = stage1.ssl_history;
  std::optional<PseudoLabelSet> previous;
  for (int epoch = 0; epoch < cfg.stage2.epochs; ++epoch) {
    std::vector<Matrix> embeddings = clustering_embeddings(net, xd, xc, cfg.cluster_pre_relation);
    PseudoLabelSet labels = generate_pseudo_multilabels(embeddings, model.class_counts, label_seed, epoch,
                                                        previous ? &*previous : nullptr);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(cfg.seed, "shuffle", {2, static_cast<std::uint64_t>(epoch)}));
    shuffle.shuffle(std::span(order));
    Rng dropout_rng(derive_seed(cfg.seed, "dropout", {2, static_cast<std::uint64_t>(epoch)}));
    ForwardMode mode{true, &dropout_rng, model.dropout};
    double weighted = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      std::span<const std::size_t> rows(order.data() + start, std::min(batch, n - start));
      net.zero_grad();
      Tape tape;
      Matrix bd = gather_rows(xd, rows);
      Matrix bc = gather_rows(xc, rows);
      if (cfg.augment_stage2) {
        std::vector<std::size_t> ids(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) ids[i] = dataset.train[rows[i]];
        const auto e = static_cast<std::uint64_t>(epoch);
        bd = augment_rows(bd, ids, cfg.augment, view_seed, 0, e);
        bc = augment_rows(bc, ids, cfg.augment, view_seed, 1, e);
      }
      Var h = net.fused_features(tape, tape.constant(bd), tape.constant(bc));
      ClassifierOutput out = net.classify(tape, h, mode);
      Var loss = multilabel_ce(out.logits, gather_rows(labels.assignments, rows));
      check_finite(loss.item(), "stage-2 loss at epoch " + std::to_string(epoch + 1));
      tape.backward(loss);
      optimizer_step(params, state, hyper);
      round_parameters(params);
      weighted += loss.item() * static_cast<double>(rows.size());
    }
    CeEpoch rec{epoch + 1, weighted / static_cast<double>(n)};
    ck.ce_history.push_back(rec);
    if (log) log("stage2 epoch " + std::to_string(rec.epoch) + " l_ce=" + format_double(rec.l_ce));
    previous = std::move(labels);
  }
  if (final_labels != nullptr && previous) *final_labels = *previous;
  ck.epoch = cfg.stage2.epochs;
  ck.network = std::move(net);
  return ck;
}

}  // namespace sm3
