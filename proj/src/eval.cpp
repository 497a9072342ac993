#include "sm3/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "sm3/errors.hpp"
#include "sm3/functional.hpp"
#include "sm3/json_fields.hpp"
#include "sm3/losses.hpp"

namespace sm3 {

using nlohmann::json;

PairMatchReport pair_match(const Matrix& z_derm, const Matrix& z_clinic) {
  if (z_derm.rows() < 1) throw ValidationError("pair matching needs at least one query");
  if (z_derm.rows() != z_clinic.rows() || z_derm.cols() != z_clinic.cols()) {
    throw ShapeError("pair matching: embedding matrices differ in shape");
  }
  if (!z_derm.allFinite() || !z_clinic.allFinite()) throw NonFiniteError("pair matching: non-finite embedding");
  auto unit = [](const Matrix& z) {
    Matrix out = z;
    for (Eigen::Index i = 0; i < out.rows(); ++i) out.row(i) /= std::max(out.row(i).norm(), kNormGuard);
    return out;
  };
  const Matrix scores = unit(z_derm) * unit(z_clinic).transpose();
  const Eigen::Index m = scores.rows();

  PairMatchReport r;
  r.m = static_cast<int>(m);
  int hit1 = 0, hit5 = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const double own = scores(i, i);
    double rank = 1.0;
    for (Eigen::Index j = 0; j < m; ++j) {
      if (j == i) continue;
      if (scores(i, j) > own) {
        rank += 1.0;
      } else if (scores(i, j) == own) {
        rank += 0.5;
      }
    }
    r.ranks.push_back(rank);
    hit1 += rank <= 1.0;
    hit5 += rank <= 5.0;
  }
  r.avg_rank = std::accumulate(r.ranks.begin(), r.ranks.end(), 0.0) / static_cast<double>(m);
  r.acc_at_1 = hit1 / static_cast<double>(m);
  r.acc_at_5 = hit5 / static_cast<double>(m);
  return r;
}

std::optional<double> auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the midrank sum of the positives keeps everything integral.
  long long twice_rank_sum = 0;
  long long positives = 0;
  for (std::size_t start = 0; start < n;) {
    std::size_t end = start;
    while (end < n && scores[order[end]] == scores[order[start]]) ++end;
    const long long twice_midrank = static_cast<long long>(start + 1 + end);
    for (std::size_t t = start; t < end; ++t) {
      if (labels[order[t]] != 0) {
        twice_rank_sum += twice_midrank;
        ++positives;
      }
    }
    start = end;
  }
  const long long negatives = static_cast<long long>(n) - positives;
  if (positives == 0 || negatives == 0) return std::nullopt;
  // Pairs won, doubled: 2 * (rank_sum - P(P+1)/2).
  const long long twice_wins = twice_rank_sum - positives * (positives + 1);
  return (static_cast<double>(twice_wins) / 2.0) / static_cast<double>(positives * negatives);
}

ConfusionMetrics confusion_metrics(std::span<const int> predictions, std::span<const int> labels, int positive_class) {
  if (predictions.empty()) throw ValidationError("confusion metrics need at least one prediction");
  if (predictions.size() != labels.size()) throw ShapeError("confusion metrics: length mismatch");
  ConfusionMetrics c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pred = predictions[i] == positive_class;
    const bool truth = labels[i] == positive_class;
    if (truth) {
      pred ? ++c.tp : ++c.fn;
    } else {
      pred ? ++c.fp : ++c.tn;
    }
  }
  auto ratio = [](long num, long den, bool& undefined) {
    undefined = den == 0;
    return undefined ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  c.sensitivity = ratio(c.tp, c.tp + c.fn, c.sensitivity_undefined);
  c.specificity = ratio(c.tn, c.tn + c.fp, c.specificity_undefined);
  c.precision = ratio(c.tp, c.tp + c.fp, c.precision_undefined);
  return c;
}

MetricsReport classification_metrics(std::span<const Matrix> probabilities, const IndexMatrix& labels) {
  if (static_cast<Eigen::Index>(probabilities.size()) != labels.cols()) {
    throw ShapeError("metrics: one probability matrix per label required");
  }
  MetricsReport r;
  double auc_sum = 0.0, designated_sum = 0.0;
  int auc_count = 0, designated_count = 0;
  for (std::size_t k = 0; k < probabilities.size(); ++k) {
    const Matrix& p = probabilities[k];
    if (p.rows() != labels.rows()) throw ShapeError("metrics: probability rows differ from label rows");
    const auto col = static_cast<Eigen::Index>(k);
    std::vector<int> truth(static_cast<std::size_t>(labels.rows()));
    std::vector<int> pred(truth.size());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      Eigen::Index best = 0;
      p.row(i).maxCoeff(&best);
      pred[static_cast<std::size_t>(i)] = static_cast<int>(best);
      truth[static_cast<std::size_t>(i)] = labels(i, col);
    }
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      ClassMetrics m;
      m.label = static_cast<int>(k);
      m.cls = static_cast<int>(c);
      m.designated = c == p.cols() - 1;
      std::vector<double> score(truth.size());
      std::vector<int> positive(truth.size());
      for (std::size_t i = 0; i < truth.size(); ++i) {
        score[i] = p(static_cast<Eigen::Index>(i), c);
        positive[i] = truth[i] == c;
      }
      m.auc = auc(score, positive);
      m.confusion = confusion_metrics(pred, truth, static_cast<int>(c));
      if (m.auc) {
        auc_sum += *m.auc;
        ++auc_count;
        if (m.designated) {
          designated_sum += *m.auc;
          ++designated_count;
        }
      }
      r.macro_sensitivity += m.confusion.sensitivity;
      r.macro_specificity += m.confusion.specificity;
      r.macro_precision += m.confusion.precision;
      r.classes.push_back(m);
    }
  }
  const double pairs = static_cast<double>(r.classes.size());
  r.macro_auc = auc_count > 0 ? auc_sum / auc_count : 0.0;
  r.designated_auc = designated_count > 0 ? designated_sum / designated_count : 0.0;
  r.macro_sensitivity /= pairs;
  r.macro_specificity /= pairs;
  r.macro_precision /= pairs;
  return r;
}

// ---------------------------------------------------------------------------

void EvalConfig::validate() const {
  for (auto [s, name] : {std::pair{&probe, "probe"}, std::pair{&finetune, "finetune"}}) {
    if (s->batch_size <= 0) throw ValidationError(std::string("eval.") + name + ".batch_size must be positive");
    if (!(s->learning_rate > 0.0)) throw ValidationError(std::string("eval.") + name + ".learning_rate must be positive");
    if (s->epochs <= 0) throw ValidationError(std::string("eval.") + name + ".epochs must be positive");
  }
  if (pair_queries < 1) throw ValidationError("eval.pair_queries must be >= 1");
}

json to_json(const EvalConfig& c) {
  auto stage = [](const StageConfig& s) {
    return json{{"batch_size", s.batch_size}, {"learning_rate", s.learning_rate}, {"epochs", s.epochs}};
  };
  return {{"probe", stage(c.probe)}, {"finetune", stage(c.finetune)}, {"pair_queries", c.pair_queries}, {"seed", c.seed}};
}

EvalConfig eval_config_from_json(const json& j) {
  EvalConfig c;
  FieldReader r(j, "eval");
  for (auto [s, name] : {std::pair{&c.probe, "probe"}, std::pair{&c.finetune, "finetune"}}) {
    if (const json* sub = r.child(name)) {
      FieldReader sr(*sub, std::string("eval.") + name);
      sr("batch_size", s->batch_size)("learning_rate", s->learning_rate)("epochs", s->epochs);
      sr.finish();
    }
  }
  r("pair_queries", c.pair_queries)("seed", c.seed);
  r.finish();
  return c;
}

namespace {

ProbeResult train_and_score(const Network& network, const Dataset& dataset, const StageConfig& stage,
                            bool encoders_trainable, std::uint64_t seed, const TrainConfig& optimizer,
                            const char* tag) {
  const ModelConfig& model = network.config();
  if (model.derm_dim != dataset.derm.cols() || model.clinic_dim != dataset.clinic.cols()) {
    throw ValidationError("checkpoint input widths do not match the dataset");
  }
  if (model.class_counts != dataset.config.class_counts) {
    throw ValidationError("checkpoint label structure does not match the dataset");
  }
  Network net = network;
  if (!net.classifier) {
    net.attach_classifier(MlStrategy::no_proj);
    net.initialize_classifier(derive_seed(seed, tag, {0}));
  }
  net.set_encoders_trainable(encoders_trainable);
  auto params = net.parameters();
  OptimizerState state;
  const AdamWConfig hyper = optimizer.optimizer(stage.learning_rate);

  const Matrix xd = gather_rows(dataset.derm, dataset.train);
  const Matrix xc = gather_rows(dataset.clinic, dataset.train);
  const IndexMatrix y = gather_rows(dataset.labels, dataset.train);
  const std::size_t n = dataset.train.size();
  const std::size_t batch = static_cast<std::size_t>(stage.batch_size);
  std::vector<double> history;
  for (int epoch = 0; epoch < stage.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle(derive_seed(seed, tag, {1, static_cast<std::uint64_t>(epoch)}));
    shuffle.shuffle(std::span(order));
    Rng dropout_rng(derive_seed(seed, tag, {2, static_cast<std::uint64_t>(epoch)}));
    ForwardMode mode{true, &dropout_rng, model.dropout};
    double weighted = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      std::span<const std::size_t> rows(order.data() + start, std::min(batch, n - start));
      net.zero_grad();
      Tape tape;
      Var h = net.fused_features(tape, tape.constant(gather_rows(xd, rows)), tape.constant(gather_rows(xc, rows)));
      Var loss = multilabel_ce(net.classify(tape, h, mode).logits, gather_rows(y, rows));
      if (!std::isfinite(loss.item())) throw NonFiniteError(std::string(tag) + " loss is not finite");
      tape.backward(loss);
      optimizer_step(params, state, hyper);
      for (const NamedParameter& np : params) {
        if (np.param->trainable) round_to_float(np.param->value);
      }
      weighted += loss.item() * static_cast<double>(rows.size());
    }
    history.push_back(weighted / static_cast<double>(n));
  }
  net.set_encoders_trainable(true);

  Tape tape;
  Var h = net.fused_features(tape, tape.constant(gather_rows(dataset.derm, dataset.test)),
                             tape.constant(gather_rows(dataset.clinic, dataset.test)));
  ClassifierOutput out = net.classify(tape, h, ForwardMode::eval());
  std::vector<Matrix> probabilities;
  for (const Var& logits : out.logits) probabilities.push_back(softmax_rows(logits.value()));
  MetricsReport report = classification_metrics(probabilities, gather_rows(dataset.labels, dataset.test));
  report.loss_history = std::move(history);
  return {std::move(report), std::move(net)};
}

}  // namespace

ProbeResult linear_probe(const Network& network, const Dataset& dataset, const EvalConfig& config,
                         const TrainConfig& optimizer) {
  config.validate();
  return train_and_score(network, dataset, config.probe, false, config.seed, optimizer, "probe");
}

ProbeResult finetune(const Network& network, const Dataset& dataset, const EvalConfig& config,
                     const TrainConfig& optimizer) {
  config.validate();
  return train_and_score(network, dataset, config.finetune, true, config.seed, optimizer, "finetune");
}

PairMatchReport evaluate_pair_matching(Network& network, const Dataset& dataset, int pair_queries) {
  if (pair_queries < 1) throw ValidationError("eval.pair_queries must be >= 1");
  if (dataset.test.size() < static_cast<std::size_t>(pair_queries)) {
    throw ValidationError("eval.pair_queries exceeds the test split (" + std::to_string(dataset.test.size()) + ")");
  }
  std::span<const std::size_t> ids(dataset.test.data(), static_cast<std::size_t>(pair_queries));
  auto [zd, zc] = network.pair_embeddings(gather_rows(dataset.derm, ids), gather_rows(dataset.clinic, ids));
  return pair_match(zd, zc);
}

json to_json(const PairMatchReport& r) {
  return {{"avg_rank", r.avg_rank}, {"acc_at_1", r.acc_at_1}, {"acc_at_5", r.acc_at_5}, {"m", r.m}};
}

json to_json(const MetricsReport& r) {
  json classes = json::array();
  for (const ClassMetrics& c : r.classes) {
    classes.push_back({{"label", c.label},
                       {"class", c.cls},
                       {"designated", c.designated},
                       {"auc", c.auc ? json(*c.auc) : json(nullptr)},
                       {"sensitivity", c.confusion.sensitivity},
                       {"specificity", c.confusion.specificity},
                       {"precision", c.confusion.precision},
                       {"precision_undefined", c.confusion.precision_undefined},
                       {"tp", c.confusion.tp},
                       {"fn", c.confusion.fn},
                       {"tn", c.confusion.tn},
                       {"fp", c.confusion.fp}});
  }
  return {{"macro_auc", r.macro_auc},
          {"macro_sensitivity", r.macro_sensitivity},
          {"macro_specificity", r.macro_specificity},
          {"macro_precision", r.macro_precision},
          {"designated_auc", r.designated_auc},
          {"classes", classes},
          {"loss_history", r.loss_history}};
}

std::string metrics_csv(const MetricsReport& r) {
  std::ostringstream out;
  out << std::setprecision(17) << "label,class,metric,value\n";
  for (const ClassMetrics& c : r.classes) {
    std::string prefix = std::to_string(c.label + 1) + "," + std::to_string(c.cls) + ",";
    out << prefix << "auc,";
    if (c.auc) out << *c.auc;
    out << '\n';
    out << prefix << "sensitivity," << c.confusion.sensitivity << '\n';
    out << prefix << "specificity," << c.confusion.specificity << '\n';
    out << prefix << "precision," << c.confusion.precision << '\n';
  }
  out << "avg,all,auc," << r.macro_auc << '\n';
  out << "avg,all,sensitivity," << r.macro_sensitivity << '\n';
  out << "avg,all,specificity," << r.macro_specificity << '\n';
  out << "avg,all,precision," << r.macro_precision << '\n';
  return out.str();
}

}  // namespace sm3
