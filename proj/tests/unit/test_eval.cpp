#include <doctest.h>

#include <cmath>

#include <Eigen/QR>

#include "oracles.hpp"
#include "sm3/errors.hpp"
#include "sm3/eval.hpp"

using namespace sm3;
using sm3::testing::random_matrix;

namespace {

Dataset small_dataset(std::uint64_t seed = 2) {
  GeneratorConfig g;
  g.n_samples = 240;
  g.latent_dim = 4;
  g.derm_dim = 10;
  g.clinic_dim = 8;
  g.class_counts = {3, 2};
  g.seed = seed;
  return generate(g);
}

ModelConfig small_model(const Dataset& ds) {
  ModelConfig m;
  m.derm_dim = static_cast<int>(ds.derm.cols());
  m.clinic_dim = static_cast<int>(ds.clinic.cols());
  m.class_counts = ds.config.class_counts;
  m.encoder_hidden = {12};
  m.feature_dim = 6;
  m.projection_dim = 8;
  m.label_dim = 8;
  m.ff_dim = 16;
  return m;
}

EvalConfig quick_eval() {
  EvalConfig e;
  e.probe = {32, 1e-2, 10};
  e.finetune = {32, 1e-2, 10};
  e.pair_queries = 20;
  return e;
}

std::vector<Matrix> snapshot(std::vector<NamedParameter> params) {
  std::vector<Matrix> out;
  for (const NamedParameter& np : params) out.push_back(np.param->value);
  return out;
}

}  // namespace

TEST_CASE("pair matching examples") {
  Matrix basis = Matrix::Identity(4, 4);
  PairMatchReport perfect = pair_match(basis, basis);
  CHECK(perfect.avg_rank == 1.0);
  CHECK(perfect.acc_at_1 == 1.0);
  CHECK(perfect.acc_at_5 == 1.0);
  CHECK(perfect.m == 4);

  Matrix same = Matrix::Constant(5, 3, 1.0);
  PairMatchReport tied = pair_match(same, same);
  CHECK(tied.avg_rank == 3.0);
  CHECK(tied.acc_at_1 == 0.0);
  CHECK(tied.acc_at_5 == 1.0);

  // Query 0 prefers clinic row 1; query 1 finds itself.
  Matrix zd(2, 2), zc(2, 2);
  zd << 1, 0, 0.2, 1;
  zc << 0, 1, 0.2, 1;
  PairMatchReport r = pair_match(zd, zc);
  CHECK(r.ranks == std::vector<double>{2.0, 1.0});
  CHECK(r.avg_rank == 1.5);
  CHECK(r.acc_at_1 == 0.5);

  CHECK_THROWS_AS(pair_match(Matrix::Zero(0, 2), Matrix::Zero(0, 2)), ValidationError);
  CHECK_THROWS_AS(pair_match(basis, Matrix::Identity(3, 4)), ShapeError);
}

TEST_CASE("pair matching properties") {
  Rng rng(11);
  for (int t = 0; t < 20; ++t) {
    Matrix zd = random_matrix(30, 6, rng), zc = random_matrix(30, 6, rng);
    PairMatchReport base = pair_match(zd, zc);
    CHECK(base.acc_at_1 <= base.acc_at_5);
    CHECK(base.avg_rank >= 1.0);
    CHECK(base.avg_rank <= 30.0);

    // A shared rotation and per-row positive scaling change nothing.
    Matrix q = random_matrix(6, 6, rng).householderQr().householderQ();
    Matrix zd2 = zd * q, zc2 = zc * q;
    zd2.row(3) *= 4.0;
    zc2.row(7) *= 0.25;
    PairMatchReport rotated = pair_match(zd2, zc2);
    for (std::size_t i = 0; i < base.ranks.size(); ++i) CHECK(rotated.ranks[i] == base.ranks[i]);
  }
}

TEST_CASE("random embeddings rank near the middle") {
  Rng rng(12);
  double total = 0.0;
  for (int t = 0; t < 20; ++t) total += pair_match(random_matrix(100, 16, rng), random_matrix(100, 16, rng)).avg_rank;
  CHECK(std::abs(total / 20.0 - 50.5) < 3.0);
}

TEST_CASE("auc examples") {
  std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  std::vector<int> y{0, 0, 1, 1};
  CHECK(*auc(s, y) == 0.75);
  std::vector<double> worked{0.9, 0.8, 0.7, 0.6};
  std::vector<int> alternating{1, 0, 1, 0};
  CHECK(*auc(worked, alternating) == 0.75);
  std::vector<double> perfect{0.1, 0.2, 0.3, 0.9};
  CHECK(*auc(perfect, y) == 1.0);
  std::vector<double> reversed{0.9, 0.8, 0.3, 0.1};
  CHECK(*auc(reversed, y) == 0.0);
  std::vector<double> flat(4, 0.5);
  CHECK(*auc(flat, y) == 0.5);
  std::vector<int> single{1, 1, 1, 1};
  CHECK_FALSE(auc(s, single).has_value());
  std::vector<int> shorter{0, 1};
  CHECK_THROWS_AS(auc(s, shorter), ShapeError);
}

TEST_CASE("auc agrees with pair counting") {
  Rng rng(13);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.index(60);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse scores force plenty of ties.
      s[i] = std::round(rng.uniform() * 8.0) / 8.0;
      y[i] = rng.uniform() < 0.4 ? 1 : 0;
    }
    auto fast = auc(s, y);
    auto slow = testing::brute_auc(s, y);
    REQUIRE(fast.has_value() == slow.has_value());
    if (fast) CHECK(std::abs(*fast - *slow) < 1e-12);
  }
}

TEST_CASE("confusion metrics example") {
  // TP 3, FN 1, TN 4, FP 2 for positive class 1.
  std::vector<int> truth{1, 1, 1, 1, 0, 0, 0, 0, 0, 0};
  std::vector<int> pred{1, 1, 1, 0, 0, 0, 0, 0, 1, 1};
  ConfusionMetrics c = confusion_metrics(pred, truth, 1);
  CHECK(c.tp == 3);
  CHECK(c.fn == 1);
  CHECK(c.tn == 4);
  CHECK(c.fp == 2);
  CHECK(c.sensitivity == 0.75);
  CHECK(c.specificity == doctest::Approx(4.0 / 6.0).epsilon(1e-15));
  CHECK(c.precision == 0.6);

  std::vector<int> none(10, 0);
  ConfusionMetrics empty = confusion_metrics(none, truth, 1);
  CHECK(empty.precision_undefined);
  CHECK(empty.precision == 0.0);
  CHECK(confusion_metrics(pred, none, 1).sensitivity_undefined);
  CHECK_THROWS_AS(confusion_metrics(std::vector<int>{}, std::vector<int>{}, 1), ValidationError);
}

TEST_CASE("classification metrics average over label-class pairs") {
  Matrix p0(4, 3);
  p0 << 0.7, 0.2, 0.1,  //
      0.1, 0.8, 0.1,    //
      0.2, 0.2, 0.6,    //
      0.3, 0.4, 0.3;
  Matrix p1(4, 2);
  p1 << 0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.4, 0.6;
  IndexMatrix y(4, 2);
  y << 0, 0, 1, 1, 2, 0, 1, 1;
  std::vector<Matrix> probs{p0, p1};
  MetricsReport r = classification_metrics(probs, y);
  REQUIRE(r.classes.size() == 5);
  CHECK(r.macro_auc == 1.0);
  CHECK(r.macro_sensitivity == 1.0);
  CHECK(r.designated_auc == 1.0);
  int designated = 0;
  for (const ClassMetrics& c : r.classes) designated += c.designated;
  CHECK(designated == 2);
  CHECK(r.classes[2].designated);
  CHECK(r.classes[4].designated);

  std::string csv = metrics_csv(r);
  CHECK(csv.rfind("label,class,metric,value\n1,0,auc,1\n", 0) == 0);
  CHECK(csv.find("avg,all,auc,1\n") != std::string::npos);
  CHECK(to_json(r)["classes"].size() == 5);
}

TEST_CASE("linear probe freezes the encoders") {
  Dataset ds = small_dataset();
  Network net(small_model(ds), MmStrategy::sep_sep);
  net.initialize(3);
  const auto encoders = snapshot(net.encoder_parameters());
  ProbeResult probe = linear_probe(net, ds, quick_eval());
  CHECK(snapshot(probe.network.encoder_parameters()) == encoders);
  CHECK(probe.report.loss_history.size() == 10);
  CHECK(probe.report.loss_history.back() < probe.report.loss_history.front());
  CHECK(probe.network.ml_strategy() == MlStrategy::no_proj);
  for (const NamedParameter& np : probe.network.parameters()) CHECK(np.param->trainable);

  ProbeResult again = linear_probe(net, ds, quick_eval());
  CHECK(again.report.macro_auc == probe.report.macro_auc);
  CHECK(snapshot(again.network.parameters()) == snapshot(probe.network.parameters()));

  ProbeResult tuned = finetune(net, ds, quick_eval());
  CHECK(snapshot(tuned.network.encoder_parameters()) != encoders);
  CHECK(tuned.report.macro_auc >= probe.report.macro_auc - 0.02);
}

TEST_CASE("probe on shuffled labels scores at chance") {
  GeneratorConfig g;
  g.n_samples = 1200;
  g.latent_dim = 4;
  g.derm_dim = 10;
  g.clinic_dim = 8;
  g.class_counts = {2, 3, 2, 3};
  Dataset ds = generate(g);
  Rng rng(14);
  for (Eigen::Index i = 0; i < ds.labels.rows(); ++i) {
    for (Eigen::Index k = 0; k < ds.labels.cols(); ++k) {
      ds.labels(i, k) = static_cast<int>(rng.index(static_cast<std::size_t>(g.class_counts[static_cast<std::size_t>(k)])));
    }
  }
  Network net(small_model(ds), MmStrategy::sep_sep);
  net.initialize(4);
  ProbeResult probe = linear_probe(net, ds, quick_eval());
  CHECK(probe.report.macro_auc >= 0.45);
  CHECK(probe.report.macro_auc <= 0.55);
}

TEST_CASE("probe and pair matching validate their inputs") {
  Dataset ds = small_dataset();
  ModelConfig wrong = small_model(ds);
  wrong.derm_dim += 1;
  Network bad(wrong, MmStrategy::sep_sep);
  bad.initialize(1);
  CHECK_THROWS_AS(linear_probe(bad, ds, quick_eval()), ValidationError);

  EvalConfig e = quick_eval();
  e.probe.epochs = 0;
  CHECK_THROWS_WITH_AS(e.validate(), "eval.probe.epochs must be positive", ValidationError);

  Network net(small_model(ds), MmStrategy::sep_sep);
  net.initialize(1);
  CHECK(evaluate_pair_matching(net, ds, 20).m == 20);
  CHECK_THROWS_AS(evaluate_pair_matching(net, ds, static_cast<int>(ds.test.size()) + 1), ValidationError);
  CHECK_THROWS_AS(evaluate_pair_matching(net, ds, 0), ValidationError);
}

TEST_CASE("eval config json roundtrip") {
  EvalConfig e = quick_eval();
  e.seed = 9;
  CHECK(to_json(eval_config_from_json(to_json(e))) == to_json(e));
  nlohmann::json j = to_json(e);
  j["probe"]["momentum"] = 0.9;
  CHECK_THROWS_WITH_AS(eval_config_from_json(j), "eval.probe.momentum is not a known setting", ValidationError);
}
