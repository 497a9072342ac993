#include <doctest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "sm3/functional.hpp"
#include "sm3/losses.hpp"
#include "sm3/models.hpp"
#include "sm3/train.hpp"

using namespace sm3;
using sm3::testing::random_matrix;

namespace {

ModelConfig small_model() {
  ModelConfig m;
  m.derm_dim = 6;
  m.clinic_dim = 5;
  m.encoder_hidden = {7};
  m.feature_dim = 4;
  m.projection_dim = 3;
  m.label_dim = 5;
  m.class_counts = {3, 2, 4};
  m.ff_dim = 6;
  return m;
}

std::vector<Parameter*> pointers(std::vector<NamedParameter> named) {
  std::vector<Parameter*> out;
  for (auto& p : named) out.push_back(p.param);
  return out;
}

double weighted_sum_check(std::vector<NamedParameter> named, const std::function<Var(Tape&)>& forward,
                          std::uint64_t seed) {
  Rng rng(seed);
  Matrix weights;
  auto f = [&](Tape& tape) {
    Var out = forward(tape);
    if (weights.size() == 0) weights = random_matrix(out.rows(), out.cols(), rng);
    return ops::sum(ops::hadamard(out, tape.constant(weights)));
  };
  auto params = pointers(std::move(named));
  return grad_check(f, params);
}

std::vector<NamedParameter> collected(auto& component) {
  std::vector<NamedParameter> out;
  component.collect("c", out);
  return out;
}

Var stack_tokens(Tape& tape, std::span<const Var> tokens) { return ops::concat_cols(tokens); }

}  // namespace

TEST_CASE("encoder examples") {
  Encoder zero({4, 3});
  Tape t;
  CHECK(zero.forward(t, t.constant(Matrix::Zero(2, 4))).value().isZero());

  Encoder enc({4, 5, 3});
  enc.init(1, "enc");
  Rng rng(2);
  Matrix x = random_matrix(3, 4, rng);
  Tape a, b;
  Matrix h1 = enc.forward(a, a.constant(x)).value();
  Matrix h2 = enc.forward(b, b.constant(x)).value();
  CHECK(h1 == h2);
  CHECK(h1.cols() == 3);
  CHECK((h1.array() >= 0.0).all());

  Encoder ident({4, 4});
  ident.layers[0].weight.value = Matrix::Identity(4, 4);
  Tape c;
  CHECK(ident.forward(c, c.constant(x)).value() == x.cwiseMax(0.0));

  Tape d;
  CHECK_THROWS_AS(enc.forward(d, d.constant(Matrix::Zero(2, 5))), ShapeError);
}

TEST_CASE("projection head examples") {
  ProjectionHead head(32, 128);
  head.init(3, "head");
  Rng rng(3);
  Tape t;
  CHECK(head.forward(t, t.constant(random_matrix(2, 32, rng))).cols() == 128);
  CHECK(head.output_dim() == 128);
  ProjectionHead zero(4, 6);
  Tape u;
  CHECK(zero.forward(u, u.constant(random_matrix(3, 4, rng))).value().isZero());
}

TEST_CASE("label projection examples") {
  Rng rng(4);
  LabelProjection eight(10, 6, 8);
  eight.init(1, "p");
  Tape t;
  auto out = eight.forward(t, t.constant(random_matrix(2, 10, rng)));
  CHECK(out.size() == 8);
  for (const Var& v : out) CHECK(v.cols() == 6);

  LabelProjection one(10, 6, 1);
  Tape u;
  CHECK(one.forward(u, u.constant(random_matrix(2, 10, rng))).size() == 1);

  for (Linear& h : eight.heads) h.bias.value.setZero();
  Tape w;
  for (const Var& v : eight.forward(w, w.constant(Matrix::Zero(3, 10)))) CHECK(v.value().isZero());

  CHECK_THROWS_AS(LabelProjection(4, 4, 0), ValidationError);
}

TEST_CASE("label projection head k depends only on its own parameters") {
  Rng rng(5);
  LabelProjection p(6, 4, 3);
  p.init(2, "p");
  Tape t;
  auto out = p.forward(t, t.constant(random_matrix(3, 6, rng)));
  t.backward(ops::sum(out[1]));
  CHECK_FALSE(p.heads[0].weight.has_grad);
  CHECK(p.heads[1].weight.has_grad);
  CHECK_FALSE(p.heads[2].weight.has_grad);
}

TEST_CASE("relation module is permutation equivariant with dropout off") {
  Rng rng(6);
  for (MlStrategy kind : {MlStrategy::msa, MlStrategy::tel, MlStrategy::te}) {
    RelationModule w(kind, 8, 16);
    w.init(7, "w");
    std::vector<Matrix> tokens;
    for (int k = 0; k < 5; ++k) tokens.push_back(random_matrix(3, 8, rng));
    std::vector<int> perm{3, 0, 4, 1, 2};

    Tape a;
    std::vector<Var> in;
    for (auto& m : tokens) in.push_back(a.constant(m));
    auto out = w.forward(a, in, ForwardMode::eval());
    std::vector<Matrix> base;
    for (auto& v : out) base.push_back(v.value());

    Tape b;
    std::vector<Var> permuted;
    for (int j : perm) permuted.push_back(b.constant(tokens[static_cast<std::size_t>(j)]));
    auto pout = w.forward(b, permuted, ForwardMode::eval());
    for (std::size_t j = 0; j < perm.size(); ++j) {
      CHECK((pout[j].value() - base[static_cast<std::size_t>(perm[j])]).cwiseAbs().maxCoeff() < 1e-6);
    }
  }
}

TEST_CASE("relation module structure") {
  CHECK(RelationModule(MlStrategy::tel, 4, 8).layers.size() == 1);
  CHECK(RelationModule(MlStrategy::te, 4, 8).layers.size() == 2);
  RelationModule msa(MlStrategy::msa, 4, 8);
  CHECK(msa.layers.empty());
  CHECK(msa.bare_attention.has_value());
  CHECK_THROWS_AS(RelationModule(MlStrategy::proj, 4, 8), ValidationError);
}

TEST_CASE("single-token encoder layer matches hand evaluation") {
  RelationModule w(MlStrategy::tel, 4, 6);
  w.init(9, "w");
  TransformerEncoderLayer& layer = w.layers[0];
  Rng rng(9);
  layer.norm1.gamma.value = random_matrix(1, 4, rng);
  layer.norm2.beta.value = random_matrix(1, 4, rng);
  Matrix x = random_matrix(2, 4, rng);

  auto norm = [](const Matrix& m, const LayerNormParams& p) {
    Matrix out(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      double mean = m.row(i).mean();
      double var = (m.row(i).array() - mean).square().mean();
      out.row(i) = ((m.row(i).array() - mean) / std::sqrt(var + 1e-5)).matrix();
      out.row(i) = out.row(i).cwiseProduct(p.gamma.value) + p.beta.value;
    }
    return out;
  };
  auto linear = [](const Matrix& m, const Linear& l) {
    Matrix out = m * l.weight.value;
    out.rowwise() += l.bias.value.row(0);
    return out;
  };
  // One token: attention weight is exactly 1, so attention returns its value projection.
  Matrix attended = linear(linear(norm(x, layer.norm1), layer.attention.value), layer.attention.output);
  Matrix y = x + attended;
  Matrix expected = y + linear(linear(norm(y, layer.norm2), layer.ff1).cwiseMax(0.0), layer.ff2);

  Tape t;
  std::vector<Var> tokens{t.constant(x)};
  Matrix got = w.forward(t, tokens, ForwardMode::eval())[0].value();
  CHECK((got - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("zeroed output projections make the relation module the identity") {
  Rng rng(10);
  for (MlStrategy kind : {MlStrategy::msa, MlStrategy::tel, MlStrategy::te}) {
    RelationModule w(kind, 4, 6);
    w.init(11, "w");
    if (w.bare_attention) {
      w.bare_attention->output.weight.value.setZero();
      w.bare_attention->output.bias.value.setZero();
    }
    for (auto& layer : w.layers) {
      layer.attention.output.weight.value.setZero();
      layer.attention.output.bias.value.setZero();
      layer.ff2.weight.value.setZero();
      layer.ff2.bias.value.setZero();
    }
    Tape t;
    std::vector<Matrix> in{random_matrix(2, 4, rng), random_matrix(2, 4, rng), random_matrix(2, 4, rng)};
    std::vector<Var> tokens;
    for (auto& m : in) tokens.push_back(t.constant(m));
    auto out = w.forward(t, tokens, ForwardMode::eval());
    for (std::size_t k = 0; k < in.size(); ++k) CHECK(out[k].value() == in[k]);
  }
}

TEST_CASE("relation module rejects unequal token widths") {
  RelationModule w(MlStrategy::tel, 4, 6);
  Tape t;
  std::vector<Var> tokens{t.constant(Matrix::Zero(2, 4)), t.constant(Matrix::Zero(2, 3))};
  CHECK_THROWS_AS(w.forward(t, tokens, ForwardMode::eval()), ShapeError);
}

TEST_CASE("classification heads examples") {
  std::vector<int> counts{3, 2, 3, 3, 3, 3, 3, 5};
  ClassificationHeads q(6, counts);
  Rng rng(12);
  Tape t;
  std::vector<Var> tokens;
  for (int k = 0; k < 8; ++k) tokens.push_back(t.constant(random_matrix(2, 6, rng)));
  auto logits = q.forward(t, tokens);
  REQUIRE(logits.size() == 8);
  for (std::size_t k = 0; k < 8; ++k) {
    CHECK(logits[k].cols() == counts[k]);
    CHECK(logits[k].value().isZero());
    Matrix p = softmax_rows(logits[k].value());
    CHECK((p.array() - 1.0 / counts[k]).abs().maxCoeff() < 1e-15);
  }
  tokens.pop_back();
  CHECK_THROWS_AS(q.forward(t, tokens), ShapeError);
}

TEST_CASE("every model component passes grad_check at 10 random points") {
  Rng rng(13);
  for (std::uint64_t s = 0; s < 10; ++s) {
    Matrix x = random_matrix(3, 5, rng);
    Encoder enc({5, 4, 3});
    enc.init(s, "enc");
    CHECK(weighted_sum_check(collected(enc), [&](Tape& t) { return enc.forward(t, t.constant(x)); }, s) < 1e-4);

    ProjectionHead head(5, 4);
    head.init(s, "head");
    CHECK(weighted_sum_check(collected(head), [&](Tape& t) { return head.forward(t, t.constant(x)); }, s) < 1e-4);

    LabelProjection proj(5, 4, 3);
    proj.init(s, "proj");
    CHECK(weighted_sum_check(
              collected(proj),
              [&](Tape& t) {
                auto out = proj.forward(t, t.constant(x));
                return stack_tokens(t, out);
              },
              s) < 1e-4);

    std::vector<Matrix> tokens{random_matrix(2, 4, rng), random_matrix(2, 4, rng), random_matrix(2, 4, rng)};
    for (MlStrategy kind : {MlStrategy::msa, MlStrategy::tel, MlStrategy::te}) {
      RelationModule w(kind, 4, 5);
      w.init(s, "w");
      CHECK(weighted_sum_check(
                collected(w),
                [&](Tape& t) {
                  std::vector<Var> in;
                  for (auto& m : tokens) in.push_back(t.constant(m));
                  auto out = w.forward(t, in, ForwardMode::eval());
                  return stack_tokens(t, out);
                },
                s) < 1e-4);
    }

    std::vector<int> counts{3, 2, 4};
    ClassificationHeads q(4, counts);
    q.init(s, "q");
    CHECK(weighted_sum_check(
              collected(q),
              [&](Tape& t) {
                std::vector<Var> in;
                for (auto& m : tokens) in.push_back(t.constant(m));
                auto out = q.forward(t, in);
                return stack_tokens(t, out);
              },
              s) < 1e-4);
  }
}

TEST_CASE("inputs also receive correct gradients through the relation module") {
  for (std::uint64_t s = 0; s < 3; ++s) {
    Rng rng(20 + s);
    RelationModule w(MlStrategy::tel, 4, 5);
    w.init(s, "w");
    std::vector<Parameter> tokens(3, Parameter(2, 4));
    for (auto& p : tokens) p.value = random_matrix(2, 4, rng);
    std::vector<NamedParameter> named;
    for (auto& p : tokens) named.push_back({"token", &p});
    CHECK(weighted_sum_check(
              named,
              [&](Tape& t) {
                std::vector<Var> in;
                for (auto& p : tokens) in.push_back(t.parameter(p));
                auto out = w.forward(t, in, ForwardMode::eval());
                return stack_tokens(t, out);
              },
              s) < 1e-4);
  }
}

TEST_CASE("network parameter names are unique and branches do not share storage") {
  for (MmStrategy mm : {MmStrategy::simclr, MmStrategy::concat, MmStrategy::sep_shared, MmStrategy::sep_sep}) {
    Network net(small_model(), mm);
    net.attach_classifier(MlStrategy::te);
    std::set<std::string> names;
    std::set<const Parameter*> storage;
    for (auto& p : net.parameters()) {
      CHECK(names.insert(p.name).second);
      CHECK(storage.insert(p.param).second);
    }
  }
  Network net(small_model(), MmStrategy::sep_sep);
  CHECK(net.encoder_derm.layers.size() == net.encoder_clinic.layers.size());
  CHECK(net.encoder_derm.feature_dim() == net.encoder_clinic.feature_dim());
}

TEST_CASE("network heads follow the strategy") {
  Network simclr(small_model(), MmStrategy::simclr);
  CHECK(simclr.head_derm.has_value());
  CHECK_FALSE(simclr.head_mm_shared.has_value());
  CHECK_FALSE(simclr.head_mm_derm.has_value());
  Network shared(small_model(), MmStrategy::sep_shared);
  CHECK(shared.head_mm_shared.has_value());
  CHECK_FALSE(shared.head_mm_derm.has_value());
  Network sep(small_model(), MmStrategy::sep_sep);
  CHECK(sep.head_mm_derm.has_value());
  CHECK(sep.head_mm_clinic.has_value());
  Network concat(small_model(), MmStrategy::concat);
  CHECK(concat.head_concat.has_value());
  CHECK_FALSE(concat.head_derm.has_value());

  sep.attach_classifier(MlStrategy::tel);
  CHECK(sep.relation->layers.size() == 1);
  sep.attach_classifier(MlStrategy::proj);
  CHECK_FALSE(sep.relation.has_value());
  CHECK(sep.label_projection.has_value());
  sep.attach_classifier(MlStrategy::no_proj);
  CHECK_FALSE(sep.label_projection.has_value());
  CHECK(sep.classifier->heads[0].in() == 2 * small_model().feature_dim);
}

TEST_CASE("a dermoscopy-only update leaves the clinical branch bitwise unchanged") {
  for (MmStrategy mm : {MmStrategy::simclr, MmStrategy::sep_sep}) {
    Network net(small_model(), mm);
    net.initialize(4);
    Rng rng(14);
    std::vector<Matrix> clinic_before;
    for (auto& p : net.parameters()) {
      if (p.name.find("clinic") != std::string::npos) clinic_before.push_back(p.param->value);
    }
    auto params = net.parameters();
    OptimizerState state;
    for (int step = 0; step < 3; ++step) {
      net.zero_grad();
      Tape t;
      Var h1 = net.encode_derm(t, t.constant(random_matrix(6, 6, rng)));
      Var h2 = net.encode_derm(t, t.constant(random_matrix(6, 6, rng)));
      Var loss = nt_xent(net.head_derm->forward(t, h1), net.head_derm->forward(t, h2), 0.1);
      t.backward(loss);
      optimizer_step(params, state, AdamWConfig{1e-2, 0.9, 0.999, 1e-8, 0.01});
    }
    std::size_t i = 0;
    for (auto& p : net.parameters()) {
      if (p.name.find("clinic") != std::string::npos) CHECK(p.param->value == clinic_before[i++]);
    }
    CHECK(i > 0);
  }
}

TEST_CASE("no dead parameters under the stage-1 and stage-2 losses") {
  Rng rng(15);
  const ModelConfig cfg = small_model();
  for (MmStrategy mm : {MmStrategy::simclr, MmStrategy::concat, MmStrategy::sep_shared, MmStrategy::sep_sep}) {
    Network net(cfg, mm);
    net.initialize(5);
    TrainConfig tc;
    tc.mm_strategy = mm;
    net.zero_grad();
    Tape t;
    Var hd1 = net.encode_derm(t, t.constant(random_matrix(8, 6, rng)));
    Var hd2 = net.encode_derm(t, t.constant(random_matrix(8, 6, rng)));
    Var hc1 = net.encode_clinic(t, t.constant(random_matrix(8, 5, rng)));
    Var hc2 = net.encode_clinic(t, t.constant(random_matrix(8, 5, rng)));
    Var loss;
    if (mm == MmStrategy::concat) {
      std::vector<Var> a{hd1, hc1}, b{hd2, hc2};
      loss = nt_xent(net.head_concat->forward(t, ops::concat_cols(a)), net.head_concat->forward(t, ops::concat_cols(b)),
                     0.1);
    } else {
      ContrastiveViews own{net.head_derm->forward(t, hd1), net.head_derm->forward(t, hd2),
                           net.head_clinic->forward(t, hc1), net.head_clinic->forward(t, hc2)};
      if (mm == MmStrategy::simclr) {
        loss = ops::add(nt_xent(own.derm1, own.derm2, 0.1), nt_xent(own.clinic1, own.clinic2, 0.1));
      } else {
        ProjectionHead& a = mm == MmStrategy::sep_sep ? *net.head_mm_derm : *net.head_mm_shared;
        ProjectionHead& b = mm == MmStrategy::sep_sep ? *net.head_mm_clinic : *net.head_mm_shared;
        ContrastiveViews cross{a.forward(t, hd1), a.forward(t, hd2), b.forward(t, hc1), b.forward(t, hc2)};
        loss = l_ssl(own, cross, 0.1).total;
      }
    }
    t.backward(loss);
    for (auto& p : net.parameters()) {
      INFO(to_string(mm) << " " << p.name);
      CHECK(p.param->has_grad);
      CHECK(p.param->grad.norm() > 1e-10);
    }
  }

  for (MlStrategy ml : {MlStrategy::no_proj, MlStrategy::proj, MlStrategy::msa, MlStrategy::tel, MlStrategy::te}) {
    Network net(cfg, MmStrategy::sep_sep);
    net.attach_classifier(ml);
    net.initialize(6);
    net.zero_grad();
    Tape t;
    Var h = net.fused_features(t, t.constant(random_matrix(8, 6, rng)), t.constant(random_matrix(8, 5, rng)));
    ClassifierOutput out = net.classify(t, h, ForwardMode::eval());
    IndexMatrix y(8, 3);
    for (int i = 0; i < 8; ++i) {
      for (int k = 0; k < 3; ++k) y(i, k) = static_cast<int>(rng.index(static_cast<std::size_t>(cfg.class_counts[k])));
    }
    t.backward(multilabel_ce(out.logits, y));
    for (auto& p : net.encoder_parameters()) CHECK(p.param->grad.norm() > 1e-10);
    for (auto& p : net.classifier_parameters()) {
      INFO(to_string(ml) << " " << p.name);
      CHECK(p.param->grad.norm() > 1e-10);
    }
  }
}

TEST_CASE("initialization is deterministic and seed dependent") {
  Network a(small_model(), MmStrategy::sep_sep), b(small_model(), MmStrategy::sep_sep), c(small_model(), MmStrategy::sep_sep);
  a.initialize(1);
  b.initialize(1);
  c.initialize(2);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].param->value == pb[i].param->value);
    differs |= pa[i].param->value != pc[i].param->value;
  }
  CHECK(differs);
}

TEST_CASE("model config validation names the field") {
  ModelConfig m = small_model();
  m.class_counts = {3, 1};
  CHECK_THROWS_WITH_AS(m.validate(), "model.class_counts[1] must be >= 2", ValidationError);
  m = small_model();
  m.feature_dim = 0;
  CHECK_THROWS_WITH_AS(m.validate(), "model.feature_dim must be positive", ValidationError);
  CHECK_THROWS_AS(parse_mm_strategy("both"), ValidationError);
  CHECK(parse_ml_strategy("te") == MlStrategy::te);
}
