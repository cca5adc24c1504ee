#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "advg/corpus.hpp"
#include "advg/errors.hpp"
#include "advg/eval.hpp"
#include "advg/features.hpp"
#include "advg/io_util.hpp"
#include "advg/kernels.hpp"
#include "advg/model.hpp"
#include "advg/rng.hpp"
#include "advg/train.hpp"

using namespace advg;

namespace {

// Two-feature, linearly separable data: malware carries feature 0, benign
// carries feature 1.
DataBundle separable_toy(std::size_t per_class) {
  DataBundle d;
  for (auto* split : {&d.train, &d.valid, &d.test}) split->dim = 2;
  for (std::size_t i = 0; i < per_class; ++i) {
    d.train.vectors.push_back({2, {0}});
    d.train.labels.push_back(1);
    d.train.vectors.push_back({2, {1}});
    d.train.labels.push_back(0);
  }
  d.valid = d.train;
  d.test = d.train;
  return d;
}

TrainConfig toy_cfg() {
  TrainConfig cfg;
  cfg.max_epochs = 50;
  cfg.batch_size = 32;
  cfg.projected_dim = 8;
  cfg.dropout_rate = 0.0;
  cfg.seed = 99;
  return cfg;
}

DataBundle synthetic_bundle(std::uint64_t seed, std::int64_t per_class = 400,
                            std::size_t k = 200) {
  CorpusSpec spec;
  spec.n_malware = per_class;
  spec.n_benign = per_class;
  spec.string_vocab = 160;
  spec.api_vocab = 30;
  spec.param_vocab = 80;
  spec.informative_per_class = 16;
  spec.seed = seed;
  const auto corpus = generate_corpus(spec);
  const auto r = run_extract(corpus, k, {0.6, 0.2, 0.2}, derive_seed(seed, "split"));
  return {r.train, r.valid, r.test};
}

TrainConfig small_cfg(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.max_epochs = 40;
  cfg.projected_dim = 48;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("adam: matches a 10-step hand oracle on a quadratic to 1e-12") {
  // f(t0, t1) = t0^2 + 3 t1^2, gradients (2 t0, 6 t1).
  const double step = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double theta[2] = {1.0, -2.0};
  double m[2] = {0.0, 0.0}, v[2] = {0.0, 0.0};

  double ref_theta[2] = {1.0, -2.0};
  double ref_m[2] = {0.0, 0.0}, ref_v[2] = {0.0, 0.0};

  for (int t = 1; t <= 10; ++t) {
    const double g[2] = {2.0 * theta[0], 6.0 * theta[1]};
    const double bias1 = 1.0 - std::pow(b1, t);
    const double bias2 = 1.0 - std::pow(b2, t);
    kernels::adam_update(kernels::Exec::serial, theta, m, v, g, 2, step, b1, b2,
                         eps, bias1, bias2);

    // Hand oracle, written out term by term.
    const double rg[2] = {2.0 * ref_theta[0], 6.0 * ref_theta[1]};
    for (int i = 0; i < 2; ++i) {
      ref_m[i] = b1 * ref_m[i] + (1.0 - b1) * rg[i];
      ref_v[i] = b2 * ref_v[i] + (1.0 - b2) * rg[i] * rg[i];
      const double mhat = ref_m[i] / (1.0 - std::pow(b1, t));
      const double vhat = ref_v[i] / (1.0 - std::pow(b2, t));
      ref_theta[i] -= step * mhat / (std::sqrt(vhat) + eps);
    }
    for (int i = 0; i < 2; ++i) {
      CHECK(std::abs(theta[i] - ref_theta[i]) <= 1e-12);
      CHECK(std::abs(m[i] - ref_m[i]) <= 1e-12);
      CHECK(std::abs(v[i] - ref_v[i]) <= 1e-12);
    }
  }
}

TEST_CASE("train_baseline: separable toy reaches 100% training accuracy") {
  const auto data = separable_toy(32);
  const auto r = train_baseline(data, {1, 4}, toy_cfg());
  const double err = test_error_pct({&r.model, 1}, data.train);
  CHECK(err == 0.0);
  CHECK(r.log.size() <= 50);
}

TEST_CASE("train_baseline: contract errors") {
  const auto data = separable_toy(8);
  TrainConfig cfg = toy_cfg();
  cfg.max_epochs = 0;
  CHECK_THROWS_AS(train_baseline(data, {1, 4}, cfg), ContractError);

  DataBundle empty;
  empty.train.dim = 2;
  CHECK_THROWS_AS(train_baseline(empty, {1, 4}, toy_cfg()), ContractError);
  CHECK_THROWS_AS(train_baseline(data, {0, 4}, toy_cfg()), ContractError);
}

TEST_CASE("train_baseline: same data, config and seed give identical model files") {
  const auto data = separable_toy(16);
  const auto a = train_baseline(data, {1, 4}, toy_cfg());
  const auto b = train_baseline(data, {1, 4}, toy_cfg());
  CHECK(model_to_text(a.model) == model_to_text(b.model));
  CHECK(epoch_log_to_csv(a.log) == epoch_log_to_csv(b.log));
}

TEST_CASE("train_baseline: serial and parallel execution agree bit-exactly") {
  const auto data = separable_toy(16);
  const auto s = train_baseline(data, {2, 4}, toy_cfg(), kernels::Exec::serial);
  const auto p = train_baseline(data, {2, 4}, toy_cfg(), kernels::Exec::parallel);
  CHECK(model_to_text(s.model) == model_to_text(p.model));
}

TEST_CASE("train: step sizes are initial/2^k and non-increasing") {
  const auto data = separable_toy(16);
  TrainConfig cfg = toy_cfg();
  cfg.dropout_rate = 0.25;
  const auto r = train_baseline(data, {1, 4}, cfg);
  double prev = cfg.initial_step;
  for (const auto& e : r.log) {
    CHECK(e.step_size <= prev);
    const double k = std::log2(cfg.initial_step / e.step_size);
    CHECK(std::abs(k - std::round(k)) < 1e-12);
    CHECK(std::isfinite(e.train_loss));
    prev = e.step_size;
  }
}

TEST_CASE("train: weight decay shrinks the squared weight norm") {
  const auto data = synthetic_bundle(123);
  TrainConfig cfg = small_cfg(7);
  const auto plain = train_baseline(data, {1, 16}, cfg);
  cfg.weight_decay = 0.01;
  const auto decayed = train_baseline(data, {1, 16}, cfg);
  CHECK(weight_squared_norm(decayed.model) < weight_squared_norm(plain.model));
  CHECK(decayed.model.defense == "decay:D=0.01");
}

TEST_CASE("train_distilled: temperature below 1 is rejected") {
  const auto data = separable_toy(8);
  TrainConfig cfg = toy_cfg();
  cfg.temperature = 0.5;
  CHECK_THROWS_AS(train_distilled(data, {1, 4}, cfg), ContractError);
}

TEST_CASE("train_distilled: T=1 limiting case") {
  // A perfectly confident model emits soft targets indistinguishable from
  // hard labels at T=1: softmax saturates.
  const auto hot = softmax2({0.0, 50.0}, 1.0);
  CHECK(hot[1] == doctest::Approx(1.0).epsilon(1e-9));
  const auto cold = softmax2({50.0, 0.0}, 1.0);
  CHECK(cold[1] == doctest::Approx(0.0).epsilon(1e-9));

  // At T=1 the distilled student mirrors baseline behavior on separable data:
  // same test verdicts, soft targets argmax-consistent with the hard labels.
  const auto data = separable_toy(32);
  TrainConfig cfg = toy_cfg();
  cfg.temperature = 1.0;
  const auto full = train_distilled_full(data, {1, 4}, cfg);
  REQUIRE(full.soft_targets.size() == data.train.size());
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    CHECK(std::abs(full.soft_targets[i][0] + full.soft_targets[i][1] - 1.0) < 1e-9);
    CHECK((full.soft_targets[i][1] >= 0.5) == (data.train.labels[i] != 0));
  }
  CHECK(test_error_pct({&full.student.model, 1}, data.test) == 0.0);
  CHECK(full.student.model.temperature == 1.0);
  CHECK(full.student.model.defense == "distill:T=1");
}

TEST_CASE("train_distilled: student stays within 2 points of its teacher") {
  const auto data = synthetic_bundle(321);
  TrainConfig cfg = small_cfg(11);
  cfg.temperature = 2.0;
  const auto full = train_distilled_full(data, {1, 16}, cfg);
  const double teacher_err = test_error_pct({&full.teacher.model, 1}, data.test);
  const double student_err = test_error_pct({&full.student.model, 1}, data.test);
  CHECK(std::abs(student_err - teacher_err) <= 2.0);
}

TEST_CASE("train_distilled: deployment Jacobians shrink as T grows") {
  // Mean L1 norm of the input Jacobian at deployment: T=10 student < T=2
  // student < baseline, averaged over at least 200 test samples.
  const auto data = synthetic_bundle(555, 700, 300);
  REQUIRE(data.test.size() >= 200);
  TrainConfig cfg = small_cfg(17);

  const auto baseline = train_baseline(data, {1, 24}, cfg);
  cfg.temperature = 2.0;
  const auto student_t2 = train_distilled(data, {1, 24}, cfg);
  cfg.temperature = 10.0;
  const auto student_t10 = train_distilled(data, {1, 24}, cfg);

  auto mean_l1 = [&](const MlpModel& m) {
    double sum = 0.0;
    const std::size_t n = std::min<std::size_t>(data.test.size(), 300);
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = jacobian_original(m, data.test.vectors[i]);
      for (double v : j) sum += std::abs(v);
    }
    return sum / static_cast<double>(n);
  };
  const double l1_base = mean_l1(baseline.model);
  const double l1_t2 = mean_l1(student_t2.model);
  const double l1_t10 = mean_l1(student_t10.model);
  CHECK(l1_t10 < l1_t2);
  CHECK(l1_t2 < l1_base);
}

TEST_CASE("train_ensemble: oddness contract and member distinctness") {
  const auto data = separable_toy(16);
  CHECK_THROWS_AS(train_ensemble(data, {1, 4}, toy_cfg(), 2), ContractError);
  CHECK_THROWS_AS(train_ensemble(data, {1, 4}, toy_cfg(), 1), ContractError);

  const auto r = train_ensemble(data, {1, 4}, toy_cfg(), 3);
  REQUIRE(r.members.size() == 3);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = a + 1; b < 3; ++b) {
      double max_dw = 0.0;
      for (std::size_t k = 0; k < r.members[a].layers.size(); ++k)
        for (std::size_t i = 0; i < r.members[a].layers[k].W.size(); ++i)
          max_dw = std::max(max_dw, std::abs(r.members[a].layers[k].W[i] -
                                             r.members[b].layers[k].W[i]));
      CHECK(max_dw > 0.0);
    }
  // Every member carries its own projection draw.
  CHECK(r.members[0].projection.seed != r.members[1].projection.seed);
  CHECK(r.members[1].projection.seed != r.members[2].projection.seed);
}

TEST_CASE("train_ensemble: majority vote is at least as good as the worst member") {
  const auto data = synthetic_bundle(777);
  const auto r = train_ensemble(data, {1, 16}, small_cfg(23), 5);
  double worst = 0.0;
  for (const auto& m : r.members)
    worst = std::max(worst, test_error_pct({&m, 1}, data.test));
  const double ensemble_err = test_error_pct(r.members, data.test);
  CHECK(ensemble_err <= worst);
}

namespace {

// A fixed-verdict model: p_M is sigma(bias), independent of the input.
MlpModel constant_model(double malware_bias) {
  MlpModel m;
  m.projection = SparseProjection::init(4, 2, 1);
  m.normalizer.mean.assign(2, 0.0);
  m.normalizer.stddev.assign(2, 1.0);
  DenseLayer hidden;
  hidden.rows = 2;
  hidden.cols = 2;
  hidden.W.assign(4, 0.0);
  hidden.b.assign(2, 0.0);
  DenseLayer out;
  out.rows = 2;
  out.cols = 2;
  out.W.assign(4, 0.0);
  out.b = {0.0, malware_bias};
  m.layers = {hidden, out};
  m.hidden_count = 1;
  m.hidden_dim = 2;
  return m;
}

}  // namespace

TEST_CASE("predict_ensemble: vote majorities") {
  const SparseBinaryVector x{4, {0}};
  std::vector<MlpModel> mmb{constant_model(5.0), constant_model(5.0),
                            constant_model(-5.0)};
  const auto v1 = predict_ensemble(mmb, x);
  CHECK(v1.malware);
  CHECK(v1.votes_malware == 2);

  std::vector<MlpModel> bmb{constant_model(-5.0), constant_model(5.0),
                            constant_model(-5.0)};
  const auto v2 = predict_ensemble(bmb, x);
  CHECK(!v2.malware);
  CHECK(v2.votes_malware == 1);

  CHECK_THROWS_AS(predict_ensemble({}, x), ContractError);
}

TEST_CASE("predict_ensemble: equals a brute-force member recount on 1000 inputs") {
  std::vector<MlpModel> members;
  for (int e = 0; e < 3; ++e) {
    // Random small models over the same input space.
    const auto data = separable_toy(8);
    TrainConfig cfg = toy_cfg();
    cfg.seed = 1000 + e;
    cfg.max_epochs = 3;
    members.push_back(train_baseline(data, {1, 4}, cfg).model);
  }
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    SparseBinaryVector x;
    x.dim = 2;
    if (rng.bernoulli(0.5)) x.on.push_back(0);
    if (rng.bernoulli(0.5)) x.on.push_back(1);
    const auto v = predict_ensemble(members, x);
    int count = 0;
    for (const auto& m : members)
      if (forward(m, x).p_malware() >= 0.5) ++count;
    CHECK(v.votes_malware == count);
    CHECK(v.malware == (count > static_cast<int>(members.size()) / 2));
  }
}

TEST_CASE("train: epoch log CSV schema") {
  const auto data = separable_toy(8);
  TrainConfig cfg = toy_cfg();
  cfg.max_epochs = 2;
  const auto r = train_baseline(data, {1, 4}, cfg);
  const auto csv = epoch_log_to_csv(r.log);
  CHECK(csv.rfind("epoch,step_size,train_loss,valid_error\n", 0) == 0);
  CHECK(split(csv, '\n').size() >= 3);
}
