#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "advg/attack.hpp"
#include "advg/errors.hpp"
#include "advg/io_util.hpp"
#include "advg/model.hpp"
#include "advg/rng.hpp"
#include "advg/train.hpp"

using namespace advg;

namespace {

// Linear-in-x model: p_M = sigma(w0 x0 + w1 x1 + offset). Built from an
// identity projection, a saturated-identity hidden layer, and an output row.
MlpModel linear_model(double w0, double w1, double offset) {
  MlpModel m;
  m.projection.input_dim = 2;
  m.projection.output_dim = 2;
  m.projection.row_ptr = {0, 1, 2};
  m.projection.col = {0, 1};
  m.projection.sign = {1, 1};
  m.normalizer.mean.assign(2, 0.0);
  m.normalizer.stddev.assign(2, 1.0);
  DenseLayer hidden;
  hidden.rows = 2;
  hidden.cols = 2;
  hidden.W = {1, 0, 0, 1};
  hidden.b = {10.0, 10.0};  // keeps ReLU active for x in {0,1}^2
  DenseLayer out;
  out.rows = 2;
  out.cols = 2;
  out.W = {0, 0, w0, w1};
  out.b = {0.0, offset - 10.0 * (w0 + w1)};
  m.layers = {hidden, out};
  m.hidden_count = 1;
  m.hidden_dim = 2;
  return m;
}

MlpModel random_target(std::uint32_t d, std::uint64_t seed) {
  MlpModel m;
  m.projection = SparseProjection::init(d, 8, derive_seed(seed, "proj"));
  Rng rng(derive_seed(seed, "params"));
  m.normalizer.mean.assign(8, 0.0);
  m.normalizer.stddev.assign(8, 1.0);
  DenseLayer hidden;
  hidden.rows = 8;
  hidden.cols = 8;
  hidden.W.resize(64);
  hidden.b.assign(8, 0.1);
  for (auto& w : hidden.W) w = rng.uniform(-0.8, 0.8);
  DenseLayer out;
  out.rows = 2;
  out.cols = 8;
  out.W.resize(16);
  out.b.assign(2, 0.0);
  for (auto& w : out.W) w = rng.uniform(-0.8, 0.8);
  m.layers = {hidden, out};
  m.hidden_count = 1;
  m.hidden_dim = 8;
  return m;
}

SparseBinaryVector random_x(std::uint32_t d, double density, std::uint64_t seed) {
  Rng rng(seed);
  SparseBinaryVector x;
  x.dim = d;
  for (std::uint32_t j = 0; j < d; ++j)
    if (rng.bernoulli(density)) x.on.push_back(j);
  return x;
}

// Replays a trace against its origin, checking every stated invariant.
void check_trace_legality(const SparseBinaryVector& x0, const AttackTrace& trace) {
  std::vector<std::uint8_t> enabled(x0.dim, 0);
  for (auto j : x0.on) enabled[j] = 1;
  std::vector<std::uint8_t> touched(x0.dim, 0);
  std::uint32_t expected_iter = 1;
  for (const auto& step : trace.steps) {
    REQUIRE(step.iteration == expected_iter);  // one flip per iteration
    ++expected_iter;
    REQUIRE(!touched[step.feature]);  // no feature appears twice
    touched[step.feature] = 1;
    if (step.enabled) {
      REQUIRE(enabled[step.feature] == 0);  // 0->1 only on disabled
      enabled[step.feature] = 1;
    } else {
      REQUIRE(enabled[step.feature] == 1);  // 1->0 only on enabled
      enabled[step.feature] = 0;
    }
  }
  // Hamming distance from origin equals the step count.
  std::size_t hamming = 0;
  std::vector<std::uint8_t> orig(x0.dim, 0);
  for (auto j : x0.on) orig[j] = 1;
  for (std::uint32_t j = 0; j < x0.dim; ++j) hamming += orig[j] != enabled[j];
  REQUIRE(hamming == trace.steps.size());
  if (trace.success_iteration && *trace.success_iteration > 0)
    REQUIRE(*trace.success_iteration == trace.steps.back().iteration);
  REQUIRE(trace.steps.size() <= trace.budget);
}

}  // namespace

TEST_CASE("classify_feature_signs: sets equal a brute-force sign scan") {
  const auto model = random_target(30, 5);
  const auto x = random_x(30, 0.3, 6);
  const auto signs = classify_feature_signs({&model, 1}, x);

  const auto jac = jacobian_original(model, x);
  std::vector<std::uint32_t> pos, neg;
  for (std::uint32_t j = 0; j < 30; ++j) {
    if (jac[30 + j] > 0.0) pos.push_back(j);
    if (jac[j] > 0.0) neg.push_back(j);
  }
  CHECK(signs.positive == pos);
  CHECK(signs.negative == neg);

  // Two-class complement: negative set is exactly where d p_M < 0.
  std::vector<std::uint32_t> neg_via_malware;
  for (std::uint32_t j = 0; j < 30; ++j)
    if (signs.d_malware[j] < 0.0) neg_via_malware.push_back(j);
  CHECK(signs.negative == neg_via_malware);
}

TEST_CASE("classify_feature_signs: zero derivative lands in neither set") {
  MlpModel m = linear_model(0.5, 0.0, 0.0);
  // Feature 1 has weight 0 into both logits: derivative exactly zero.
  const SparseBinaryVector x{2, {0, 1}};
  const auto signs = classify_feature_signs({&m, 1}, x);
  for (auto j : signs.positive) CHECK(j != 1);
  for (auto j : signs.negative) CHECK(j != 1);
}

TEST_CASE("classify_feature_signs: ensemble uses the mean member Jacobian") {
  const auto a = random_target(20, 31);
  const auto b = random_target(20, 32);
  const std::vector<MlpModel> ens{a, b, a};
  const auto x = random_x(20, 0.4, 7);
  const auto signs = classify_feature_signs(ens, x);
  const auto ja = jacobian_original(a, x);
  const auto jb = jacobian_original(b, x);
  for (std::uint32_t j = 0; j < 20; ++j) {
    const double mean_malware = (2.0 * ja[20 + j] + jb[20 + j]) / 3.0;
    CHECK(signs.d_malware[j] == doctest::Approx(mean_malware).epsilon(1e-12));
  }
}

TEST_CASE("select_flip: dec_pos picks the largest positive derivative") {
  const auto m = linear_model(3.0, 1.0, 0.2);
  const SparseBinaryVector x{2, {0, 1}};
  const auto signs = classify_feature_signs({&m, 1}, x);
  const std::vector<std::uint8_t> touched(2, 0);
  const auto flip = select_flip(Strategy::dec_pos, 0, x, signs, touched, nullptr);
  REQUIRE(flip.has_value());
  CHECK(flip->feature == 0);
  CHECK(!flip->enable);

  // Brute force over both flips: disabling feature 0 lowers p_M more.
  auto p_after = [&](std::uint32_t f) {
    SparseBinaryVector y = x;
    y.on.erase(std::find(y.on.begin(), y.on.end(), f));
    return forward(m, y).p_malware();
  };
  CHECK(p_after(0) < p_after(1));
}

TEST_CASE("select_flip: empty pools return nothing") {
  const auto m = linear_model(3.0, 1.0, 0.2);
  SparseBinaryVector x;
  x.dim = 2;  // everything disabled: dec_pos has no enabled positive candidates
  const auto signs = classify_feature_signs({&m, 1}, x);
  const std::vector<std::uint8_t> touched(2, 0);
  CHECK(!select_flip(Strategy::dec_pos, 0, x, signs, touched, nullptr));
}

TEST_CASE("select_flip: randomized choice is reproducible under a seed") {
  const auto m = random_target(40, 50);
  const auto x = random_x(40, 0.5, 51);
  const auto signs = classify_feature_signs({&m, 1}, x);
  const std::vector<std::uint8_t> touched(40, 0);
  Rng r1(9), r2(9);
  const auto f1 = select_flip(Strategy::rand_dec_pos, 0, x, signs, touched, &r1);
  const auto f2 = select_flip(Strategy::rand_dec_pos, 0, x, signs, touched, &r2);
  REQUIRE(f1.has_value() == f2.has_value());
  if (f1) {
    CHECK(f1->feature == f2->feature);
    CHECK(f1->enable == f2->enable);
  }
}

TEST_CASE("select_flip: alternation starts with dec_pos and falls back") {
  const auto m = linear_model(2.0, -2.0, 0.5);  // feature 1 is benign-pushing
  const SparseBinaryVector x{2, {0}};           // 0 on, 1 off
  const auto signs = classify_feature_signs({&m, 1}, x);
  const std::vector<std::uint8_t> touched(2, 0);
  // Round 0: dec_pos rule -> disable feature 0.
  auto f0 = select_flip(Strategy::dec_pos_inc_neg, 0, x, signs, touched, nullptr);
  REQUIRE(f0.has_value());
  CHECK(f0->feature == 0);
  CHECK(!f0->enable);
  // Round 1: inc_neg rule -> enable feature 1.
  auto f1 = select_flip(Strategy::dec_pos_inc_neg, 1, x, signs, touched, nullptr);
  REQUIRE(f1.has_value());
  CHECK(f1->feature == 1);
  CHECK(f1->enable);
  // With the dec_pos pool exhausted the even round falls back to inc_neg.
  std::vector<std::uint8_t> touched0(2, 0);
  touched0[0] = 1;
  auto fb = select_flip(Strategy::dec_pos_inc_neg, 2, x, signs, touched0, nullptr);
  REQUIRE(fb.has_value());
  CHECK(fb->feature == 1);
  CHECK(fb->enable);
}

TEST_CASE("craft: already-benign input succeeds at iteration 0 with no steps") {
  const auto m = linear_model(1.0, 1.0, -3.0);  // p_M < 0.5 everywhere on {0,1}^2
  const SparseBinaryVector x{2, {0}};
  const auto trace = craft({&m, 1}, x, 0, Strategy::dec_pos, 20, 1);
  REQUIRE(trace.success_iteration.has_value());
  CHECK(*trace.success_iteration == 0);
  CHECK(trace.steps.empty());
}

TEST_CASE("craft: one flip crosses the threshold on the hand-built model") {
  // Logit gap +0.2 at (1,1); disabling feature 0 moves it to -0.4.
  const auto m = linear_model(0.6, 0.1, -0.5);
  const SparseBinaryVector x{2, {0, 1}};
  CHECK(forward(m, x).p_malware() >= 0.5);
  const auto trace = craft({&m, 1}, x, 0, Strategy::dec_pos, 20, 1);
  REQUIRE(trace.success_iteration.has_value());
  CHECK(*trace.success_iteration == 1);
  REQUIRE(trace.steps.size() == 1);
  CHECK(trace.steps[0].feature == 0);
  CHECK(trace.steps[0].p_malware_after < 0.5);
}

TEST_CASE("craft: budget below 1 is a contract error") {
  const auto m = linear_model(1.0, 1.0, 0.5);
  const SparseBinaryVector x{2, {0, 1}};
  CHECK_THROWS_AS(craft({&m, 1}, x, 0, Strategy::dec_pos, 0, 1), ContractError);
}

TEST_CASE("craft: identical seeds give identical traces") {
  const auto m = random_target(40, 60);
  const auto x = random_x(40, 0.4, 61);
  for (Strategy s : all_strategies()) {
    const auto a = craft({&m, 1}, x, 3, s, 15, 42);
    const auto b = craft({&m, 1}, x, 3, s, 15, 42);
    CHECK(traces_to_jsonl({&a, 1}) == traces_to_jsonl({&b, 1}));
  }
}

TEST_CASE("craft: legality properties over random campaigns") {
  std::size_t campaigns = 0;
  for (int t = 0; t < 40; ++t) {
    const auto m = random_target(30, 200 + t);
    for (int i = 0; i < 5; ++i) {
      const auto x = random_x(30, 0.35, 1000 * t + i);
      for (Strategy s : all_strategies()) {
        const auto trace =
            craft({&m, 1}, x, static_cast<std::uint64_t>(i), s, 10,
                  derive_seed(7, strategy_name(s), static_cast<std::uint64_t>(t * 10 + i)));
        check_trace_legality(x, trace);
        ++campaigns;
      }
    }
  }
  CHECK(campaigns == 40 * 5 * 6);
}

TEST_CASE("craft: dec_pos greedy argmax re-checkable post hoc") {
  const auto m = random_target(30, 71);
  const auto x = random_x(30, 0.5, 72);
  const auto trace = craft({&m, 1}, x, 0, Strategy::dec_pos, 8, 1);
  // Replay: at each step the chosen feature attains the pool maximum.
  SparseBinaryVector cur = x;
  std::vector<std::uint8_t> touched(30, 0);
  for (const auto& step : trace.steps) {
    const auto signs = classify_feature_signs({&m, 1}, cur);
    std::vector<std::uint8_t> enabled(30, 0);
    for (auto j : cur.on) enabled[j] = 1;
    double best = -1.0;
    for (auto j : signs.positive)
      if (enabled[j] && !touched[j]) best = std::max(best, signs.d_malware[j]);
    CHECK(signs.d_malware[step.feature] == best);
    touched[step.feature] = 1;
    cur.on.erase(std::find(cur.on.begin(), cur.on.end(), step.feature));
  }
}

TEST_CASE("run_campaign: table shape, monotonicity, determinism") {
  const auto m = random_target(30, 91);
  std::vector<SparseBinaryVector> samples;
  for (int i = 0; i < 12; ++i) samples.push_back(random_x(30, 0.4, 300 + i));
  const auto strategies = all_strategies();
  const auto a = run_campaign({&m, 1}, samples, strategies, 20, 5);
  const auto b = run_campaign({&m, 1}, samples, strategies, 20, 5);
  for (Strategy s : strategies) {
    const auto& rates = a.success_rate.at(s);
    REQUIRE(rates.size() == 20);  // exactly budget rows per strategy
    for (std::size_t k = 1; k < rates.size(); ++k) CHECK(rates[k] >= rates[k - 1]);
    CHECK(a.success_rate.at(s) == b.success_rate.at(s));
  }
  CHECK(a.traces.size() == samples.size() * strategies.size());
  CHECK_THROWS_AS(run_campaign({&m, 1}, {}, strategies, 20, 5), ContractError);

  // Serial and parallel campaign execution agree exactly.
  const auto s_run = run_campaign({&m, 1}, samples, strategies, 20, 5,
                                  kernels::Exec::serial);
  CHECK(traces_to_jsonl(s_run.traces) == traces_to_jsonl(a.traces));
}

TEST_CASE("campaign csv: schema and budget rows") {
  const auto m = linear_model(0.6, 0.1, -0.5);
  std::vector<SparseBinaryVector> samples{{2, {0, 1}}};
  const std::vector<Strategy> strategies{Strategy::dec_pos};
  const auto r = run_campaign({&m, 1}, samples, strategies, 5, 1);
  const auto csv = campaign_to_csv(r);
  CHECK(csv.rfind("strategy,iteration,success_rate\n", 0) == 0);
  CHECK(split(csv, '\n').size() == 7);  // header + 5 rows + trailing empty
}
