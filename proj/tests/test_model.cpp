#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "advg/errors.hpp"
#include "advg/io_util.hpp"
#include "advg/model.hpp"
#include "advg/rng.hpp"

using namespace advg;
namespace fs = std::filesystem;

namespace {

MlpModel random_model(std::uint32_t d, std::uint32_t p, std::uint32_t hidden_count,
                      std::uint32_t hidden_dim, std::uint64_t seed,
                      double temperature = 1.0) {
  MlpModel m;
  m.projection = SparseProjection::init(d, p, derive_seed(seed, "proj"));
  Rng rng(derive_seed(seed, "params"));
  m.normalizer.mean.resize(p);
  m.normalizer.stddev.resize(p);
  for (std::uint32_t j = 0; j < p; ++j) {
    m.normalizer.mean[j] = rng.uniform(-0.5, 0.5);
    m.normalizer.stddev[j] = rng.uniform(0.5, 2.0);
  }
  std::uint32_t in = p;
  for (std::uint32_t k = 0; k <= hidden_count; ++k) {
    const std::uint32_t out = k == hidden_count ? 2 : hidden_dim;
    DenseLayer l;
    l.rows = out;
    l.cols = in;
    l.W.resize(static_cast<std::size_t>(out) * in);
    l.b.resize(out);
    for (auto& w : l.W) w = rng.uniform(-0.6, 0.6);
    for (auto& b : l.b) b = rng.uniform(-0.2, 0.2);
    m.layers.push_back(std::move(l));
    in = out;
  }
  m.hidden_count = hidden_count;
  m.hidden_dim = hidden_dim;
  m.temperature = temperature;
  m.check_shapes();
  return m;
}

SparseBinaryVector random_input(std::uint32_t d, double density, std::uint64_t seed) {
  Rng rng(seed);
  SparseBinaryVector x;
  x.dim = d;
  for (std::uint32_t j = 0; j < d; ++j)
    if (rng.bernoulli(density)) x.on.push_back(j);
  return x;
}

// Relative error with a floor for entries that are ~0 on both sides.
double entry_rel_error(double a, double b) {
  const double denom = std::max(std::abs(a), std::abs(b));
  if (denom < 1e-8) return 0.0;
  return std::abs(a - b) / denom;
}

}  // namespace

TEST_CASE("projection: entry probabilities follow 1/(2 sqrt(D))") {
  // D = 4: +1 and -1 each with probability 0.25.
  const auto proj = SparseProjection::init(4, 20000, 11);
  std::size_t plus = 0, minus = 0;
  for (auto s : proj.sign) (s > 0 ? plus : minus)++;
  const double n = 4.0 * 20000.0;
  const double se = std::sqrt(0.25 * 0.75 / n);
  CHECK(std::abs(static_cast<double>(plus) / n - 0.25) < 3 * se);
  CHECK(std::abs(static_cast<double>(minus) / n - 0.25) < 3 * se);
}

TEST_CASE("projection: nonzero fraction within 3 SE of 1/sqrt(D) at D=10000") {
  const std::uint32_t d = 10000, p = 512;
  const auto proj = SparseProjection::init(d, p, 2024);
  const double n = static_cast<double>(d) * p;
  const double q = 1.0 / std::sqrt(static_cast<double>(d));  // 0.01
  const double se = std::sqrt(q * (1.0 - q) / n);
  const double frac = static_cast<double>(proj.nonzeros()) / n;
  CHECK(std::abs(frac - q) < 3 * se);
}

TEST_CASE("projection: deterministic in the seed, rows independent") {
  const auto a = SparseProjection::init(100, 32, 5);
  const auto b = SparseProjection::init(100, 32, 5);
  CHECK(a.col == b.col);
  CHECK(a.sign == b.sign);
  CHECK(a.row_ptr == b.row_ptr);
  const auto c = SparseProjection::init(100, 32, 6);
  CHECK(a.col != c.col);
}

TEST_CASE("softmax2: symmetry, temperature example, sum and positivity") {
  const auto p = softmax2({0.0, 0.0}, 1.0);
  CHECK(p[0] == 0.5);
  CHECK(p[1] == 0.5);

  const auto q = softmax2({2.0, 0.0}, 2.0);
  CHECK(q[0] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(q[1] == doctest::Approx(0.2689).epsilon(1e-4));

  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    const std::array<double, 2> z{rng.uniform(-50, 50), rng.uniform(-50, 50)};
    const double t = std::exp(rng.uniform(-2, 4));
    const auto pr = softmax2(z, t);
    CHECK(std::abs(pr[0] + pr[1] - 1.0) < 1e-9);
    CHECK(pr[0] > 0.0);
    CHECK(pr[1] > 0.0);
    // argmax invariance under any positive temperature
    CHECK((z[0] > z[1]) == (pr[0] > pr[1]));
  }
  CHECK_THROWS_AS(softmax2({1.0, 2.0}, 0.0), ContractError);
}

TEST_CASE("forward: all-zero input is legal and finite") {
  const auto model = random_model(40, 16, 1, 8, 3);
  SparseBinaryVector x;
  x.dim = 40;
  const auto pred = forward(model, x);
  CHECK(std::isfinite(pred.logits[0]));
  CHECK(std::isfinite(pred.logits[1]));
  CHECK(pred.probs[0] + pred.probs[1] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("forward: deterministic and dimension-checked") {
  const auto model = random_model(60, 24, 2, 12, 4);
  const auto x = random_input(60, 0.2, 9);
  const auto a = forward(model, x);
  const auto b = forward(model, x);
  CHECK(a.probs == b.probs);
  SparseBinaryVector wrong;
  wrong.dim = 61;
  CHECK_THROWS_AS(forward(model, wrong), ContractError);
}

TEST_CASE("jacobian_projected: matches central finite differences") {
  // 100 random (model, input) pairs; step 1e-5 on the projected vector.
  // Entries where the two FD step sizes disagree sit on a ReLU kink and are
  // skipped (the derivative is not defined there).
  const double h = 1e-5;
  std::size_t checked = 0, skipped = 0;
  double max_rel = 0.0;
  for (int pair = 0; pair < 100; ++pair) {
    const auto model = random_model(30, 10, 1 + pair % 3, 8, 100 + pair,
                                    pair % 4 == 0 ? 5.0 : 1.0);
    const auto x = random_input(30, 0.3, 500 + pair);
    std::vector<double> v(model.projected_dim());
    model.projection.apply(x, v.data());
    model.normalizer.apply(v.data());

    const auto jac = jacobian_projected(model, x);
    for (std::size_t j = 0; j < v.size(); ++j) {
      auto fd_at = [&](double step) {
        auto vp = v, vm = v;
        vp[j] += step;
        vm[j] -= step;
        const auto pp = forward_projected(model, vp.data());
        const auto pm = forward_projected(model, vm.data());
        return std::array<double, 2>{(pp.probs[0] - pm.probs[0]) / (2 * step),
                                     (pp.probs[1] - pm.probs[1]) / (2 * step)};
      };
      const auto fd = fd_at(h);
      const auto fd_half = fd_at(h / 2);
      for (int c = 0; c < 2; ++c) {
        if (entry_rel_error(fd[c], fd_half[c]) > 1e-6 &&
            std::abs(fd[c] - fd_half[c]) > 1e-10) {
          ++skipped;
          continue;
        }
        max_rel = std::max(max_rel,
                           entry_rel_error(jac[c * v.size() + j], fd[c]));
        ++checked;
      }
    }
  }
  CHECK(max_rel < 1e-4);
  CHECK(checked > 1000);
  CHECK(skipped < checked / 100);
}

TEST_CASE("jacobian_projected: class rows sum to zero") {
  const auto model = random_model(50, 20, 2, 10, 77);
  const auto x = random_input(50, 0.25, 13);
  const auto jac = jacobian_projected(model, x);
  for (std::size_t j = 0; j < model.projected_dim(); ++j)
    CHECK(std::abs(jac[j] + jac[model.projected_dim() + j]) < 1e-12);
}

TEST_CASE("jacobian_projected: higher temperature shrinks the mean L1 norm") {
  double l1_t1 = 0.0, l1_t10 = 0.0;
  for (int i = 0; i < 120; ++i) {
    const auto model = random_model(40, 12, 1 + i % 2, 8, 900 + i);
    const auto x = random_input(40, 0.3, 40 + i);
    const auto j1 = jacobian_projected(model, x, 1.0);
    const auto j10 = jacobian_projected(model, x, 10.0);
    for (double v : j1) l1_t1 += std::abs(v);
    for (double v : j10) l1_t10 += std::abs(v);
  }
  CHECK(l1_t10 < l1_t1);
}

TEST_CASE("jacobian_original: identity projection collapses the chain") {
  MlpModel m = random_model(12, 12, 1, 6, 21);
  // Replace the projection with the identity and neutralize normalization.
  m.projection.input_dim = 12;
  m.projection.output_dim = 12;
  m.projection.row_ptr.resize(13);
  m.projection.col.assign(12, 0);
  m.projection.sign.assign(12, 1);
  for (std::uint32_t i = 0; i < 12; ++i) {
    m.projection.row_ptr[i] = i;
    m.projection.col[i] = i;
  }
  m.projection.row_ptr[12] = 12;
  m.normalizer.mean.assign(12, 0.0);
  m.normalizer.stddev.assign(12, 1.0);

  const auto x = random_input(12, 0.4, 5);
  CHECK(jacobian_original(m, x) == jacobian_projected(m, x));
}

TEST_CASE("jacobian_original: matches finite differences on relaxed inputs") {
  const auto model = random_model(25, 10, 2, 8, 31);
  const auto x0 = random_input(25, 0.3, 77);
  std::vector<double> x(25, 0.0);
  for (auto j : x0.on) x[j] = 1.0;

  const auto jac = jacobian_original(model, x0);
  const double h = 1e-5;
  double max_rel = 0.0;
  std::size_t skipped = 0;
  for (std::size_t j = 0; j < 25; ++j) {
    auto fd_at = [&](double step) {
      auto xp = x, xm = x;
      xp[j] += step;
      xm[j] -= step;
      const auto pp = forward_dense(model, xp.data());
      const auto pm = forward_dense(model, xm.data());
      return std::array<double, 2>{(pp.probs[0] - pm.probs[0]) / (2 * step),
                                   (pp.probs[1] - pm.probs[1]) / (2 * step)};
    };
    const auto fd = fd_at(h);
    const auto fd_half = fd_at(h / 2);
    for (int c = 0; c < 2; ++c) {
      if (entry_rel_error(fd[c], fd_half[c]) > 1e-6 &&
          std::abs(fd[c] - fd_half[c]) > 1e-10) {
        ++skipped;
        continue;
      }
      max_rel = std::max(max_rel, entry_rel_error(jac[c * 25 + j], fd[c]));
    }
  }
  CHECK(max_rel < 1e-4);
  CHECK(skipped <= 2);
}

TEST_CASE("jacobian_original: an all-zero projection row kills its column") {
  MlpModel m = random_model(10, 6, 1, 4, 51);
  // Remove feature 3's nonzeros by rebuilding the row pointers around it.
  SparseProjection p;
  p.input_dim = 10;
  p.output_dim = 6;
  p.row_ptr.push_back(0);
  for (std::uint32_t d = 0; d < 10; ++d) {
    if (d != 3)
      for (std::uint32_t k = m.projection.row_ptr[d]; k < m.projection.row_ptr[d + 1]; ++k) {
        p.col.push_back(m.projection.col[k]);
        p.sign.push_back(m.projection.sign[k]);
      }
    p.row_ptr.push_back(static_cast<std::uint32_t>(p.col.size()));
  }
  m.projection = p;
  const auto x = random_input(10, 0.5, 3);
  const auto jac = jacobian_original(m, x);
  CHECK(jac[3] == 0.0);
  CHECK(jac[10 + 3] == 0.0);
}

TEST_CASE("model: serialization round-trips bit-exactly") {
  const auto model = random_model(30, 12, 2, 8, 41, 2.5);
  const std::string text = model_to_text(model);
  const MlpModel back = model_from_text(text);
  CHECK(model_to_text(back) == text);
  for (int i = 0; i < 100; ++i) {
    const auto x = random_input(30, 0.3, 600 + i);
    const auto a = forward(model, x);
    const auto b = forward(back, x);
    CHECK(a.probs == b.probs);  // identical, not just close
    CHECK(a.logits == b.logits);
  }
}

TEST_CASE("model: corrupted header is a version error, no partial model") {
  const auto model = random_model(10, 4, 1, 4, 1);
  std::string text = model_to_text(model);
  text[0] = 'X';
  CHECK_THROWS_WITH_AS(model_from_text(text),
                       "<memory>:1: unsupported model file version", ParseError);
}

TEST_CASE("model: truncated file and non-finite parameters are load errors") {
  const auto model = random_model(10, 4, 1, 4, 2);
  const std::string text = model_to_text(model);
  const std::string truncated = text.substr(0, text.size() / 2);
  CHECK_THROWS_AS(model_from_text(truncated), ParseError);

  std::string poisoned = text;
  const auto pos = poisoned.find("matrix W0");
  const auto line_end = poisoned.find('\n', pos);
  const auto next_end = poisoned.find('\n', line_end + 1);
  std::string row = poisoned.substr(line_end + 1, next_end - line_end - 1);
  const auto space = row.find(' ');
  row.replace(0, space == std::string::npos ? row.size() : space, "nan");
  poisoned.replace(line_end + 1, next_end - line_end - 1, row);
  CHECK_THROWS_AS(model_from_text(poisoned), ParseError);
}

TEST_CASE("model: ensemble file round-trips every member") {
  std::vector<MlpModel> members;
  for (int e = 0; e < 3; ++e) members.push_back(random_model(20, 8, 1, 6, 70 + e));
  const auto path = fs::temp_directory_path() / "advg_ensemble.model";
  save_ensemble(members, path);
  const auto back = load_ensemble(path);
  REQUIRE(back.size() == 3);
  for (int e = 0; e < 3; ++e)
    CHECK(model_to_text(back[e]) == model_to_text(members[e]));
  const auto target = load_target(path);
  CHECK(target.size() == 3);
  fs::remove(path);
}
