#include "advg/attack.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

#include "advg/errors.hpp"
#include "advg/io_util.hpp"
#include "advg/train.hpp"

namespace advg {

using ordered_json = nlohmann::ordered_json;

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::dec_pos: return "dec_pos";
    case Strategy::inc_neg: return "inc_neg";
    case Strategy::dec_pos_inc_neg: return "dec_pos_inc_neg";
    case Strategy::rand_dec_pos: return "rand_dec_pos";
    case Strategy::rand_inc_neg: return "rand_inc_neg";
    case Strategy::rand_dec_pos_inc_neg: return "rand_dec_pos_inc_neg";
  }
  return "?";
}

Strategy strategy_from_name(const std::string& name) {
  for (Strategy s : all_strategies())
    if (name == strategy_name(s)) return s;
  throw ConfigError("unknown attack strategy: '" + name + "'");
}

std::vector<Strategy> all_strategies() {
  return {Strategy::dec_pos,      Strategy::inc_neg,
          Strategy::dec_pos_inc_neg, Strategy::rand_dec_pos,
          Strategy::rand_inc_neg, Strategy::rand_dec_pos_inc_neg};
}

JacobianSigns classify_feature_signs(std::span<const MlpModel> target,
                                     const SparseBinaryVector& x) {
  if (target.empty()) throw ContractError("classify_feature_signs: empty target");
  const std::size_t d = target[0].input_dim();
  JacobianSigns signs;
  signs.d_benign.assign(d, 0.0);
  signs.d_malware.assign(d, 0.0);
  for (const auto& m : target) {
    if (m.input_dim() != d)
      throw ContractError("classify_feature_signs: member dimensions disagree");
    const std::vector<double> j = jacobian_original(m, x);
    for (std::size_t i = 0; i < d; ++i) {
      signs.d_benign[i] += j[i];
      signs.d_malware[i] += j[d + i];
    }
  }
  const double inv = 1.0 / static_cast<double>(target.size());
  for (std::size_t i = 0; i < d; ++i) {
    signs.d_benign[i] *= inv;
    signs.d_malware[i] *= inv;
  }
  for (std::uint32_t i = 0; i < d; ++i) {
    if (signs.d_malware[i] > 0.0) signs.positive.push_back(i);
    if (signs.d_benign[i] > 0.0) signs.negative.push_back(i);
  }
  return signs;
}

namespace {

// Largest-derivative candidate in the dec_pos pool: enabled, positive sign,
// untouched. Ties resolve to the lowest feature index.
std::optional<Flip> pick_dec_pos(const SparseBinaryVector&,
                                 const JacobianSigns& signs,
                                 const std::vector<std::uint8_t>& enabled,
                                 const std::vector<std::uint8_t>& touched,
                                 Rng* rng) {
  std::optional<Flip> best;
  double best_value = 0.0;
  if (rng == nullptr) {
    for (std::uint32_t j : signs.positive) {
      if (!enabled[j] || touched[j]) continue;
      if (!best || signs.d_malware[j] > best_value) {
        best = Flip{j, false};
        best_value = signs.d_malware[j];
      }
    }
    return best;
  }
  std::vector<std::uint32_t> pool;
  for (std::uint32_t j : signs.positive)
    if (enabled[j] && !touched[j]) pool.push_back(j);
  if (pool.empty()) return std::nullopt;
  return Flip{pool[rng->uniform_int(pool.size())], false};
}

std::optional<Flip> pick_inc_neg(const SparseBinaryVector&,
                                 const JacobianSigns& signs,
                                 const std::vector<std::uint8_t>& enabled,
                                 const std::vector<std::uint8_t>& touched,
                                 Rng* rng) {
  std::optional<Flip> best;
  double best_value = 0.0;
  if (rng == nullptr) {
    for (std::uint32_t j : signs.negative) {
      if (enabled[j] || touched[j]) continue;
      if (!best || signs.d_benign[j] > best_value) {
        best = Flip{j, true};
        best_value = signs.d_benign[j];
      }
    }
    return best;
  }
  std::vector<std::uint32_t> pool;
  for (std::uint32_t j : signs.negative)
    if (!enabled[j] && !touched[j]) pool.push_back(j);
  if (pool.empty()) return std::nullopt;
  return Flip{pool[rng->uniform_int(pool.size())], true};
}

}  // namespace

std::optional<Flip> select_flip(Strategy strategy, std::uint32_t round,
                                const SparseBinaryVector& x,
                                const JacobianSigns& signs,
                                const std::vector<std::uint8_t>& touched,
                                Rng* rng) {
  std::vector<std::uint8_t> enabled(x.dim, 0);
  for (std::uint32_t j : x.on) enabled[j] = 1;

  switch (strategy) {
    case Strategy::dec_pos:
      return pick_dec_pos(x, signs, enabled, touched, nullptr);
    case Strategy::inc_neg:
      return pick_inc_neg(x, signs, enabled, touched, nullptr);
    case Strategy::rand_dec_pos:
      return pick_dec_pos(x, signs, enabled, touched, rng);
    case Strategy::rand_inc_neg:
      return pick_inc_neg(x, signs, enabled, touched, rng);
    case Strategy::dec_pos_inc_neg:
    case Strategy::rand_dec_pos_inc_neg: {
      Rng* r = strategy == Strategy::rand_dec_pos_inc_neg ? rng : nullptr;
      // dec_pos on even rounds, inc_neg on odd, falling back to the other
      // rule when the preferred pool is empty.
      if (round % 2 == 0) {
        auto f = pick_dec_pos(x, signs, enabled, touched, r);
        return f ? f : pick_inc_neg(x, signs, enabled, touched, r);
      }
      auto f = pick_inc_neg(x, signs, enabled, touched, r);
      return f ? f : pick_dec_pos(x, signs, enabled, touched, r);
    }
  }
  return std::nullopt;
}

namespace {

struct Verdict {
  bool malware = false;
  double p_malware = 0.0;
  int votes = -1;
};

Verdict query_target(std::span<const MlpModel> target, const SparseBinaryVector& x) {
  Verdict v;
  if (target.size() == 1) {
    v.p_malware = forward(target[0], x).p_malware();
    v.malware = v.p_malware >= 0.5;
  } else {
    const Vote vote = predict_ensemble(target, x);
    v.p_malware = vote.mean_p_malware;
    v.malware = vote.malware;
    v.votes = vote.votes_malware;
  }
  return v;
}

}  // namespace

AttackTrace craft(std::span<const MlpModel> target, const SparseBinaryVector& x0,
                  std::uint64_t sample_id, Strategy strategy, std::uint32_t budget,
                  std::uint64_t seed) {
  if (budget < 1) throw ContractError("craft: budget must be >= 1");
  if (target.empty()) throw ContractError("craft: empty target");

  AttackTrace trace;
  trace.sample_id = sample_id;
  trace.strategy = strategy;
  trace.budget = budget;

  if (!query_target(target, x0).malware) {
    trace.success_iteration = 0;
    return trace;
  }

  Rng rng(seed);
  SparseBinaryVector x = x0;
  std::vector<std::uint8_t> touched(x.dim, 0);
  for (std::uint32_t iter = 1; iter <= budget; ++iter) {
    const JacobianSigns signs = classify_feature_signs(target, x);
    const auto flip = select_flip(strategy, iter - 1, x, signs, touched, &rng);
    if (!flip) break;

    touched[flip->feature] = 1;
    if (flip->enable) {
      const auto it = std::lower_bound(x.on.begin(), x.on.end(), flip->feature);
      x.on.insert(it, flip->feature);
    } else {
      const auto it = std::lower_bound(x.on.begin(), x.on.end(), flip->feature);
      x.on.erase(it);
    }

    const Verdict v = query_target(target, x);
    trace.steps.push_back({iter, flip->feature, flip->enable, v.p_malware, v.votes});
    if (!v.malware) {
      trace.success_iteration = iter;
      break;
    }
  }
  return trace;
}

CampaignResult run_campaign(std::span<const MlpModel> target,
                            std::span<const SparseBinaryVector> samples,
                            std::span<const Strategy> strategies,
                            std::uint32_t budget, std::uint64_t seed,
                            kernels::Exec ex) {
  if (samples.empty()) throw ContractError("run_campaign: empty sample set");
  if (strategies.empty()) throw ContractError("run_campaign: no strategies given");

  CampaignResult result;
  result.budget = budget;
  result.traces.resize(samples.size() * strategies.size());

  const auto total = static_cast<std::int64_t>(result.traces.size());
  const auto n_samples = samples.size();
  auto run_one = [&](std::int64_t t) {
    const std::size_t strat_idx = static_cast<std::size_t>(t) / n_samples;
    const std::size_t sample_idx = static_cast<std::size_t>(t) % n_samples;
    const Strategy strategy = strategies[strat_idx];
    result.traces[static_cast<std::size_t>(t)] =
        craft(target, samples[sample_idx], sample_idx, strategy, budget,
              derive_seed(seed, strategy_name(strategy), sample_idx));
  };
  if (ex == kernels::Exec::parallel) {
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t t = 0; t < total; ++t) run_one(t);
  } else {
    for (std::int64_t t = 0; t < total; ++t) run_one(t);
  }

  for (std::size_t si = 0; si < strategies.size(); ++si) {
    std::vector<double>& rates = result.success_rate[strategies[si]];
    rates.assign(budget, 0.0);
    for (std::size_t k = 0; k < budget; ++k) {
      std::size_t hits = 0;
      for (std::size_t i = 0; i < n_samples; ++i) {
        const auto& trace = result.traces[si * n_samples + i];
        if (trace.success_iteration && *trace.success_iteration <= k + 1) ++hits;
      }
      rates[k] = static_cast<double>(hits) / static_cast<double>(n_samples);
    }
  }
  return result;
}

std::string traces_to_jsonl(std::span<const AttackTrace> traces) {
  std::string out;
  for (const auto& t : traces) {
    ordered_json j;
    j["sample_id"] = t.sample_id;
    j["strategy"] = strategy_name(t.strategy);
    j["budget"] = t.budget;
    if (t.success_iteration)
      j["success_iteration"] = *t.success_iteration;
    else
      j["success_iteration"] = nullptr;
    ordered_json steps = ordered_json::array();
    for (const auto& s : t.steps) {
      ordered_json step;
      step["iter"] = s.iteration;
      step["feature"] = s.feature;
      step["dir"] = s.enabled ? "0->1" : "1->0";
      step["p_m"] = s.p_malware_after;
      if (s.votes_malware >= 0) step["votes"] = s.votes_malware;
      steps.push_back(std::move(step));
    }
    j["steps"] = std::move(steps);
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::string campaign_to_csv(const CampaignResult& result) {
  std::string out = "strategy,iteration,success_rate\n";
  for (const auto& [strategy, rates] : result.success_rate)
    for (std::size_t k = 0; k < rates.size(); ++k) {
      out += strategy_name(strategy);
      out += ',';
      out += std::to_string(k + 1);
      out += ',';
      out += fmt_double(rates[k]);
      out += '\n';
    }
  return out;
}

}  // namespace advg
