#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advg/features.hpp"
#include "advg/kernels.hpp"
#include "advg/model.hpp"
#include "advg/rng.hpp"

namespace advg {

// Six one-flip-per-iteration crafting strategies. The first three rank
// candidate features by the Jacobian of the class probabilities; the rand_*
// variants pick uniformly from the same candidate pools.
enum class Strategy {
  dec_pos,
  inc_neg,
  dec_pos_inc_neg,
  rand_dec_pos,
  rand_inc_neg,
  rand_dec_pos_inc_neg,
};

const char* strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);
std::vector<Strategy> all_strategies();

// Jacobian of the class probabilities with respect to the original binary
// features, evaluated at x. For an ensemble this is the unweighted mean of
// the member Jacobians. positive: d p_malware / d x_j > 0 (enabling pushes
// toward malware); negative: d p_benign / d x_j > 0.
struct JacobianSigns {
  std::vector<double> d_benign;   // size D
  std::vector<double> d_malware;  // size D
  std::vector<std::uint32_t> positive;
  std::vector<std::uint32_t> negative;
};

JacobianSigns classify_feature_signs(std::span<const MlpModel> target,
                                     const SparseBinaryVector& x);

struct Flip {
  std::uint32_t feature = 0;
  bool enable = false;  // false: 1 -> 0, true: 0 -> 1
};

// Picks the next feature to flip, or nothing if every applicable pool is
// empty. `round` is 0-based and drives the dec_pos/inc_neg alternation
// (dec_pos first). Features already flipped in this trace (`touched`) are
// excluded so no feature is altered twice. rng is consulted only by the
// randomized strategies.
std::optional<Flip> select_flip(Strategy strategy, std::uint32_t round,
                                const SparseBinaryVector& x,
                                const JacobianSigns& signs,
                                const std::vector<std::uint8_t>& touched,
                                Rng* rng);

struct AttackStep {
  std::uint32_t iteration = 0;  // 1-based flip count
  std::uint32_t feature = 0;
  bool enabled = false;  // direction: true for 0->1
  double p_malware_after = 0.0;
  int votes_malware = -1;  // ensemble targets only
};

struct AttackTrace {
  std::uint64_t sample_id = 0;
  Strategy strategy = Strategy::dec_pos;
  std::uint32_t budget = 0;
  std::vector<AttackStep> steps;
  std::optional<std::uint32_t> success_iteration;
};

// Iterative crafting: re-evaluate the Jacobian at the current point, flip one
// feature, query the target; stop on a benign verdict, an empty candidate
// pool, or the budget. A sample the target already calls benign succeeds at
// iteration 0 with no steps.
AttackTrace craft(std::span<const MlpModel> target, const SparseBinaryVector& x0,
                  std::uint64_t sample_id, Strategy strategy, std::uint32_t budget,
                  std::uint64_t seed);

struct CampaignResult {
  std::uint32_t budget = 0;
  // Per strategy: cumulative success fraction at iterations 1..budget.
  std::map<Strategy, std::vector<double>> success_rate;
  std::vector<AttackTrace> traces;
};

// Runs every strategy against every sample; sample_ids index into `samples`.
CampaignResult run_campaign(std::span<const MlpModel> target,
                            std::span<const SparseBinaryVector> samples,
                            std::span<const Strategy> strategies,
                            std::uint32_t budget, std::uint64_t seed,
                            kernels::Exec ex = kernels::default_exec());

std::string traces_to_jsonl(std::span<const AttackTrace> traces);
std::string campaign_to_csv(const CampaignResult& result);

}  // namespace advg
