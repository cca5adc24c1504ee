#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "advg/attack.hpp"
#include "advg/corpus.hpp"
#include "advg/train.hpp"

namespace advg {

struct DefenseSpec {
  enum class Kind { none, distill, decay, ensemble };
  Kind kind = Kind::none;
  double temperature = 2.0;    // distill
  double decay = 1e-4;         // decay
  std::uint32_t ensemble = 3;  // ensemble

  // Canonical tag: none | distill:T=2 | decay:D=0.0001 | ensemble:E=3.
  std::string tag() const;
  static DefenseSpec parse(const std::string& text);  // throws ConfigError
};

struct ExperimentConfig {
  CorpusSpec corpus;
  std::uint32_t feature_k = 2000;
  std::array<double, 3> split_ratios{0.642, 0.113, 0.245};
  std::vector<std::uint32_t> hidden_layers{1, 2, 3, 4};
  std::uint32_t hidden_dim = 128;
  std::uint32_t projected_dim = 256;
  std::vector<DefenseSpec> defenses{DefenseSpec{}};
  TrainConfig train;  // seed and projection_seed are derived per cell
  std::uint32_t attack_budget = 20;
  std::vector<Strategy> strategies = all_strategies();
  std::uint32_t max_attack_samples = 500;  // 0 = no cap
  std::uint64_t master_seed = 42;
  std::string out_dir = "runs/experiment";

  static ExperimentConfig from_json_text(const std::string& text);
  std::string to_json_text() const;  // canonical form; round-trips
  void validate() const;
};

// One trainable unit of the grid. Defenses other than ensemble cross with
// every H in hidden_layers; an ensemble is a single cell at the first H.
struct GridCell {
  DefenseSpec defense;
  std::uint32_t hidden_count = 1;
  std::string name() const;  // e.g. baseline-H1, distill-T10-H2, ensemble-E5-H1
};

std::vector<GridCell> plan_grid(const ExperimentConfig& cfg);

struct StageStatus {
  std::string name;
  bool executed = false;  // false when skipped via manifest hashes
  bool ok = true;
};

struct PipelineResult {
  std::filesystem::path out_dir;
  std::vector<StageStatus> stages;
};

// Runs corpus -> extract -> train -> attack -> eval -> report, skipping
// stages whose fingerprint and outputs match the manifest of a previous run.
// The manifest (manifest.json) carries per-stage input fingerprints, output
// hashes, and derived seeds.
PipelineResult run_pipeline(const ExperimentConfig& cfg, std::ostream& log);

}  // namespace advg
