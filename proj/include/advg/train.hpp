#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "advg/features.hpp"
#include "advg/kernels.hpp"
#include "advg/model.hpp"

namespace advg {

struct Arch {
  std::uint32_t hidden_count = 1;
  std::uint32_t hidden_dim = 128;
};

struct TrainConfig {
  double initial_step = 0.1;
  double min_step = 1e-4;
  std::uint32_t max_epochs = 200;
  std::uint32_t batch_size = 256;
  double dropout_rate = 0.25;
  double weight_decay = 0.0;   // L2 coefficient on weight matrices, not biases
  double temperature = 1.0;    // softmax temperature during training
  std::uint64_t seed = 42;
  std::uint32_t projected_dim = 256;
  // Projection structure seed; defaults to derive_seed(seed, "projection").
  // Ensemble members override it so all members share one projection.
  std::optional<std::uint64_t> projection_seed;

  void validate() const;  // throws ContractError
};

struct EpochLog {
  std::uint32_t epoch = 0;
  double step_size = 0.0;
  double train_loss = 0.0;   // cross-entropy plus the L2 penalty term
  double valid_error = 0.0;  // fraction in [0,1]
};

struct TrainResult {
  MlpModel model;
  std::vector<EpochLog> log;
};

struct DataBundle {
  LabeledDataset train, valid, test;
};

// Per-sample teacher probabilities, aligned 1:1 with the training samples.
using SoftTargetSet = std::vector<std::array<double, 2>>;

// Adam on cross-entropy over hard labels, with inverted dropout on hidden
// activations and optional L2 weight decay. The step size halves whenever the
// validation error fails to improve on the best seen; training stops at
// max_epochs or when the step falls below min_step; the returned parameters
// are the best-validation snapshot.
TrainResult train_baseline(const DataBundle& data, Arch arch, const TrainConfig& cfg,
                           kernels::Exec ex = kernels::default_exec());

// Teacher-student distillation at cfg.temperature: the teacher trains on hard
// labels, the student on the teacher's soft targets, both at the same
// temperature. The returned student is stamped for deployment at T = 1.
TrainResult train_distilled(const DataBundle& data, Arch arch, const TrainConfig& cfg,
                            kernels::Exec ex = kernels::default_exec());
struct DistillResult {
  TrainResult student;
  TrainResult teacher;
  SoftTargetSet soft_targets;
};
DistillResult train_distilled_full(const DataBundle& data, Arch arch,
                                   const TrainConfig& cfg,
                                   kernels::Exec ex = kernels::default_exec());

// E baseline models differing in parameter-initialization seed
// (cfg.seed + member index), including each member's random projection.
struct EnsembleResult {
  std::vector<MlpModel> members;
  std::vector<std::vector<EpochLog>> logs;
};
EnsembleResult train_ensemble(const DataBundle& data, Arch arch,
                              const TrainConfig& cfg, std::uint32_t ensemble_size,
                              kernels::Exec ex = kernels::default_exec());

struct Vote {
  bool malware = false;
  int votes_malware = 0;
  int member_count = 0;
  double mean_p_malware = 0.0;
};

// Majority vote: each member votes malware iff its p_M >= 0.5.
Vote predict_ensemble(std::span<const MlpModel> members, const SparseBinaryVector& x);

// Training-log CSV: epoch,step_size,train_loss,valid_error.
std::string epoch_log_to_csv(std::span<const EpochLog> log);

// Sum of squared weight-matrix entries (bias terms excluded).
double weight_squared_norm(const MlpModel& model);

}  // namespace advg
