#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "advg/features.hpp"
#include "advg/kernels.hpp"

namespace advg {

// Fixed sparse random projection from the D-dimensional binary feature space
// to P dimensions. Each entry is +1 or -1 with probability 1/(2*sqrt(D)) each
// and 0 otherwise; stored sparsely by input row. Immutable after creation.
struct SparseProjection {
  std::uint32_t input_dim = 0;   // D
  std::uint32_t output_dim = 0;  // P
  std::uint64_t seed = 0;
  std::vector<std::uint32_t> row_ptr;  // D+1
  std::vector<std::uint32_t> col;      // nonzero columns, ascending per row
  std::vector<std::int8_t> sign;       // +1 / -1

  static SparseProjection init(std::uint32_t input_dim, std::uint32_t output_dim,
                               std::uint64_t seed);

  std::size_t nonzeros() const { return col.size(); }
  // out[output_dim] = R^T x for a binary x given by its active indices.
  void apply(const SparseBinaryVector& x, double* out) const;
  // Continuous relaxation, x has input_dim entries.
  void apply_dense(const double* x, double* out) const;
};

struct Normalizer {
  std::vector<double> mean;
  std::vector<double> stddev;  // floored at 1e-8

  static constexpr double kStddevFloor = 1e-8;
  // Column statistics of an n x p row-major matrix (training split only).
  static Normalizer fit(const double* X, std::size_t n, std::size_t p);
  void apply(double* v) const;
};

struct DenseLayer {
  std::uint32_t rows = 0, cols = 0;
  std::vector<double> W;  // rows x cols, row-major
  std::vector<double> b;  // rows
};

// Feed-forward classifier: projection, normalization, H hidden ReLU layers,
// linear output, temperature softmax. Immutable once training completes.
struct MlpModel {
  static constexpr std::uint32_t kClasses = 2;  // 0 = benign, 1 = malware

  SparseProjection projection;
  Normalizer normalizer;
  std::vector<DenseLayer> layers;  // H hidden + 1 output
  std::uint32_t hidden_count = 0;
  std::uint32_t hidden_dim = 0;
  double temperature = 1.0;
  std::uint64_t train_seed = 0;
  std::string defense = "none";

  std::uint32_t input_dim() const { return projection.input_dim; }
  std::uint32_t projected_dim() const { return projection.output_dim; }
  void check_shapes() const;  // throws ContractError on a broken chain
};

struct Prediction {
  std::array<double, 2> logits{};
  std::array<double, 2> probs{};
  double p_malware() const { return probs[1]; }
};

// Numerically stable softmax of z / T.
std::array<double, 2> softmax2(const std::array<double, 2>& z, double temperature);

// Inference; dropout is never applied here. temperature_override > 0 replaces
// the model's own softmax temperature.
Prediction forward(const MlpModel& model, const SparseBinaryVector& x,
                   double temperature_override = 0.0);
// Forward from an already projected-and-normalized vector v[P].
Prediction forward_projected(const MlpModel& model, const double* v,
                             double temperature_override = 0.0);
// Continuous-input forward (finite-difference oracles).
Prediction forward_dense(const MlpModel& model, const double* x,
                         double temperature_override = 0.0);

// Exact d probs / d v, 2 x P row-major, of the temperature softmax output
// with respect to the normalized projected input.
std::vector<double> jacobian_projected(const MlpModel& model,
                                       const SparseBinaryVector& x,
                                       double temperature_override = 0.0);
// Chained back to the original binary space: 2 x D row-major.
std::vector<double> jacobian_original(const MlpModel& model,
                                      const SparseBinaryVector& x,
                                      double temperature_override = 0.0);

// Versioned text container; round-trips every parameter bit-exactly.
void save_model(const MlpModel& model, const std::filesystem::path& path);
MlpModel load_model(const std::filesystem::path& path);
std::string model_to_text(const MlpModel& model);
MlpModel model_from_text(const std::string& text, const std::string& origin = "<memory>");

void save_ensemble(std::span<const MlpModel> members, const std::filesystem::path& path);
std::vector<MlpModel> load_ensemble(const std::filesystem::path& path);

// Loads either a single model or an ensemble, detected by the header line.
std::vector<MlpModel> load_target(const std::filesystem::path& path);

}  // namespace advg
