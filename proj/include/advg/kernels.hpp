#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace advg::kernels {

// Every kernel has a serial reference path and an OpenMP path. The parallel
// path assigns each output element to exactly one thread and keeps all
// floating-point reductions in a fixed serial order, so the two paths produce
// bit-identical results for any thread count. Tests assert exact equality.
enum class Exec { serial, parallel };

Exec default_exec();
void set_default_exec(Exec e);
int thread_count();

// y = W x + b. W is rows x cols, row-major.
void affine(const double* W, const double* b, const double* x, double* y,
            std::size_t rows, std::size_t cols);

// out[s] = W in[s] + b for s in [0, n).
void affine_batch(Exec ex, const double* W, const double* b, const double* in,
                  double* out, std::size_t n, std::size_t rows, std::size_t cols);

// dh[s] = W^T dz[s] for s in [0, n). W is rows x cols.
void affine_backward_batch(Exec ex, const double* W, const double* dz,
                           double* dh, std::size_t n, std::size_t rows,
                           std::size_t cols);

// dW[r,c] = sum_s dz[s*rows + r] * h[s*cols + c]; overwrite, serial sum over s.
void weight_grad(Exec ex, const double* dz, const double* h, double* dW,
                 std::size_t n, std::size_t rows, std::size_t cols);

// db[r] = sum_s dz[s*rows + r].
void bias_grad(Exec ex, const double* dz, double* db, std::size_t n,
               std::size_t rows);

void relu_inplace(double* x, std::size_t n);

// One Adam step over a flat parameter block. bias1/bias2 are the
// 1 - beta^t correction terms for the current step count.
void adam_update(Exec ex, double* theta, double* m, double* v, const double* g,
                 std::size_t n, double step, double beta1, double beta2,
                 double eps, double bias1, double bias2);

// Per-feature presence counts by class. on_lists[s] holds the sorted active
// feature indices of sample s; labels[s] in {0,1}. Output arrays have
// n_features entries. Integer accumulation, so thread merge order is
// irrelevant to the result.
void presence_counts(Exec ex, const std::vector<std::vector<std::uint32_t>>& on_lists,
                     const std::vector<std::uint8_t>& labels,
                     std::size_t n_features, std::uint64_t* on_count_benign,
                     std::uint64_t* on_count_malware);

}  // namespace advg::kernels
