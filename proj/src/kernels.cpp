#include "advg/kernels.hpp"

#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace advg::kernels {

namespace {
Exec g_default =
#ifdef _OPENMP
    Exec::parallel;
#else
    Exec::serial;
#endif
}  // namespace

Exec default_exec() { return g_default; }
void set_default_exec(Exec e) { g_default = e; }

int thread_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void affine(const double* W, const double* b, const double* x, double* y,
            std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = b[r];
    const double* wr = W + r * cols;
    for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * x[c];
    y[r] = acc;
  }
}

void affine_batch(Exec ex, const double* W, const double* b, const double* in,
                  double* out, std::size_t n, std::size_t rows,
                  std::size_t cols) {
  const auto ni = static_cast<std::int64_t>(n);
  if (ex == Exec::parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t s = 0; s < ni; ++s)
      affine(W, b, in + s * static_cast<std::int64_t>(cols),
             out + s * static_cast<std::int64_t>(rows), rows, cols);
  } else {
    for (std::int64_t s = 0; s < ni; ++s)
      affine(W, b, in + s * static_cast<std::int64_t>(cols),
             out + s * static_cast<std::int64_t>(rows), rows, cols);
  }
}

namespace {
inline void backward_one(const double* W, const double* dz, double* dh,
                         std::size_t rows, std::size_t cols) {
  for (std::size_t c = 0; c < cols; ++c) dh[c] = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double g = dz[r];
    const double* wr = W + r * cols;
    for (std::size_t c = 0; c < cols; ++c) dh[c] += g * wr[c];
  }
}
}  // namespace

void affine_backward_batch(Exec ex, const double* W, const double* dz,
                           double* dh, std::size_t n, std::size_t rows,
                           std::size_t cols) {
  const auto ni = static_cast<std::int64_t>(n);
  if (ex == Exec::parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t s = 0; s < ni; ++s)
      backward_one(W, dz + s * static_cast<std::int64_t>(rows),
                   dh + s * static_cast<std::int64_t>(cols), rows, cols);
  } else {
    for (std::int64_t s = 0; s < ni; ++s)
      backward_one(W, dz + s * static_cast<std::int64_t>(rows),
                   dh + s * static_cast<std::int64_t>(cols), rows, cols);
  }
}

namespace {
inline void weight_grad_row(const double* dz, const double* h, double* dWr,
                            std::size_t n, std::size_t rows, std::size_t cols,
                            std::size_t r) {
  for (std::size_t c = 0; c < cols; ++c) dWr[c] = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    const double g = dz[s * rows + r];
    if (g == 0.0) continue;
    const double* hs = h + s * cols;
    for (std::size_t c = 0; c < cols; ++c) dWr[c] += g * hs[c];
  }
}
}  // namespace

void weight_grad(Exec ex, const double* dz, const double* h, double* dW,
                 std::size_t n, std::size_t rows, std::size_t cols) {
  const auto ri = static_cast<std::int64_t>(rows);
  if (ex == Exec::parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < ri; ++r)
      weight_grad_row(dz, h, dW + r * static_cast<std::int64_t>(cols), n, rows,
                      cols, static_cast<std::size_t>(r));
  } else {
    for (std::int64_t r = 0; r < ri; ++r)
      weight_grad_row(dz, h, dW + r * static_cast<std::int64_t>(cols), n, rows,
                      cols, static_cast<std::size_t>(r));
  }
}

void bias_grad(Exec ex, const double* dz, double* db, std::size_t n,
               std::size_t rows) {
  const auto ri = static_cast<std::int64_t>(rows);
  if (ex == Exec::parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < ri; ++r) {
      double acc = 0.0;
      for (std::size_t s = 0; s < n; ++s) acc += dz[s * rows + r];
      db[r] = acc;
    }
  } else {
    for (std::int64_t r = 0; r < ri; ++r) {
      double acc = 0.0;
      for (std::size_t s = 0; s < n; ++s) acc += dz[s * rows + r];
      db[r] = acc;
    }
  }
}

void relu_inplace(double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (x[i] < 0.0) x[i] = 0.0;
}

void adam_update(Exec ex, double* theta, double* m, double* v, const double* g,
                 std::size_t n, double step, double beta1, double beta2,
                 double eps, double bias1, double bias2) {
  const auto ni = static_cast<std::int64_t>(n);
  if (ex == Exec::parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < ni; ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      const double mhat = m[i] / bias1;
      const double vhat = v[i] / bias2;
      theta[i] -= step * mhat / (std::sqrt(vhat) + eps);
    }
  } else {
    for (std::int64_t i = 0; i < ni; ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      const double mhat = m[i] / bias1;
      const double vhat = v[i] / bias2;
      theta[i] -= step * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

void presence_counts(Exec ex,
                     const std::vector<std::vector<std::uint32_t>>& on_lists,
                     const std::vector<std::uint8_t>& labels,
                     std::size_t n_features, std::uint64_t* on_count_benign,
                     std::uint64_t* on_count_malware) {
  for (std::size_t j = 0; j < n_features; ++j) {
    on_count_benign[j] = 0;
    on_count_malware[j] = 0;
  }
  const auto n = on_lists.size();
  if (ex == Exec::parallel) {
#ifdef _OPENMP
#pragma omp parallel
    {
      std::vector<std::uint64_t> local0(n_features, 0), local1(n_features, 0);
#pragma omp for schedule(static) nowait
      for (std::int64_t s = 0; s < static_cast<std::int64_t>(n); ++s) {
        auto* local = labels[s] ? local1.data() : local0.data();
        for (std::uint32_t j : on_lists[s]) ++local[j];
      }
#pragma omp critical
      {
        for (std::size_t j = 0; j < n_features; ++j) {
          on_count_benign[j] += local0[j];
          on_count_malware[j] += local1[j];
        }
      }
    }
    return;
#endif
  }
  for (std::size_t s = 0; s < n; ++s) {
    auto* counts = labels[s] ? on_count_malware : on_count_benign;
    for (std::uint32_t j : on_lists[s]) ++counts[j];
  }
}

}  // namespace advg::kernels
