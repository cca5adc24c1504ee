// Benchmark of the OpenMP kernels against their serial reference paths.
// Also asserts bit-identical outputs between the two, since the parallel
// kernels are written to be exact.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <vector>

#include "advg/kernels.hpp"
#include "advg/model.hpp"
#include "advg/rng.hpp"

using namespace advg;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <class F>
double time_best(int reps, F&& f) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = Clock::now();
    f();
    best = std::min(best, seconds_since(t0));
  }
  return best;
}

void fill(Rng& rng, std::vector<double>& v) {
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
}

bool identical(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

void report(const char* name, double serial, double parallel, bool exact) {
  std::printf("%-22s %10.4f ms %10.4f ms   %5.2fx   %s\n", name, serial * 1e3,
              parallel * 1e3, serial / parallel, exact ? "bit-identical" : "MISMATCH");
}

}  // namespace

int main(int argc, char** argv) {
  std::size_t n = 4096, rows = 256, cols = 256;
  int reps = 5;
  for (int i = 1; i + 1 < argc; i += 2) {
    if (!std::strcmp(argv[i], "--n")) n = std::strtoull(argv[i + 1], nullptr, 10);
    else if (!std::strcmp(argv[i], "--rows")) rows = std::strtoull(argv[i + 1], nullptr, 10);
    else if (!std::strcmp(argv[i], "--cols")) cols = std::strtoull(argv[i + 1], nullptr, 10);
    else if (!std::strcmp(argv[i], "--reps")) reps = std::atoi(argv[i + 1]);
  }
  std::printf("kernel bench: n=%zu rows=%zu cols=%zu threads=%d\n", n, rows, cols,
              kernels::thread_count());
  std::printf("%-22s %13s %13s %8s\n", "kernel", "serial", "openmp", "speedup");

  Rng rng(1234);
  std::vector<double> W(rows * cols), b(rows), in(n * cols), out_s(n * rows),
      out_p(n * rows);
  fill(rng, W);
  fill(rng, b);
  fill(rng, in);

  using kernels::Exec;
  const double t_aff_s = time_best(reps, [&] {
    kernels::affine_batch(Exec::serial, W.data(), b.data(), in.data(), out_s.data(),
                          n, rows, cols);
  });
  const double t_aff_p = time_best(reps, [&] {
    kernels::affine_batch(Exec::parallel, W.data(), b.data(), in.data(),
                          out_p.data(), n, rows, cols);
  });
  report("affine_batch", t_aff_s, t_aff_p, identical(out_s, out_p));

  std::vector<double> dz(n * rows), gW_s(rows * cols), gW_p(rows * cols);
  fill(rng, dz);
  const double t_gw_s = time_best(reps, [&] {
    kernels::weight_grad(Exec::serial, dz.data(), in.data(), gW_s.data(), n, rows,
                         cols);
  });
  const double t_gw_p = time_best(reps, [&] {
    kernels::weight_grad(Exec::parallel, dz.data(), in.data(), gW_p.data(), n, rows,
                         cols);
  });
  report("weight_grad", t_gw_s, t_gw_p, identical(gW_s, gW_p));

  std::vector<double> dh_s(n * cols), dh_p(n * cols);
  const double t_bw_s = time_best(reps, [&] {
    kernels::affine_backward_batch(Exec::serial, W.data(), dz.data(), dh_s.data(),
                                   n, rows, cols);
  });
  const double t_bw_p = time_best(reps, [&] {
    kernels::affine_backward_batch(Exec::parallel, W.data(), dz.data(), dh_p.data(),
                                   n, rows, cols);
  });
  report("affine_backward", t_bw_s, t_bw_p, identical(dh_s, dh_p));

  // Sparse projection of binary vectors, the input side of every model.
  const std::uint32_t d_in = 2000;
  const auto proj = SparseProjection::init(d_in, static_cast<std::uint32_t>(cols), 7);
  std::vector<SparseBinaryVector> xs(n);
  for (std::size_t s = 0; s < n; ++s) {
    Rng r(derive_seed(7, "x", s));
    SparseBinaryVector& x = xs[s];
    x.dim = d_in;
    for (std::uint32_t j = 0; j < d_in; ++j)
      if (r.bernoulli(0.05)) x.on.push_back(j);
  }
  std::vector<double> proj_s(n * cols), proj_p(n * cols);
  const double t_pr_s = time_best(reps, [&] {
    for (std::size_t s = 0; s < n; ++s)
      proj.apply(xs[s], proj_s.data() + s * cols);
  });
  const double t_pr_p = time_best(reps, [&] {
#pragma omp parallel for schedule(static)
    for (std::int64_t s = 0; s < static_cast<std::int64_t>(n); ++s)
      proj.apply(xs[static_cast<std::size_t>(s)],
                 proj_p.data() + static_cast<std::size_t>(s) * cols);
  });
  report("project_batch", t_pr_s, t_pr_p, identical(proj_s, proj_p));

  // Presence counting used by mutual-information selection.
  std::vector<std::vector<std::uint32_t>> on_lists(n);
  std::vector<std::uint8_t> labels(n);
  for (std::size_t s = 0; s < n; ++s) {
    on_lists[s] = xs[s].on;
    labels[s] = static_cast<std::uint8_t>(s % 2);
  }
  std::vector<std::uint64_t> c0s(d_in), c1s(d_in), c0p(d_in), c1p(d_in);
  const double t_pc_s = time_best(reps, [&] {
    kernels::presence_counts(Exec::serial, on_lists, labels, d_in, c0s.data(),
                             c1s.data());
  });
  const double t_pc_p = time_best(reps, [&] {
    kernels::presence_counts(Exec::parallel, on_lists, labels, d_in, c0p.data(),
                             c1p.data());
  });
  report("presence_counts", t_pc_s, t_pc_p, c0s == c0p && c1s == c1p);

  return 0;
}
