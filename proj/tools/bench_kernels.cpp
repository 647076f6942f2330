// Times the parallel matrix kernels against the serial reference at a few
// square sizes and prints a throughput table.

#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "moelab/kernels.hpp"
#include "moelab/rng.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double time_once(const std::function<void()>& fn) {
  auto start = Clock::now();
  fn();
  return std::chrono::duration<double>(Clock::now() - start).count();
}

double best_of(int reps, const std::function<void()>& fn) {
  double best = 1e30;
  for (int i = 0; i < reps; ++i) best = std::min(best, time_once(fn));
  return best;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"matrix kernel benchmark: serial reference vs parallel"};
  std::vector<int64_t> sizes = {64, 128, 256, 512};
  int reps = 5;
  int threads = 0;  // 0: leave the library default
  app.add_option("--sizes", sizes, "square sizes to time");
  app.add_option("--reps", reps, "repetitions per measurement (best is kept)");
  app.add_option("--threads", threads, "thread budget for the parallel kernels");
  CLI11_PARSE(app, argc, argv);

  if (threads > 0) moelab::kernels::set_threads(threads);
  std::printf("thread budget: %d\n", moelab::kernels::threads());
  std::printf("%-6s %-4s %12s %12s %8s\n", "kernel", "n", "serial GF/s", "parallel GF/s",
              "speedup");

  moelab::Rng rng(1234);
  for (int64_t n : sizes) {
    std::vector<float> a(static_cast<size_t>(n * n)), b(a.size()), c(a.size());
    for (auto& v : a) v = static_cast<float>(rng.normal());
    for (auto& v : b) v = static_cast<float>(rng.normal());
    const double flops = 2.0 * static_cast<double>(n) * n * n;

    struct Row {
      const char* name;
      std::function<void()> serial, parallel;
    };
    const Row rows[] = {
        {"nn", [&] { moelab::kernels::serial::matmul_nn(a.data(), b.data(), c.data(), n, n, n); },
         [&] { moelab::kernels::matmul_nn(a.data(), b.data(), c.data(), n, n, n); }},
        {"nt", [&] { moelab::kernels::serial::matmul_nt(a.data(), b.data(), c.data(), n, n, n); },
         [&] { moelab::kernels::matmul_nt(a.data(), b.data(), c.data(), n, n, n); }},
        {"tn", [&] { moelab::kernels::serial::matmul_tn(a.data(), b.data(), c.data(), n, n, n); },
         [&] { moelab::kernels::matmul_tn(a.data(), b.data(), c.data(), n, n, n); }},
    };
    for (const auto& row : rows) {
      const double ts = best_of(reps, row.serial);
      const double tp = best_of(reps, row.parallel);
      std::printf("%-6s %-4lld %12.2f %12.2f %7.2fx\n", row.name,
                  static_cast<long long>(n), flops / ts / 1e9, flops / tp / 1e9, ts / tp);
    }
  }
  return 0;
}
