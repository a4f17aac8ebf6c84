// Times the OpenMP kernels against the serial reference on the shapes the
// desk model produces, and checks that both agree.
//
//   bench_kernels [repeats]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <omp.h>
#include <random>
#include <string>
#include <vector>

#include "ni/kernels.hpp"

namespace k = ni::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

double seconds(const std::function<void()>& f, int repeats) {
  f();  // warm up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < repeats; ++i) f();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / repeats;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

void row(const std::string& name, double ref, double par, double flops, double diff) {
  std::printf("%-34s %10.1f us %10.1f us %7.2fx", name.c_str(), ref * 1e6, par * 1e6, ref / par);
  if (flops > 0) std::printf(" %7.2f GF/s", flops / par * 1e-9);
  else std::printf("             ");
  std::printf("  maxdiff %.1e\n", diff);
}

}  // namespace

int main(int argc, char** argv) {
  const int repeats = argc > 1 ? std::atoi(argv[1]) : 50;
  std::printf("threads %d, repeats %d\n", omp_get_max_threads(), repeats);
  std::printf("%-34s %13s %13s %8s\n", "kernel", "reference", "parallel", "speedup");

  // [F*B*S, D] x [D, K]: one micro-batch of 32 through a 64 -> 32 ModLin,
  // then the weight gradient and a square 512 case.
  struct G { std::size_t m, n, kk; bool ta, tb; };
  for (const G g : {G{4 * 32 * 13, 32, 64, false, false}, G{4 * 32 * 13, 64, 64, false, false},
                    G{64, 32, 4 * 32 * 13, true, false}, G{4 * 32 * 13, 64, 32, false, true},
                    G{512, 512, 512, false, false}}) {
    const auto a = random_vec(g.m * g.kk, 1);
    const auto b = random_vec(g.kk * g.n, 2);
    std::vector<double> c1(g.m * g.n), c2(g.m * g.n);
    const double ref = seconds([&] { k::reference::gemm(g.ta, g.tb, g.m, g.n, g.kk, a.data(), b.data(), c1.data(), false); }, repeats);
    const double par = seconds([&] { k::gemm(g.ta, g.tb, g.m, g.n, g.kk, a.data(), b.data(), c2.data(), false); }, repeats);
    char name[64];
    std::snprintf(name, sizeof name, "gemm%s%s %zux%zux%zu", g.ta ? " At" : "", g.tb ? " Bt" : "", g.m, g.n, g.kk);
    row(name, ref, par, 2.0 * g.m * g.n * g.kk, max_diff(c1, c2));
  }

  {
    const std::size_t outer = 4 * 32, n = 13, inner = 13;
    const auto x = random_vec(outer * n * inner, 3);
    std::vector<double> y1(x.size()), y2(x.size());
    const double ref = seconds([&] { k::reference::softmax(x.data(), y1.data(), outer, n, inner); }, repeats);
    const double par = seconds([&] { k::softmax(x.data(), y2.data(), outer, n, inner); }, repeats);
    row("softmax 128x13x13", ref, par, 0, max_diff(y1, y2));
  }
  {
    const std::size_t rows = 4 * 32 * 13, n = 64;
    const auto x = random_vec(rows * n, 4);
    const auto g = random_vec(n, 5), b = random_vec(n, 6);
    std::vector<double> y1(x.size()), y2(x.size()), m(rows), r(rows);
    const double ref = seconds([&] { k::reference::layer_norm(x.data(), g.data(), b.data(), y1.data(), m.data(), r.data(), rows, n, 1e-5); }, repeats);
    const double par = seconds([&] { k::layer_norm(x.data(), g.data(), b.data(), y2.data(), m.data(), r.data(), rows, n, 1e-5); }, repeats);
    row("layer_norm 1664x64", ref, par, 0, max_diff(y1, y2));
  }
  {
    const auto x = random_vec(4 * 32 * 13 * 64, 7);
    std::vector<double> y1(x.size()), y2(x.size());
    const double ref = seconds([&] { k::reference::gelu(x.data(), y1.data(), x.size()); }, repeats);
    const double par = seconds([&] { k::gelu(x.data(), y2.data(), x.size()); }, repeats);
    row("gelu 106496", ref, par, 0, max_diff(y1, y2));
  }
  {
    const std::size_t outer = 1, n = 4, inner = 32 * 13 * 64;
    const auto x = random_vec(outer * n * inner, 8);
    std::vector<double> y1(inner), y2(inner);
    const double ref = seconds([&] { k::reference::reduce_sum(x.data(), y1.data(), outer, n, inner); }, repeats);
    const double par = seconds([&] { k::reduce_sum(x.data(), y2.data(), outer, n, inner); }, repeats);
    row("reduce_sum 4x26624", ref, par, 0, max_diff(y1, y2));
  }
  return 0;
}
