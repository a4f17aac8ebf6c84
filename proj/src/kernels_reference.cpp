#include "ni/kernels.hpp"

#include <cmath>
#include <vector>

namespace ni::kernels::reference {

namespace {
constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;
}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t M, std::size_t N, std::size_t K,
          const double* A, const double* B, double* C, bool accumulate) {
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t j = 0; j < N; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const double a = trans_a ? A[k * M + i] : A[i * K + k];
        const double b = trans_b ? B[j * K + k] : B[k * N + j];
        s += a * b;
      }
      C[i * N + j] = accumulate ? C[i * N + j] + s : s;
    }
  }
}

void softmax(const double* x, double* y, std::size_t outer, std::size_t n, std::size_t inner) {
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = x[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        y[base + j * inner] = std::exp(x[base + j * inner] - mx);
        total += y[base + j * inner];
      }
      for (std::size_t j = 0; j < n; ++j) y[base + j * inner] /= total;
    }
  }
}

void softmax_backward(const double* y, const double* gy, double* gx, std::size_t outer,
                      std::size_t n, std::size_t inner) {
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[base + j * inner] * gy[base + j * inner];
      for (std::size_t j = 0; j < n; ++j) {
        gx[base + j * inner] = y[base + j * inner] * (gy[base + j * inner] - dot);
      }
    }
  }
}

void layer_norm(const double* x, const double* gamma, const double* beta, double* y,
                double* mean, double* rstd, std::size_t rows, std::size_t n, double eps) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) y[r * n + j] = gamma[j] * (xr[j] - mu) * rs + beta[j];
    mean[r] = mu;
    rstd[r] = rs;
  }
}

void layer_norm_backward(const double* x, const double* gamma, const double* mean,
                         const double* rstd, const double* gy, double* gx, double* ggamma,
                         double* gbeta, std::size_t rows, std::size_t n) {
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * n;
    const double* gr = gy + r * n;
    double sum_g = 0.0;
    double sum_gx = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double xhat = (xr[j] - mean[r]) * rstd[r];
      const double g = gr[j] * gamma[j];
      sum_g += g;
      sum_gx += g * xhat;
      ggamma[j] += gr[j] * xhat;
      gbeta[j] += gr[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
      const double xhat = (xr[j] - mean[r]) * rstd[r];
      const double g = gr[j] * gamma[j];
      gx[r * n + j] = rstd[r] * (g - sum_g * inv_n - xhat * sum_gx * inv_n);
    }
  }
}

void gelu(const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i];
    y[i] = 0.5 * v * (1.0 + std::tanh(kGeluScale * (v + kGeluCubic * v * v * v)));
  }
}

void gelu_backward(const double* x, const double* gy, double* gx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i];
    const double t = std::tanh(kGeluScale * (v + kGeluCubic * v * v * v));
    const double du = kGeluScale * (1.0 + 3.0 * kGeluCubic * v * v);
    gx[i] = gy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
  }
}

void reduce_sum(const double* x, double* y, std::size_t outer, std::size_t n, std::size_t inner) {
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += x[(o * n + j) * inner + in];
      y[o * inner + in] = s;
    }
  }
}

}  // namespace ni::kernels::reference
