#include "ni/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ni::kernels {

namespace {

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

// Below this many multiply-adds a kernel runs on the calling thread.
constexpr std::size_t kParallelWork = 1u << 15;
constexpr std::size_t kRowBlock = 4;

// C[M,N] (+)= A*B where A(i,k) = A[i*a_row + k*a_col] and B is row-major [K,N].
// Rows of C are processed in blocks of four so each loaded row of B feeds four
// accumulator rows.
void gemm_rows(std::size_t M, std::size_t N, std::size_t K, const double* A, std::size_t a_row,
               std::size_t a_col, const double* B, double* C, bool accumulate) {
  const std::size_t blocks = (M + kRowBlock - 1) / kRowBlock;
  const bool parallel = M * N * K >= kParallelWork && blocks > 1;

#pragma omp parallel if (parallel)
  {
    std::vector<double> acc(kRowBlock * N);
#pragma omp for schedule(static)
    for (std::size_t blk = 0; blk < blocks; ++blk) {
      const std::size_t i0 = blk * kRowBlock;
      const std::size_t rows = std::min(kRowBlock, M - i0);
      std::fill(acc.begin(), acc.end(), 0.0);
      double* c0 = acc.data();
      double* c1 = c0 + N;
      double* c2 = c1 + N;
      double* c3 = c2 + N;
      if (rows == kRowBlock) {
        for (std::size_t k = 0; k < K; ++k) {
          const double a0 = A[(i0 + 0) * a_row + k * a_col];
          const double a1 = A[(i0 + 1) * a_row + k * a_col];
          const double a2 = A[(i0 + 2) * a_row + k * a_col];
          const double a3 = A[(i0 + 3) * a_row + k * a_col];
          const double* b = B + k * N;
#pragma omp simd
          for (std::size_t j = 0; j < N; ++j) {
            c0[j] += a0 * b[j];
            c1[j] += a1 * b[j];
            c2[j] += a2 * b[j];
            c3[j] += a3 * b[j];
          }
        }
      } else {
        for (std::size_t r = 0; r < rows; ++r) {
          double* c = acc.data() + r * N;
          for (std::size_t k = 0; k < K; ++k) {
            const double a = A[(i0 + r) * a_row + k * a_col];
            const double* b = B + k * N;
#pragma omp simd
            for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
          }
        }
      }
      for (std::size_t r = 0; r < rows; ++r) {
        double* out = C + (i0 + r) * N;
        const double* c = acc.data() + r * N;
        if (accumulate) {
          for (std::size_t j = 0; j < N; ++j) out[j] += c[j];
        } else {
          std::memcpy(out, c, N * sizeof(double));
        }
      }
    }
  }
}

std::vector<double> transposed(const double* B, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = B[r * cols + c];
  }
  return t;
}

}  // namespace

int thread_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void gemm(bool trans_a, bool trans_b, std::size_t M, std::size_t N, std::size_t K,
          const double* A, const double* B, double* C, bool accumulate) {
  if (M == 0 || N == 0) return;
  if (K == 0) {
    if (!accumulate) std::fill(C, C + M * N, 0.0);
    return;
  }
  std::vector<double> bt;
  if (trans_b) {
    // B is stored [N,K]; the row kernel wants [K,N].
    bt = transposed(B, N, K);
    B = bt.data();
  }
  if (trans_a) {
    gemm_rows(M, N, K, A, 1, M, B, C, accumulate);
  } else {
    gemm_rows(M, N, K, A, K, 1, B, C, accumulate);
  }
}

void softmax(const double* x, double* y, std::size_t outer, std::size_t n, std::size_t inner) {
  const std::size_t lanes = outer * inner;
#pragma omp parallel for schedule(static) if (lanes * n >= kParallelWork)
  for (std::size_t lane = 0; lane < lanes; ++lane) {
    const std::size_t o = lane / inner;
    const std::size_t in = lane % inner;
    const std::size_t base = o * n * inner + in;
    double mx = x[base];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(x[base + j * inner] - mx);
      y[base + j * inner] = e;
      total += e;
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < n; ++j) y[base + j * inner] *= inv;
  }
}

void softmax_backward(const double* y, const double* gy, double* gx, std::size_t outer,
                      std::size_t n, std::size_t inner) {
  const std::size_t lanes = outer * inner;
#pragma omp parallel for schedule(static) if (lanes * n >= kParallelWork)
  for (std::size_t lane = 0; lane < lanes; ++lane) {
    const std::size_t o = lane / inner;
    const std::size_t in = lane % inner;
    const std::size_t base = o * n * inner + in;
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += y[base + j * inner] * gy[base + j * inner];
    for (std::size_t j = 0; j < n; ++j) {
      gx[base + j * inner] = y[base + j * inner] * (gy[base + j * inner] - dot);
    }
  }
}

void layer_norm(const double* x, const double* gamma, const double* beta, double* y,
                double* mean, double* rstd, std::size_t rows, std::size_t n, double eps) {
  const double inv_n = 1.0 / static_cast<double>(n);
#pragma omp parallel for schedule(static) if (rows * n >= kParallelWork)
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu *= inv_n;
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var *= inv_n;
    const double rs = 1.0 / std::sqrt(var + eps);
    double* yr = y + r * n;
#pragma omp simd
    for (std::size_t j = 0; j < n; ++j) yr[j] = gamma[j] * ((xr[j] - mu) * rs) + beta[j];
    mean[r] = mu;
    rstd[r] = rs;
  }
}

void layer_norm_backward(const double* x, const double* gamma, const double* mean,
                         const double* rstd, const double* gy, double* gx, double* ggamma,
                         double* gbeta, std::size_t rows, std::size_t n) {
  const double inv_n = 1.0 / static_cast<double>(n);
  const bool parallel = rows * n >= kParallelWork;
#pragma omp parallel for schedule(static) if (parallel)
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * n;
    const double* gr = gy + r * n;
    const double mu = mean[r];
    const double rs = rstd[r];
    double sum_g = 0.0;
    double sum_gx = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double g = gr[j] * gamma[j];
      sum_g += g;
      sum_gx += g * ((xr[j] - mu) * rs);
    }
    double* out = gx + r * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double xhat = (xr[j] - mu) * rs;
      out[j] = rs * (gr[j] * gamma[j] - sum_g * inv_n - xhat * sum_gx * inv_n);
    }
  }
  // Column reductions stay row-ordered so the result is thread-count independent.
#pragma omp parallel for schedule(static) if (parallel)
  for (std::size_t j = 0; j < n; ++j) {
    double sg = 0.0;
    double sb = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      const double xhat = (x[r * n + j] - mean[r]) * rstd[r];
      sg += gy[r * n + j] * xhat;
      sb += gy[r * n + j];
    }
    ggamma[j] += sg;
    gbeta[j] += sb;
  }
}

void gelu(const double* x, double* y, std::size_t n) {
#pragma omp parallel for simd schedule(static) if (n >= kParallelWork)
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i];
    y[i] = 0.5 * v * (1.0 + std::tanh(kGeluScale * (v + kGeluCubic * v * v * v)));
  }
}

void gelu_backward(const double* x, const double* gy, double* gx, std::size_t n) {
#pragma omp parallel for simd schedule(static) if (n >= kParallelWork)
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i];
    const double t = std::tanh(kGeluScale * (v + kGeluCubic * v * v * v));
    const double du = kGeluScale * (1.0 + 3.0 * kGeluCubic * v * v);
    gx[i] = gy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
  }
}

void reduce_sum(const double* x, double* y, std::size_t outer, std::size_t n, std::size_t inner) {
  if (inner == 1) {
#pragma omp parallel for schedule(static) if (outer * n >= kParallelWork)
    for (std::size_t o = 0; o < outer; ++o) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += x[o * n + j];
      y[o] = s;
    }
    return;
  }
#pragma omp parallel for schedule(static) if (outer * n * inner >= kParallelWork)
  for (std::size_t o = 0; o < outer; ++o) {
    double* out = y + o * inner;
    std::fill(out, out + inner, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      const double* row = x + (o * n + j) * inner;
#pragma omp simd
      for (std::size_t in = 0; in < inner; ++in) out[in] += row[in];
    }
  }
}

}  // namespace ni::kernels
