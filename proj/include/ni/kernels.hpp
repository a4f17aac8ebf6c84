#pragma once

// Dense numeric kernels on row-major double buffers.
//
// Two implementations share these signatures: ni::kernels (OpenMP-parallel,
// blocked) and ni::kernels::reference (plain serial loops). The autodiff ops
// call the parallel versions; the reference versions exist so the tests and
// the benchmark can compare against them.
//
// Every output element is reduced in a fixed order that does not depend on
// the thread count, so results are deterministic for a given build.

#include <cstddef>

namespace ni::kernels {

// C[M,N] = op(A) * op(B)  (or += when accumulate is set).
// op(A) is A[M,K] or, with trans_a, the transpose of A[K,M]; likewise B.
void gemm(bool trans_a, bool trans_b, std::size_t M, std::size_t N, std::size_t K,
          const double* A, const double* B, double* C, bool accumulate);

// Softmax along an axis of length n; the array is viewed as [outer, n, inner].
void softmax(const double* x, double* y, std::size_t outer, std::size_t n, std::size_t inner);
void softmax_backward(const double* y, const double* gy, double* gx, std::size_t outer,
                      std::size_t n, std::size_t inner);

// Row-wise layer normalization over contiguous rows of length n with biased
// variance. mean/rstd receive one value per row for the backward pass.
void layer_norm(const double* x, const double* gamma, const double* beta, double* y,
                double* mean, double* rstd, std::size_t rows, std::size_t n, double eps);
// gx is overwritten; ggamma/gbeta are accumulated into.
void layer_norm_backward(const double* x, const double* gamma, const double* mean,
                         const double* rstd, const double* gy, double* gx, double* ggamma,
                         double* gbeta, std::size_t rows, std::size_t n);

// Tanh-approximated GELU.
void gelu(const double* x, double* y, std::size_t n);
void gelu_backward(const double* x, const double* gy, double* gx, std::size_t n);

// Sum over the middle axis of [outer, n, inner] into [outer, inner].
void reduce_sum(const double* x, double* y, std::size_t outer, std::size_t n, std::size_t inner);

namespace reference {

void gemm(bool trans_a, bool trans_b, std::size_t M, std::size_t N, std::size_t K,
          const double* A, const double* B, double* C, bool accumulate);
void softmax(const double* x, double* y, std::size_t outer, std::size_t n, std::size_t inner);
void softmax_backward(const double* y, const double* gy, double* gx, std::size_t outer,
                      std::size_t n, std::size_t inner);
void layer_norm(const double* x, const double* gamma, const double* beta, double* y,
                double* mean, double* rstd, std::size_t rows, std::size_t n, double eps);
void layer_norm_backward(const double* x, const double* gamma, const double* mean,
                         const double* rstd, const double* gy, double* gx, double* ggamma,
                         double* gbeta, std::size_t rows, std::size_t n);
void gelu(const double* x, double* y, std::size_t n);
void gelu_backward(const double* x, const double* gy, double* gx, std::size_t n);
void reduce_sum(const double* x, double* y, std::size_t outer, std::size_t n, std::size_t inner);

}  // namespace reference

// Number of threads an OpenMP parallel region would use (1 without OpenMP).
int thread_count();

}  // namespace ni::kernels
