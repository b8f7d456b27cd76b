#pragma once

#include <cstddef>

// Dense numeric kernels used by the network and dependence code.
//
// Every kernel exists twice: `serial::` is the straightforward reference
// and `parallel::` splits the outer loop across OpenMP threads. Both
// variants fix the per-element summation order, so they agree bit-for-bit
// at any thread count. The unqualified functions in `kernels::` forward to
// the parallel variants.

namespace mimmx::kernels {

struct ConvGeometry {
  std::size_t batch = 0;
  std::size_t in_channels = 0;
  std::size_t in_h = 0;
  std::size_t in_w = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  std::size_t out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
  std::size_t patch() const { return in_channels * kernel * kernel; }
};

#define MIMMX_KERNEL_DECLS                                                                  \
  /* c[m x n] (+)= a[m x k] * b[n x k]^T */                                               \
  void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, \
                 std::size_t k, bool accumulate);                                           \
  /* c[m x n] (+)= a[m x k] * b[k x n] */                                                 \
  void matmul_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t n, \
                 std::size_t k, bool accumulate);                                           \
  /* c[m x n] (+)= a[k x m]^T * b[k x n] */                                               \
  void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t n, \
                 std::size_t k, bool accumulate);                                           \
  /* y[batch, out_c, out_h, out_w] = conv(x, w) + bias */                                   \
  void conv2d_forward(const ConvGeometry& g, const double* x, const double* w,              \
                      const double* bias, double* y);                                       \
  /* gx is overwritten; gw and gbias are accumulated. gx may be null. */                    \
  void conv2d_backward(const ConvGeometry& g, const double* x, const double* w,             \
                       const double* gy, double* gx, double* gw, double* gbias);            \
  /* out[n x n] Euclidean distances between the rows of x[n x dim] */                       \
  void pairwise_distances(const double* x, std::size_t n, std::size_t dim, double* out);

namespace serial {
MIMMX_KERNEL_DECLS
}  // namespace serial

namespace parallel {
MIMMX_KERNEL_DECLS
}  // namespace parallel

#undef MIMMX_KERNEL_DECLS

using parallel::conv2d_backward;
using parallel::conv2d_forward;
using parallel::matmul_nn;
using parallel::matmul_nt;
using parallel::matmul_tn;
using parallel::pairwise_distances;

/// Threads the parallel kernels will use (1 when built without OpenMP).
int max_threads();

}  // namespace mimmx::kernels
