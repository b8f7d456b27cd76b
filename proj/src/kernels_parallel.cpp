#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "kernels_common.hpp"

namespace mimmx::kernels {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace parallel {

void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
               std::size_t k, bool accumulate) {
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
  for (std::size_t i = 0; i < m; ++i) detail::matmul_nt_row(a + i * k, b, c + i * n, n, k, accumulate);
}

void matmul_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
               std::size_t k, bool accumulate) {
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
  for (std::size_t i = 0; i < m; ++i) detail::matmul_nn_row(a + i * k, b, c + i * n, n, k, accumulate);
}

void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
               std::size_t k, bool accumulate) {
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
  for (std::size_t i = 0; i < m; ++i) detail::matmul_tn_row(a, b, c + i * n, i, m, n, k, accumulate);
}

void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, const double* bias,
                    double* y) {
  const std::size_t in_size = g.in_channels * g.in_h * g.in_w;
  const std::size_t out_size = g.out_channels * g.out_h() * g.out_w();
  const std::size_t cols_size = g.patch() * g.out_h() * g.out_w();
#pragma omp parallel
  {
    std::vector<double> cols(cols_size);
#pragma omp for schedule(static)
    for (std::size_t n = 0; n < g.batch; ++n) {
      detail::conv_forward_sample(g, x + n * in_size, w, bias, y + n * out_size, cols.data());
    }
  }
}

void conv2d_backward(const ConvGeometry& g, const double* x, const double* w, const double* gy,
                     double* gx, double* gw, double* gbias) {
  const std::size_t in_size = g.in_channels * g.in_h * g.in_w;
  const std::size_t plane = g.out_h() * g.out_w();
  const std::size_t out_size = g.out_channels * plane;
  const std::size_t wsize = g.out_channels * g.patch();
  // Per-sample weight gradients, reduced afterwards in sample order so the
  // result does not depend on the thread count.
  std::vector<double> gw_samples(g.batch * wsize);
#pragma omp parallel
  {
    std::vector<double> cols(g.patch() * plane), gcols(g.patch() * plane);
#pragma omp for schedule(static)
    for (std::size_t n = 0; n < g.batch; ++n) {
      detail::conv_backward_sample(g, x + n * in_size, w, gy + n * out_size,
                                   gx != nullptr ? gx + n * in_size : nullptr,
                                   gw_samples.data() + n * wsize, cols.data(), gcols.data());
    }
  }
#pragma omp parallel for schedule(static) if (wsize * g.batch > 65536)
  for (std::size_t i = 0; i < wsize; ++i) {
    double acc = gw[i];
    for (std::size_t n = 0; n < g.batch; ++n) acc += gw_samples[n * wsize + i];
    gw[i] = acc;
  }
  for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
    double acc = gbias[oc];
    for (std::size_t n = 0; n < g.batch; ++n) {
      const double* gyn = gy + n * out_size + oc * plane;
      double s = 0.0;
      for (std::size_t p = 0; p < plane; ++p) s += gyn[p];
      acc += s;
    }
    gbias[oc] = acc;
  }
}

void pairwise_distances(const double* x, std::size_t n, std::size_t dim, double* out) {
#pragma omp parallel for schedule(static) if (n * n * dim > 32768)
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = i == j ? 0.0 : detail::row_distance(x + i * dim, x + j * dim, dim);
    }
  }
}

}  // namespace parallel
}  // namespace mimmx::kernels
