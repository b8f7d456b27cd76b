#include <vector>

#include "kernels_common.hpp"

namespace mimmx::kernels::serial {

void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
               std::size_t k, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) detail::matmul_nt_row(a + i * k, b, c + i * n, n, k, accumulate);
}

void matmul_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
               std::size_t k, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) detail::matmul_nn_row(a + i * k, b, c + i * n, n, k, accumulate);
}

void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
               std::size_t k, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) detail::matmul_tn_row(a, b, c + i * n, i, m, n, k, accumulate);
}

void conv2d_forward(const ConvGeometry& g, const double* x, const double* w, const double* bias,
                    double* y) {
  const std::size_t in_size = g.in_channels * g.in_h * g.in_w;
  const std::size_t out_size = g.out_channels * g.out_h() * g.out_w();
  std::vector<double> cols(g.patch() * g.out_h() * g.out_w());
  for (std::size_t n = 0; n < g.batch; ++n) {
    detail::conv_forward_sample(g, x + n * in_size, w, bias, y + n * out_size, cols.data());
  }
}

void conv2d_backward(const ConvGeometry& g, const double* x, const double* w, const double* gy,
                     double* gx, double* gw, double* gbias) {
  const std::size_t in_size = g.in_channels * g.in_h * g.in_w;
  const std::size_t plane = g.out_h() * g.out_w();
  const std::size_t out_size = g.out_channels * plane;
  const std::size_t wsize = g.out_channels * g.patch();
  std::vector<double> cols(g.patch() * plane), gcols(g.patch() * plane), gw_sample(wsize);
  for (std::size_t n = 0; n < g.batch; ++n) {
    const double* gyn = gy + n * out_size;
    detail::conv_backward_sample(g, x + n * in_size, w, gyn,
                                 gx != nullptr ? gx + n * in_size : nullptr, gw_sample.data(),
                                 cols.data(), gcols.data());
    for (std::size_t i = 0; i < wsize; ++i) gw[i] += gw_sample[i];
    for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
      double s = 0.0;
      for (std::size_t p = 0; p < plane; ++p) s += gyn[oc * plane + p];
      gbias[oc] += s;
    }
  }
}

void pairwise_distances(const double* x, std::size_t n, std::size_t dim, double* out) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = i == j ? 0.0 : detail::row_distance(x + i * dim, x + j * dim, dim);
    }
  }
}

}  // namespace mimmx::kernels::serial
