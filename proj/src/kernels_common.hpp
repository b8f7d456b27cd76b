#pragma once

#include <cmath>
#include <cstddef>

#include "mimmx/kernels.hpp"

// Per-element building blocks shared by the serial and parallel kernels.
// Keeping them in one place is what makes the two variants bit-identical.

namespace mimmx::kernels::detail {

// Dot product with four fixed-order partial sums.
inline double dot(const double* a, const double* b, std::size_t k) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= k; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < k; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

inline void matmul_nt_row(const double* a_row, const double* b, double* c_row, std::size_t n,
                          std::size_t k, bool accumulate) {
  for (std::size_t j = 0; j < n; ++j) {
    const double v = dot(a_row, b + j * k, k);
    c_row[j] = accumulate ? c_row[j] + v : v;
  }
}

inline void matmul_nn_row(const double* a_row, const double* b, double* c_row, std::size_t n,
                          std::size_t k, bool accumulate) {
  if (!accumulate) {
    for (std::size_t j = 0; j < n; ++j) c_row[j] = 0.0;
  }
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a_row[p];
    const double* b_row = b + p * n;
    for (std::size_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
  }
}

inline void matmul_tn_row(const double* a, const double* b, double* c_row, std::size_t i,
                          std::size_t m, std::size_t n, std::size_t k, bool accumulate) {
  if (!accumulate) {
    for (std::size_t j = 0; j < n; ++j) c_row[j] = 0.0;
  }
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a[p * m + i];
    const double* b_row = b + p * n;
    for (std::size_t j = 0; j < n; ++j) c_row[j] += av * b_row[j];
  }
}

// cols[patch x (out_h*out_w)] for one sample.
inline void im2col(const ConvGeometry& g, const double* x, double* cols) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), k = g.kernel;
  const std::size_t plane = oh * ow;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const double* xc = x + c * g.in_h * g.in_w;
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        double* dst = cols + ((c * k + kh) * k + kw) * plane;
        for (std::size_t r = 0; r < oh; ++r) {
          const long ir = static_cast<long>(r * g.stride + kh) - static_cast<long>(g.pad);
          for (std::size_t q = 0; q < ow; ++q) {
            const long ic = static_cast<long>(q * g.stride + kw) - static_cast<long>(g.pad);
            const bool inside = ir >= 0 && ic >= 0 && ir < static_cast<long>(g.in_h) &&
                                ic < static_cast<long>(g.in_w);
            dst[r * ow + q] = inside ? xc[static_cast<std::size_t>(ir) * g.in_w +
                                          static_cast<std::size_t>(ic)]
                                     : 0.0;
          }
        }
      }
    }
  }
}

// gx (one sample, overwritten) from gcols.
inline void col2im(const ConvGeometry& g, const double* cols, double* gx) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), k = g.kernel;
  const std::size_t plane = oh * ow;
  for (std::size_t i = 0; i < g.in_channels * g.in_h * g.in_w; ++i) gx[i] = 0.0;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    double* gxc = gx + c * g.in_h * g.in_w;
    for (std::size_t kh = 0; kh < k; ++kh) {
      for (std::size_t kw = 0; kw < k; ++kw) {
        const double* src = cols + ((c * k + kh) * k + kw) * plane;
        for (std::size_t r = 0; r < oh; ++r) {
          const long ir = static_cast<long>(r * g.stride + kh) - static_cast<long>(g.pad);
          if (ir < 0 || ir >= static_cast<long>(g.in_h)) continue;
          for (std::size_t q = 0; q < ow; ++q) {
            const long ic = static_cast<long>(q * g.stride + kw) - static_cast<long>(g.pad);
            if (ic < 0 || ic >= static_cast<long>(g.in_w)) continue;
            gxc[static_cast<std::size_t>(ir) * g.in_w + static_cast<std::size_t>(ic)] +=
                src[r * ow + q];
          }
        }
      }
    }
  }
}

inline void conv_forward_sample(const ConvGeometry& g, const double* x, const double* w,
                                const double* bias, double* y, double* cols) {
  const std::size_t plane = g.out_h() * g.out_w();
  im2col(g, x, cols);
  for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
    double* yo = y + oc * plane;
    const double b = bias != nullptr ? bias[oc] : 0.0;
    for (std::size_t p = 0; p < plane; ++p) yo[p] = b;
    matmul_nn_row(w + oc * g.patch(), cols, yo, plane, g.patch(), true);
  }
}

// Weight gradient of one sample into gw_sample (overwritten), input gradient
// into gx_sample (overwritten, optional). `cols` and `gcols` are scratch.
inline void conv_backward_sample(const ConvGeometry& g, const double* x, const double* w,
                                 const double* gy, double* gx, double* gw_sample,
                                 double* cols, double* gcols) {
  const std::size_t plane = g.out_h() * g.out_w();
  const std::size_t patch = g.patch();
  im2col(g, x, cols);
  for (std::size_t oc = 0; oc < g.out_channels; ++oc) {
    matmul_nt_row(gy + oc * plane, cols, gw_sample + oc * patch, patch, plane, false);
  }
  if (gx != nullptr) {
    for (std::size_t q = 0; q < patch; ++q) {
      matmul_tn_row(w, gy, gcols + q * plane, q, patch, plane, g.out_channels, false);
    }
    col2im(g, gcols, gx);
  }
}

inline double row_distance(const double* a, const double* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t d = 0; d < dim; ++d) {
    const double t = a[d] - b[d];
    s += t * t;
  }
  return std::sqrt(s);
}

}  // namespace mimmx::kernels::detail
