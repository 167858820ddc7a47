#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "vseg/gemm.hpp"

namespace vseg {

// Cubic 3-d cross-correlation parameters.
struct ConvSpec {
  int kernel = 3;
  int stride = 1;
  int padding = 0;
  int dilation = 1;

  std::size_t out_extent(std::size_t in) const {
    long long span = static_cast<long long>(in) + 2ll * padding -
                     static_cast<long long>(dilation) * (kernel - 1) - 1;
    if (span < 0)
      throw std::invalid_argument("conv3d: non-positive output extent for input " +
                                  std::to_string(in));
    return static_cast<std::size_t>(span / stride) + 1;
  }

  // minimal input extent consistent with a given output extent (transposed form)
  std::size_t transpose_out_extent(std::size_t in) const {
    long long e = static_cast<long long>(in - 1) * stride - 2ll * padding +
                  static_cast<long long>(dilation) * (kernel - 1) + 1;
    if (e < 1)
      throw std::invalid_argument("conv_transpose3d: non-positive output extent for input " +
                                  std::to_string(in));
    return static_cast<std::size_t>(e);
  }
};

namespace detail {

inline std::size_t conv_chunk_cols(std::size_t krows, std::size_t ncols) {
  const std::size_t cap = std::size_t(1) << 22;  // elements per im2col buffer
  std::size_t chunk = std::max<std::size_t>(std::size_t(256), cap / std::max<std::size_t>(krows, 1));
  return std::min(ncols, chunk);
}

// cols[K, n1-n0] with K = Ci*k^3 rows ordered (ci, kz, ky, kx); out-of-bounds
// taps are zero.
template <class T>
void im2col(const T* x, std::size_t ci_count, std::size_t d, std::size_t h, std::size_t w,
            std::size_t ho, std::size_t wo, const ConvSpec& s, std::size_t n0, std::size_t n1,
            T* cols) {
  const int k = s.kernel;
  const std::size_t cols_n = n1 - n0;
  const std::ptrdiff_t krows = static_cast<std::ptrdiff_t>(ci_count) * k * k * k;
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(krows) * cols_n > 32768)
  for (std::ptrdiff_t row = 0; row < krows; ++row) {
    const std::size_t ci = static_cast<std::size_t>(row) / (k * k * k);
    const int rem = static_cast<int>(row % (k * k * k));
    const int kz = rem / (k * k), ky = (rem / k) % k, kx = rem % k;
    const T* xc = x + ci * d * h * w;
    T* out = cols + row * cols_n;
    for (std::size_t n = n0; n < n1; ++n) {
      const std::size_t od = n / (ho * wo);
      const std::size_t oh = (n / wo) % ho;
      const std::size_t ow = n % wo;
      const long long iz = static_cast<long long>(od) * s.stride - s.padding + static_cast<long long>(kz) * s.dilation;
      const long long iy = static_cast<long long>(oh) * s.stride - s.padding + static_cast<long long>(ky) * s.dilation;
      const long long ix = static_cast<long long>(ow) * s.stride - s.padding + static_cast<long long>(kx) * s.dilation;
      T v = T(0);
      if (iz >= 0 && iz < static_cast<long long>(d) && iy >= 0 && iy < static_cast<long long>(h) &&
          ix >= 0 && ix < static_cast<long long>(w))
        v = xc[(static_cast<std::size_t>(iz) * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
      out[n - n0] = v;
    }
  }
}

// Adjoint of im2col: scatter-add columns back into the input grid. Serial by
// design (overlapping taps), fixed accumulation order.
template <class T>
void col2im_add(const T* cols, std::size_t ci_count, std::size_t d, std::size_t h, std::size_t w,
                std::size_t ho, std::size_t wo, const ConvSpec& s, std::size_t n0, std::size_t n1,
                T* x) {
  const int k = s.kernel;
  const std::size_t cols_n = n1 - n0;
  const std::size_t krows = ci_count * k * k * k;
  for (std::size_t row = 0; row < krows; ++row) {
    const std::size_t ci = row / (k * k * k);
    const int rem = static_cast<int>(row % (k * k * k));
    const int kz = rem / (k * k), ky = (rem / k) % k, kx = rem % k;
    T* xc = x + ci * d * h * w;
    const T* in = cols + row * cols_n;
    for (std::size_t n = n0; n < n1; ++n) {
      const std::size_t od = n / (ho * wo);
      const std::size_t oh = (n / wo) % ho;
      const std::size_t ow = n % wo;
      const long long iz = static_cast<long long>(od) * s.stride - s.padding + static_cast<long long>(kz) * s.dilation;
      const long long iy = static_cast<long long>(oh) * s.stride - s.padding + static_cast<long long>(ky) * s.dilation;
      const long long ix = static_cast<long long>(ow) * s.stride - s.padding + static_cast<long long>(kx) * s.dilation;
      if (iz >= 0 && iz < static_cast<long long>(d) && iy >= 0 && iy < static_cast<long long>(h) &&
          ix >= 0 && ix < static_cast<long long>(w))
        xc[(static_cast<std::size_t>(iz) * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += in[n - n0];
    }
  }
}

}  // namespace detail

// Explicit-loop reference kernel. Slow; kept as the oracle the gemm path is
// checked against.
template <class T>
void conv3d_forward_ref(const T* x, std::size_t b_count, std::size_t ci, std::size_t d,
                        std::size_t h, std::size_t w, const T* weight, std::size_t co,
                        const T* bias, const ConvSpec& s, T* y) {
  const std::size_t dd = s.out_extent(d), hh = s.out_extent(h), ww = s.out_extent(w);
  const int k = s.kernel;
  for (std::size_t b = 0; b < b_count; ++b)
    for (std::size_t oc = 0; oc < co; ++oc)
      for (std::size_t od = 0; od < dd; ++od)
        for (std::size_t oh = 0; oh < hh; ++oh)
          for (std::size_t ow = 0; ow < ww; ++ow) {
            T acc = bias ? bias[oc] : T(0);
            for (std::size_t ic = 0; ic < ci; ++ic)
              for (int kz = 0; kz < k; ++kz)
                for (int ky = 0; ky < k; ++ky)
                  for (int kx = 0; kx < k; ++kx) {
                    const long long iz = static_cast<long long>(od) * s.stride - s.padding + static_cast<long long>(kz) * s.dilation;
                    const long long iy = static_cast<long long>(oh) * s.stride - s.padding + static_cast<long long>(ky) * s.dilation;
                    const long long ix = static_cast<long long>(ow) * s.stride - s.padding + static_cast<long long>(kx) * s.dilation;
                    if (iz < 0 || iz >= static_cast<long long>(d) || iy < 0 || iy >= static_cast<long long>(h) ||
                        ix < 0 || ix >= static_cast<long long>(w))
                      continue;
                    acc += x[((b * ci + ic) * d + iz) * h * w + static_cast<std::size_t>(iy) * w + ix] *
                           weight[(((oc * ci + ic) * k + kz) * k + ky) * k + kx];
                  }
            y[((b * co + oc) * dd + od) * hh * ww + oh * ww + ow] = acc;
          }
}

// im2col + gemm path.
template <class T>
void conv3d_forward_gemm(const T* x, std::size_t b_count, std::size_t ci, std::size_t d,
                         std::size_t h, std::size_t w, const T* weight, std::size_t co,
                         const T* bias, const ConvSpec& s, T* y) {
  const std::size_t dd = s.out_extent(d), hh = s.out_extent(h), ww = s.out_extent(w);
  const std::size_t n_total = dd * hh * ww;
  const std::size_t krows = ci * s.kernel * s.kernel * s.kernel;
  const std::size_t chunk = detail::conv_chunk_cols(krows, n_total);
  std::vector<T> cols(krows * chunk);
  std::vector<T> tmp(co * chunk);
  for (std::size_t b = 0; b < b_count; ++b) {
    const T* xb = x + b * ci * d * h * w;
    T* yb = y + b * co * n_total;
    for (std::size_t n0 = 0; n0 < n_total; n0 += chunk) {
      const std::size_t n1 = std::min(n_total, n0 + chunk);
      detail::im2col(xb, ci, d, h, w, hh, ww, s, n0, n1, cols.data());
      gemm_nn(weight, cols.data(), tmp.data(), co, krows, n1 - n0, false);
      for (std::size_t oc = 0; oc < co; ++oc) {
        const T bv = bias ? bias[oc] : T(0);
        const T* src = tmp.data() + oc * (n1 - n0);
        T* dst = yb + oc * n_total + n0;
        for (std::size_t j = 0; j < n1 - n0; ++j) dst[j] = src[j] + bv;
      }
    }
  }
}

// dx += adjoint(spec, weight) applied to dy. Caller zero-fills dx when a
// fresh result is wanted; this is also the transposed-convolution forward.
template <class T>
void conv3d_backward_input_gemm(const T* dy, std::size_t b_count, std::size_t co,
                                const T* weight, std::size_t ci, std::size_t d, std::size_t h,
                                std::size_t w, const ConvSpec& s, T* dx) {
  const std::size_t dd = s.out_extent(d), hh = s.out_extent(h), ww = s.out_extent(w);
  const std::size_t n_total = dd * hh * ww;
  const std::size_t krows = ci * s.kernel * s.kernel * s.kernel;
  const std::size_t chunk = detail::conv_chunk_cols(krows, n_total);
  std::vector<T> dcols(krows * chunk);
  std::vector<T> dyc(co * chunk);
  for (std::size_t b = 0; b < b_count; ++b) {
    const T* dyb = dy + b * co * n_total;
    T* dxb = dx + b * ci * d * h * w;
    for (std::size_t n0 = 0; n0 < n_total; n0 += chunk) {
      const std::size_t n1 = std::min(n_total, n0 + chunk);
      for (std::size_t oc = 0; oc < co; ++oc)
        std::copy(dyb + oc * n_total + n0, dyb + oc * n_total + n1, dyc.data() + oc * (n1 - n0));
      gemm_atb(weight, dyc.data(), dcols.data(), co, krows, n1 - n0, false);
      detail::col2im_add(dcols.data(), ci, d, h, w, hh, ww, s, n0, n1, dxb);
    }
  }
}

// dw += x (*) dy, db += sum(dy). Caller zero-fills for fresh results.
template <class T>
void conv3d_backward_weight_gemm(const T* x, const T* dy, std::size_t b_count, std::size_t ci,
                                 std::size_t d, std::size_t h, std::size_t w, std::size_t co,
                                 const ConvSpec& s, T* dw, T* db) {
  const std::size_t dd = s.out_extent(d), hh = s.out_extent(h), ww = s.out_extent(w);
  const std::size_t n_total = dd * hh * ww;
  const std::size_t krows = ci * s.kernel * s.kernel * s.kernel;
  const std::size_t chunk = detail::conv_chunk_cols(krows, n_total);
  std::vector<T> cols(krows * chunk);
  std::vector<T> dyc(co * chunk);
  for (std::size_t b = 0; b < b_count; ++b) {
    const T* xb = x + b * ci * d * h * w;
    const T* dyb = dy + b * co * n_total;
    for (std::size_t n0 = 0; n0 < n_total; n0 += chunk) {
      const std::size_t n1 = std::min(n_total, n0 + chunk);
      detail::im2col(xb, ci, d, h, w, hh, ww, s, n0, n1, cols.data());
      for (std::size_t oc = 0; oc < co; ++oc)
        std::copy(dyb + oc * n_total + n0, dyb + oc * n_total + n1, dyc.data() + oc * (n1 - n0));
      gemm_abt(dyc.data(), cols.data(), dw, co, n1 - n0, krows, true);
    }
    if (db)
      for (std::size_t oc = 0; oc < co; ++oc) {
        T acc = T(0);
        const T* row = dyb + oc * n_total;
        for (std::size_t n = 0; n < n_total; ++n) acc += row[n];
        db[oc] += acc;
      }
  }
}

}  // namespace vseg
