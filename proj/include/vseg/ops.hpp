#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "vseg/conv3d.hpp"
#include "vseg/rng.hpp"
#include "vseg/tensor.hpp"

// Differentiable primitives. Every op takes the recording tape last; passing
// nullptr runs forward-only. Backward closures accumulate into .grad()
// buffers, so callers zero gradients between steps.
namespace vseg::ops {

template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 const ConvSpec& spec, Tape<T>* tape) {
  if (x.ndim() != 5) throw std::invalid_argument("conv3d: input must be 5-d, got " + shape_str(x.shape()));
  if (w.ndim() != 5) throw std::invalid_argument("conv3d: weight must be 5-d, got " + shape_str(w.shape()));
  const std::size_t k = static_cast<std::size_t>(spec.kernel);
  if (w.dim(2) != k || w.dim(3) != k || w.dim(4) != k)
    throw std::invalid_argument("conv3d: weight " + shape_str(w.shape()) + " does not match kernel " + std::to_string(spec.kernel));
  if (w.dim(1) != x.dim(1))
    throw std::invalid_argument("conv3d: input channels " + std::to_string(x.dim(1)) +
                                " do not match weight " + std::to_string(w.dim(1)));
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != w.dim(0)))
    throw std::invalid_argument("conv3d: bias shape " + shape_str(b.shape()));

  const std::size_t bt = x.dim(0), ci = x.dim(1), d = x.dim(2), h = x.dim(3), wd = x.dim(4);
  const std::size_t co = w.dim(0);
  Tensor<T> y({bt, co, spec.out_extent(d), spec.out_extent(h), spec.out_extent(wd)});
  conv3d_forward_gemm(x.data(), bt, ci, d, h, wd, w.data(), co, b.defined() ? b.data() : nullptr,
                      spec, y.data());
  if (tape) {
    Tensor<T> xc = x, wc = w, bc = b, yc = y;
    tape->record([xc, wc, bc, yc, spec]() mutable {
      if (!yc.has_grad()) return;
      const std::size_t bt = xc.dim(0), ci = xc.dim(1), d = xc.dim(2), h = xc.dim(3), wd = xc.dim(4);
      const T* gy = yc.grad().data();
      conv3d_backward_input_gemm(gy, bt, wc.dim(0), wc.data(), ci, d, h, wd, spec, xc.grad().data());
      conv3d_backward_weight_gemm(xc.data(), gy, bt, ci, d, h, wd, wc.dim(0), spec,
                                  wc.grad().data(), bc.defined() ? bc.grad().data() : nullptr);
    });
  }
  return y;
}

template <class T>
Tensor<T> conv_transpose3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                           int stride, int padding, Tape<T>* tape, int dilation = 1) {
  if (x.ndim() != 5) throw std::invalid_argument("conv_transpose3d: input must be 5-d");
  if (w.ndim() != 5) throw std::invalid_argument("conv_transpose3d: weight must be 5-d");
  if (w.dim(0) != x.dim(1))
    throw std::invalid_argument("conv_transpose3d: input channels " + std::to_string(x.dim(1)) +
                                " do not match weight " + std::to_string(w.dim(0)));
  ConvSpec spec{static_cast<int>(w.dim(2)), stride, padding, dilation};
  const std::size_t bt = x.dim(0), cit = x.dim(1), cot = w.dim(1);
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != cot))
    throw std::invalid_argument("conv_transpose3d: bias shape " + shape_str(b.shape()));
  const std::size_t od = spec.transpose_out_extent(x.dim(2));
  const std::size_t oh = spec.transpose_out_extent(x.dim(3));
  const std::size_t ow = spec.transpose_out_extent(x.dim(4));

  Tensor<T> y({bt, cot, od, oh, ow});
  // forward of the transpose is the adjoint (input-gradient) of conv3d
  conv3d_backward_input_gemm(x.data(), bt, cit, w.data(), cot, od, oh, ow, spec, y.data());
  if (b.defined()) {
    const std::size_t sp = od * oh * ow;
    for (std::size_t bb = 0; bb < bt; ++bb)
      for (std::size_t c = 0; c < cot; ++c) {
        T* row = y.data() + (bb * cot + c) * sp;
        const T bv = b.data()[c];
        for (std::size_t i = 0; i < sp; ++i) row[i] += bv;
      }
  }
  if (tape) {
    Tensor<T> xc = x, wc = w, bc = b, yc = y;
    tape->record([xc, wc, bc, yc, spec]() mutable {
      if (!yc.has_grad()) return;
      const std::size_t bt = xc.dim(0), cit = xc.dim(1), cot = wc.dim(1);
      const std::size_t od = yc.dim(2), oh = yc.dim(3), ow = yc.dim(4);
      const T* gy = yc.grad().data();
      Tensor<T> gx({bt, cit, xc.dim(2), xc.dim(3), xc.dim(4)});
      conv3d_forward_gemm(gy, bt, cot, od, oh, ow, wc.data(), cit, nullptr, spec, gx.data());
      xc.accumulate_grad(gx.values());
      conv3d_backward_weight_gemm(gy, xc.data(), bt, cot, od, oh, ow, cit, spec,
                                  wc.grad().data(), nullptr);
      if (bc.defined()) {
        const std::size_t sp = od * oh * ow;
        T* gb = bc.grad().data();
        for (std::size_t bb = 0; bb < bt; ++bb)
          for (std::size_t c = 0; c < cot; ++c) {
            const T* row = gy + (bb * cot + c) * sp;
            T acc = T(0);
            for (std::size_t i = 0; i < sp; ++i) acc += row[i];
            gb[c] += acc;
          }
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> c({m, n});
  gemm_nn(a.data(), b.data(), c.data(), m, k, n, false);
  if (tape) {
    Tensor<T> ac = a, bc = b, cc = c;
    tape->record([ac, bc, cc]() mutable {
      if (!cc.has_grad()) return;
      const std::size_t m = ac.dim(0), k = ac.dim(1), n = bc.dim(1);
      const T* gc = cc.grad().data();
      gemm_abt(gc, bc.data(), ac.grad().data(), m, n, k, true);
      gemm_atb(ac.data(), gc, bc.grad().data(), m, k, n, true);
    });
  }
  return c;
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& x, Tape<T>* tape) {
  if (x.ndim() != 2) throw std::invalid_argument("transpose2d: need 2-d, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor<T> y({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y.data()[j * m + i] = x.data()[i * n + j];
  if (tape) {
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc]() mutable {
      if (!yc.has_grad()) return;
      const std::size_t m = xc.dim(0), n = xc.dim(1);
      const T* gy = yc.grad().data();
      T* gx = xc.grad().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += gy[j * m + i];
    });
  }
  return y;
}

namespace detail {
inline void axis_split(const Shape& shape, std::size_t axis, std::size_t& outer,
                       std::size_t& len, std::size_t& inner) {
  if (axis >= shape.size()) throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  len = shape[axis];
  inner = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}
}  // namespace detail

// Max-subtracted softmax along one axis; every slice sums to 1.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis, Tape<T>* tape) {
  std::size_t outer, len, inner;
  detail::axis_split(x.shape(), axis, outer, len, inner);
  Tensor<T> y(x.shape());
  const T* xs = x.data();
  T* ys = y.data();
  const std::ptrdiff_t total = static_cast<std::ptrdiff_t>(outer * inner);
#pragma omp parallel for schedule(static) if (total * static_cast<std::ptrdiff_t>(len) > 16384)
  for (std::ptrdiff_t oi = 0; oi < total; ++oi) {
    const std::size_t o = static_cast<std::size_t>(oi) / inner;
    const std::size_t in = static_cast<std::size_t>(oi) % inner;
    const std::size_t base = o * len * inner + in;
    T mx = xs[base];
    for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, xs[base + l * inner]);
    T sum = T(0);
    for (std::size_t l = 0; l < len; ++l) {
      const T e = std::exp(xs[base + l * inner] - mx);
      ys[base + l * inner] = e;
      sum += e;
    }
    const T isum = T(1) / sum;
    for (std::size_t l = 0; l < len; ++l) ys[base + l * inner] *= isum;
  }
  if (tape) {
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc, outer, len, inner]() mutable {
      if (!yc.has_grad()) return;
      const T* ys = yc.data();
      const T* gy = yc.grad().data();
      T* gx = xc.grad().data();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          T dot = T(0);
          for (std::size_t l = 0; l < len; ++l) dot += gy[base + l * inner] * ys[base + l * inner];
          for (std::size_t l = 0; l < len; ++l)
            gx[base + l * inner] += ys[base + l * inner] * (gy[base + l * inner] - dot);
        }
    });
  }
  return y;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x, Tape<T>* tape) {
  Tensor<T> y(x.shape());
  const T* xs = x.data();
  T* ys = y.data();
  for (std::size_t i = 0; i < x.size(); ++i) ys[i] = xs[i] > T(0) ? xs[i] : T(0);
  if (tape) {
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad().data();
      const T* xs = xc.data();
      T* gx = xc.grad().data();
      for (std::size_t i = 0; i < xc.size(); ++i)
        if (xs[i] > T(0)) gx[i] += gy[i];
    });
  }
  return y;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y.data()[i] = a.data()[i] + b.data()[i];
  if (tape) {
    Tensor<T> ac = a, bc = b, yc = y;
    tape->record([ac, bc, yc]() mutable {
      if (!yc.has_grad()) return;
      ac.accumulate_grad(yc.grad());
      bc.accumulate_grad(yc.grad());
    });
  }
  return y;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y.data()[i] = a.data()[i] * b.data()[i];
  if (tape) {
    Tensor<T> ac = a, bc = b, yc = y;
    tape->record([ac, bc, yc]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad().data();
      T* ga = ac.grad().data();
      T* gb = bc.grad().data();
      for (std::size_t i = 0; i < ac.size(); ++i) {
        ga[i] += gy[i] * bc.data()[i];
        gb[i] += gy[i] * ac.data()[i];
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c, Tape<T>* tape) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y.data()[i] = c * x.data()[i];
  if (tape) {
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc, c]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad().data();
      T* gx = xc.grad().data();
      for (std::size_t i = 0; i < xc.size(); ++i) gx[i] += c * gy[i];
    });
  }
  return y;
}

// y = s * x with a learnable 1-element scale (the attention residual gammas).
template <class T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s, Tape<T>* tape) {
  if (s.size() != 1) throw std::invalid_argument("scale_by: scale must have 1 element");
  const T sv = s.data()[0];
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y.data()[i] = sv * x.data()[i];
  if (tape) {
    Tensor<T> xc = x, sc = s, yc = y;
    tape->record([xc, sc, yc]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad().data();
      const T sv = sc.data()[0];
      T* gx = xc.grad().data();
      T acc = T(0);
      for (std::size_t i = 0; i < xc.size(); ++i) {
        gx[i] += sv * gy[i];
        acc += gy[i] * xc.data()[i];
      }
      sc.grad()[0] += acc;
    });
  }
  return y;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis, Tape<T>* tape) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Shape out_shape = parts[0].shape();
  for (std::size_t p = 1; p < parts.size(); ++p) {
    const Shape& s = parts[p].shape();
    if (s.size() != out_shape.size())
      throw std::invalid_argument("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != out_shape[i])
        throw std::invalid_argument("concat: extent mismatch at axis " + std::to_string(i) + ": " +
                                    shape_str(out_shape) + " vs " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  std::size_t outer, len, inner;
  detail::axis_split(out_shape, axis, outer, len, inner);
  Tensor<T> y(out_shape);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t plen = p.dim(axis);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(p.data() + o * plen * inner, p.data() + (o + 1) * plen * inner,
                y.data() + (o * len + offset) * inner);
    offset += plen;
  }
  if (tape) {
    std::vector<Tensor<T>> pc = parts;
    Tensor<T> yc = y;
    tape->record([pc, yc, axis, outer, len, inner]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad().data();
      std::size_t offset = 0;
      for (auto& p : pc) {
        const std::size_t plen = p.dim(axis);
        T* gp = p.grad().data();
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = gy + (o * len + offset) * inner;
          T* dst = gp + o * plen * inner;
          for (std::size_t i = 0; i < plen * inner; ++i) dst[i] += src[i];
        }
        offset += plen;
      }
    });
  }
  return y;
}

// Contiguous sub-range along one axis (used to peel batch items).
template <class T>
Tensor<T> narrow(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length,
                 Tape<T>* tape) {
  std::size_t outer, len, inner;
  detail::axis_split(x.shape(), axis, outer, len, inner);
  if (start + length > len)
    throw std::invalid_argument("narrow: range [" + std::to_string(start) + "," +
                                std::to_string(start + length) + ") exceeds extent " + std::to_string(len));
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Tensor<T> y(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(x.data() + (o * len + start) * inner, x.data() + (o * len + start + length) * inner,
              y.data() + o * length * inner);
  if (tape) {
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc, outer, len, inner, start, length]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad().data();
      T* gx = xc.grad().data();
      for (std::size_t o = 0; o < outer; ++o) {
        const T* src = gy + o * length * inner;
        T* dst = gx + (o * len + start) * inner;
        for (std::size_t i = 0; i < length * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> reduce_sum(const Tensor<T>& x, Tape<T>* tape) {
  T acc = T(0);
  for (std::size_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  Tensor<T> y = Tensor<T>::scalar(acc);
  if (tape) {
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc]() mutable {
      if (!yc.has_grad()) return;
      const T g = yc.grad()[0];
      T* gx = xc.grad().data();
      for (std::size_t i = 0; i < xc.size(); ++i) gx[i] += g;
    });
  }
  return y;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape, Tape<T>* tape) {
  if (numel(new_shape) != x.size())
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " + shape_str(new_shape));
  Tensor<T> y = Tensor<T>::from(std::move(new_shape), x.values());
  if (tape) {
    Tensor<T> xc = x, yc = y;
    tape->record([xc, yc]() mutable {
      if (!yc.has_grad()) return;
      xc.accumulate_grad(yc.grad());
    });
  }
  return y;
}

// Per-channel normalization over all non-channel axes. Training mode uses
// batch statistics (biased variance) and updates the running buffers in
// place: running <- (1-momentum)*running + momentum*batch. Eval mode reads
// the running buffers.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     Tape<T>* tape, T eps = T(1e-5), T momentum = T(0.1)) {
  if (x.ndim() < 2) throw std::invalid_argument("batch_norm: input must have a channel axis");
  const std::size_t bt = x.dim(0), c = x.dim(1);
  if (gamma.size() != c || beta.size() != c || running_mean.size() != c || running_var.size() != c)
    throw std::invalid_argument("batch_norm: parameter size does not match " + std::to_string(c) + " channels");
  std::size_t sp = 1;
  for (std::size_t i = 2; i < x.ndim(); ++i) sp *= x.dim(i);
  const std::size_t n = bt * sp;

  Tensor<T> y(x.shape());
  Tensor<T> xhat(x.shape());  // saved for backward
  std::vector<T> inv_std(c);

  const T* xs = x.data();
  T* ys = y.data();
  T* xh = xhat.data();
  const std::ptrdiff_t cc = static_cast<std::ptrdiff_t>(c);
#pragma omp parallel for schedule(static) if (n * c > 16384)
  for (std::ptrdiff_t ch = 0; ch < cc; ++ch) {
    T mean, var;
    if (training) {
      T sum = T(0);
      for (std::size_t b = 0; b < bt; ++b) {
        const T* row = xs + (b * c + ch) * sp;
        for (std::size_t i = 0; i < sp; ++i) sum += row[i];
      }
      mean = sum / static_cast<T>(n);
      T sq = T(0);
      for (std::size_t b = 0; b < bt; ++b) {
        const T* row = xs + (b * c + ch) * sp;
        for (std::size_t i = 0; i < sp; ++i) {
          const T dv = row[i] - mean;
          sq += dv * dv;
        }
      }
      var = sq / static_cast<T>(n);
      running_mean.data()[ch] = (T(1) - momentum) * running_mean.data()[ch] + momentum * mean;
      running_var.data()[ch] = (T(1) - momentum) * running_var.data()[ch] + momentum * var;
    } else {
      mean = running_mean.data()[ch];
      var = running_var.data()[ch];
    }
    const T istd = T(1) / std::sqrt(var + eps);
    inv_std[ch] = istd;
    const T g = gamma.data()[ch], bta = beta.data()[ch];
    for (std::size_t b = 0; b < bt; ++b) {
      const T* row = xs + (b * c + ch) * sp;
      T* xrow = xh + (b * c + ch) * sp;
      T* yrow = ys + (b * c + ch) * sp;
      for (std::size_t i = 0; i < sp; ++i) {
        const T v = (row[i] - mean) * istd;
        xrow[i] = v;
        yrow[i] = g * v + bta;
      }
    }
  }

  if (tape) {
    Tensor<T> xc = x, gc = gamma, bc = beta, yc = y, xhc = xhat;
    tape->record([xc, gc, bc, yc, xhc, inv_std, bt, c, sp, n, training]() mutable {
      if (!yc.has_grad()) return;
      const T* gy = yc.grad().data();
      const T* xh = xhc.data();
      T* gx = xc.grad().data();
      T* gg = gc.grad().data();
      T* gb = bc.grad().data();
      for (std::size_t ch = 0; ch < c; ++ch) {
        T sum_gy = T(0), sum_gy_xh = T(0);
        for (std::size_t b = 0; b < bt; ++b) {
          const std::size_t base = (b * c + ch) * sp;
          for (std::size_t i = 0; i < sp; ++i) {
            sum_gy += gy[base + i];
            sum_gy_xh += gy[base + i] * xh[base + i];
          }
        }
        gg[ch] += sum_gy_xh;
        gb[ch] += sum_gy;
        const T g = gc.data()[ch];
        const T istd = inv_std[ch];
        if (training) {
          const T inv_n = T(1) / static_cast<T>(n);
          for (std::size_t b = 0; b < bt; ++b) {
            const std::size_t base = (b * c + ch) * sp;
            for (std::size_t i = 0; i < sp; ++i)
              gx[base + i] += g * istd * (gy[base + i] - sum_gy * inv_n - xh[base + i] * sum_gy_xh * inv_n);
          }
        } else {
          for (std::size_t b = 0; b < bt; ++b) {
            const std::size_t base = (b * c + ch) * sp;
            for (std::size_t i = 0; i < sp; ++i) gx[base + i] += g * istd * gy[base + i];
          }
        }
      }
    });
  }
  return y;
}

// Mean over all voxels of -log softmax(logits) at the target class.
// logits [B,K,...], targets flat length B * prod(spatial).
template <class T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, const std::vector<std::int32_t>& targets,
                             Tape<T>* tape) {
  if (logits.ndim() < 2) throw std::invalid_argument("cross_entropy_loss: logits must be [B,K,...]");
  const std::size_t bt = logits.dim(0), k = logits.dim(1);
  std::size_t sp = 1;
  for (std::size_t i = 2; i < logits.ndim(); ++i) sp *= logits.dim(i);
  const std::size_t nvox = bt * sp;
  if (targets.size() != nvox)
    throw std::invalid_argument("cross_entropy_loss: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(nvox) + " voxels");

  Tensor<T> probs(logits.shape());
  const T* zs = logits.data();
  T* ps = probs.data();
  T loss = T(0);
  for (std::size_t b = 0; b < bt; ++b)
    for (std::size_t i = 0; i < sp; ++i) {
      const std::int32_t t = targets[b * sp + i];
      if (t < 0 || static_cast<std::size_t>(t) >= k)
        throw std::out_of_range("cross_entropy_loss: target " + std::to_string(t) +
                                " out of range [0," + std::to_string(k) + ")");
      const std::size_t base = (b * k) * sp + i;
      T mx = zs[base];
      for (std::size_t cl = 1; cl < k; ++cl) mx = std::max(mx, zs[base + cl * sp]);
      T sum = T(0);
      for (std::size_t cl = 0; cl < k; ++cl) {
        const T e = std::exp(zs[base + cl * sp] - mx);
        ps[base + cl * sp] = e;
        sum += e;
      }
      const T isum = T(1) / sum;
      for (std::size_t cl = 0; cl < k; ++cl) ps[base + cl * sp] *= isum;
      loss += std::log(sum) + mx - zs[base + static_cast<std::size_t>(t) * sp];
    }
  loss /= static_cast<T>(nvox);
  Tensor<T> out = Tensor<T>::scalar(loss);
  if (tape) {
    Tensor<T> lc = logits, oc = out, pc = probs;
    std::vector<std::int32_t> tc = targets;
    tape->record([lc, oc, pc, tc, bt, k, sp, nvox]() mutable {
      if (!oc.has_grad()) return;
      const T g0 = oc.grad()[0] / static_cast<T>(nvox);
      const T* ps = pc.data();
      T* gl = lc.grad().data();
      for (std::size_t b = 0; b < bt; ++b)
        for (std::size_t i = 0; i < sp; ++i) {
          const std::size_t base = (b * k) * sp + i;
          const std::size_t t = static_cast<std::size_t>(tc[b * sp + i]);
          for (std::size_t cl = 0; cl < k; ++cl)
            gl[base + cl * sp] += g0 * (ps[base + cl * sp] - (cl == t ? T(1) : T(0)));
        }
    });
  }
  return out;
}

// Central-difference check of d(f)/d(x) with h = 1e-4 by default.
// Relative error per coordinate: |a - n| / max(1, |a|, |n|). When
// max_coords > 0 a deterministic random subset of coordinates is probed.
template <class T, class Fn>
T grad_check(Fn&& f, Tensor<T> x, T h = T(1e-4), std::size_t max_coords = 0,
             std::uint64_t seed = 0) {
  x.zero_grad();
  Tape<T> tape;
  Tensor<T> loss = f(x, &tape);
  tape.backward(loss);
  std::vector<T> analytic = x.grad();

  std::vector<std::size_t> coords;
  if (max_coords == 0 || max_coords >= x.size()) {
    coords.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) coords[i] = i;
  } else {
    Rng rng(seed ^ 0x5eedc0de);
    std::vector<std::size_t> all(x.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    for (std::size_t i = 0; i < max_coords; ++i) {
      const std::size_t j = i + rng.uniform_index(all.size() - i);
      std::swap(all[i], all[j]);
    }
    coords.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(max_coords));
  }

  T max_err = T(0);
  for (std::size_t i : coords) {
    const T orig = x.data()[i];
    x.data()[i] = orig + h;
    const T lp = f(x, nullptr).item();
    x.data()[i] = orig - h;
    const T lm = f(x, nullptr).item();
    x.data()[i] = orig;
    const T numeric = (lp - lm) / (T(2) * h);
    const T a = analytic[i];
    const T err = std::abs(a - numeric) / std::max({T(1), std::abs(a), std::abs(numeric)});
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace vseg::ops
