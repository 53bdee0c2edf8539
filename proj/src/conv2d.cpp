/*******************************************************************************
 * Copyright 2026 The roteqnet authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 ******************************************************************************/
#include "roteqnet/conv2d.hpp"

#include <algorithm>
#include <stdexcept>

#if defined(__AVX512F__)
#include <immintrin.h>
#define ROTEQNET_HAVE_AVX512 1
#endif

namespace roteqnet {

int conv_output_extent(int in_extent, int m, int pad, int stride) {
  if (stride <= 0) throw std::invalid_argument("conv2d: non-positive stride");
  if (pad < 0) throw std::invalid_argument("conv2d: negative padding");
  if (m > 64) throw std::invalid_argument("conv2d: filter size above 64");
  const int span = in_extent + 2 * pad - m;
  if (span < 0)
    throw std::invalid_argument("conv2d: filter larger than padded input");
  return span / stride + 1;
}

namespace kernels {

namespace {

#ifdef ROTEQNET_HAVE_AVX512

// Dot product and update primitives with masked tails: no scalar remainder
// loop, two independent accumulator chains. The float path carries almost
// all of the training compute; double runs the generic code below.
inline float dot_span(const float* a, const float* b, int n) {
  __m512 acc0 = _mm512_setzero_ps();
  __m512 acc1 = _mm512_setzero_ps();
  int t = 0;
  for (; t + 32 <= n; t += 32) {
    acc0 = _mm512_fmadd_ps(_mm512_loadu_ps(a + t), _mm512_loadu_ps(b + t), acc0);
    acc1 = _mm512_fmadd_ps(_mm512_loadu_ps(a + t + 16),
                           _mm512_loadu_ps(b + t + 16), acc1);
  }
  if (t + 16 <= n) {
    acc0 = _mm512_fmadd_ps(_mm512_loadu_ps(a + t), _mm512_loadu_ps(b + t), acc0);
    t += 16;
  }
  if (t < n) {
    const __mmask16 mask = static_cast<__mmask16>((1u << (n - t)) - 1u);
    acc1 = _mm512_fmadd_ps(_mm512_maskz_loadu_ps(mask, a + t),
                           _mm512_maskz_loadu_ps(mask, b + t), acc1);
  }
  return _mm512_reduce_add_ps(_mm512_add_ps(acc0, acc1));
}

// dst[0..n) += g * src[0..n)
inline void axpy_span(float* dst, const float* src, float g, int n) {
  const __m512 gv = _mm512_set1_ps(g);
  int t = 0;
  for (; t + 16 <= n; t += 16)
    _mm512_storeu_ps(dst + t,
                     _mm512_fmadd_ps(gv, _mm512_loadu_ps(src + t),
                                     _mm512_loadu_ps(dst + t)));
  if (t < n) {
    const __mmask16 mask = static_cast<__mmask16>((1u << (n - t)) - 1u);
    _mm512_mask_storeu_ps(
        dst + t, mask,
        _mm512_fmadd_ps(gv, _mm512_maskz_loadu_ps(mask, src + t),
                        _mm512_maskz_loadu_ps(mask, dst + t)));
  }
}

#endif  // ROTEQNET_HAVE_AVX512

template <typename T>
inline T dot_span(const T* a, const T* b, int n) {
  T s = 0;
#pragma omp simd reduction(+ : s)
  for (int t = 0; t < n; ++t) s += a[t] * b[t];
  return s;
}

template <typename T>
inline void axpy_span(T* dst, const T* src, T g, int n) {
#pragma omp simd
  for (int t = 0; t < n; ++t) dst[t] += g * src[t];
}

constexpr int kRowBufMax = 1024;

// Single-channel path: accumulate shifted-row updates into a contiguous row
// buffer so the vector unit runs along the output columns instead of the
// (short) filter row. All-zero taps (the circular mask corners) skip.
template <typename T>
void conv_forward_1ch(const T* in, int H, int W, const T* w, int m, int pad,
                      T* out, int outH, int outW, std::size_t out_stride,
                      bool accumulate, bool parallel) {
  auto row_job = [&](int i) {
    T buf[kRowBufMax];
    for (int j = 0; j < outW; ++j) buf[j] = 0;
    const int i0 = i - pad;
    const int a0 = std::max(0, -i0);
    const int a1 = std::min(m, H - i0);
    for (int a = a0; a < a1; ++a) {
      const T* inrow = in + static_cast<std::size_t>(i0 + a) * W;
      for (int b = 0; b < m; ++b) {
        const T w_ab = w[static_cast<std::size_t>(a) * m + b];
        if (w_ab == T(0)) continue;
        const int jb = b - pad;
        const int lo = std::max(0, -jb);
        const int hi = std::min(outW, W - jb);
        axpy_span(buf + lo, inrow + jb + lo, w_ab, hi - lo);
      }
    }
    for (int j = 0; j < outW; ++j) {
      T* dst = out + (static_cast<std::size_t>(i) * outW + j) * out_stride;
      *dst = accumulate ? *dst + buf[j] : buf[j];
    }
  };
  // Entering an OpenMP construct from inside an active parallel region
  // takes the runtime's team lock even when the if-clause is false, so the
  // serial path must bypass the construct entirely.
  if (parallel && outH > 1) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < outH; ++i) row_job(i);
  } else {
    for (int i = 0; i < outH; ++i) row_job(i);
  }
}

// Per filter row, bounds of the taps that are nonzero in some channel (the
// circular support mask zeroes the corners); the span between them is
// contiguous in memory.
template <typename T>
void trim_filter_rows(const T* w, int m, int C, int* bl, int* bh) {
  for (int a = 0; a < m; ++a) {
    int lo = 0, hi = m;
    auto col_zero = [&](int b) {
      const T* wp = w + (static_cast<std::size_t>(a) * m + b) * C;
      for (int k = 0; k < C; ++k)
        if (wp[k] != T(0)) return false;
      return true;
    };
    while (lo < hi && col_zero(lo)) ++lo;
    while (hi > lo && col_zero(hi - 1)) --hi;
    bl[a] = lo;
    bh[a] = hi;
  }
}

}  // namespace

template <typename T>
void conv_forward(const T* in, int H, int W, int C, const T* w, int m, int pad,
                  int stride, T* out, int outH, int outW,
                  std::size_t out_stride, bool accumulate, bool parallel) {
  if (C == 1 && stride == 1 && outW <= kRowBufMax) {
    conv_forward_1ch(in, H, W, w, m, pad, out, outH, outW, out_stride,
                     accumulate, parallel);
    return;
  }
  int bl[64], bh[64];
  trim_filter_rows(w, m, C, bl, bh);
  auto row_job = [&](int i) {
    const int i0 = i * stride - pad;
    const int a0 = std::max(0, -i0);
    const int a1 = std::min(m, H - i0);
    for (int j = 0; j < outW; ++j) {
      const int j0 = j * stride - pad;
      T acc = 0;
      for (int a = a0; a < a1; ++a) {
        const int b0 = std::max(bl[a], -j0);
        const int b1 = std::min(bh[a], W - j0);
        if (b0 >= b1) continue;
        acc += dot_span(
            in + ((static_cast<std::size_t>(i0 + a) * W) + (j0 + b0)) * C,
            w + (static_cast<std::size_t>(a) * m + b0) * C, (b1 - b0) * C);
      }
      T* dst = out + (static_cast<std::size_t>(i) * outW + j) * out_stride;
      *dst = accumulate ? *dst + acc : acc;
    }
  };
  if (parallel && outH > 1) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < outH; ++i) row_job(i);
  } else {
    for (int i = 0; i < outH; ++i) row_job(i);
  }
}

template <typename T>
void conv_backward_input(const T* grad_out, int outH, int outW,
                         std::size_t grad_stride, const T* w, int m, int pad,
                         int stride, T* gin, int H, int W, int C,
                         bool parallel) {
  if (stride == 1 && grad_stride == 1 && !parallel) {
    // Scatter form over the (sparse) gradient pixels: the bulk of the work
    // is skipped entirely where orientation pooling routed no gradient.
    // Serial, so the accumulation order is fixed.
    for (int i = 0; i < outH; ++i) {
      const T* grow = grad_out + static_cast<std::size_t>(i) * outW;
      for (int j = 0; j < outW; ++j) {
        const T g = grow[j];
        if (g == T(0)) continue;
        const int i0 = i - pad;
        const int j0 = j - pad;
        const int a0 = std::max(0, -i0);
        const int a1 = std::min(m, H - i0);
        const int b0 = std::max(0, -j0);
        const int b1 = std::min(m, W - j0);
        for (int a = a0; a < a1; ++a)
          axpy_span(gin + (static_cast<std::size_t>(i0 + a) * W + (j0 + b0)) * C,
                    w + (static_cast<std::size_t>(a) * m + b0) * C, g,
                    (b1 - b0) * C);
      }
    }
    return;
  }
  if (stride == 1) {
    // Gather form: each input row is owned by one iteration, so the loop is
    // safely parallel and the summation order is fixed.
    auto row_job = [&](int y) {
      for (int x = 0; x < W; ++x) {
        T* dst = gin + (static_cast<std::size_t>(y) * W + x) * C;
        for (int a = 0; a < m; ++a) {
          const int i = y + pad - a;
          if (i < 0 || i >= outH) continue;
          for (int b = 0; b < m; ++b) {
            const int j = x + pad - b;
            if (j < 0 || j >= outW) continue;
            const T g =
                grad_out[(static_cast<std::size_t>(i) * outW + j) * grad_stride];
            if (g == T(0)) continue;
            axpy_span(dst, w + (static_cast<std::size_t>(a) * m + b) * C, g, C);
          }
        }
      }
    };
    if (parallel && H > 1) {
#pragma omp parallel for schedule(static)
      for (int y = 0; y < H; ++y) row_job(y);
    } else {
      for (int y = 0; y < H; ++y) row_job(y);
    }
    return;
  }
  // Strided case is never hot; scatter serially.
  for (int i = 0; i < outH; ++i) {
    for (int j = 0; j < outW; ++j) {
      const T g = grad_out[(static_cast<std::size_t>(i) * outW + j) * grad_stride];
      if (g == T(0)) continue;
      const int i0 = i * stride - pad;
      const int j0 = j * stride - pad;
      for (int a = std::max(0, -i0); a < std::min(m, H - i0); ++a)
        for (int b = std::max(0, -j0); b < std::min(m, W - j0); ++b) {
          T* dst = gin + (static_cast<std::size_t>(i0 + a) * W + (j0 + b)) * C;
          const T* wrow = w + (static_cast<std::size_t>(a) * m + b) * C;
          for (int k = 0; k < C; ++k) dst[k] += g * wrow[k];
        }
    }
  }
}

template <typename T>
void conv_backward_weights(const T* grad_out, int outH, int outW,
                           std::size_t grad_stride, const T* in, int H, int W,
                           int C, int m, int pad, int stride, T* gw,
                           bool parallel) {
  if (parallel && C > 1) {
    // Each thread owns a channel slice; every slice re-scans the gradient
    // plane, which stays cache resident at the sizes used here.
#pragma omp parallel for schedule(static)
    for (int k = 0; k < C; ++k) {
      for (int i = 0; i < outH; ++i) {
        for (int j = 0; j < outW; ++j) {
          const T g =
              grad_out[(static_cast<std::size_t>(i) * outW + j) * grad_stride];
          if (g == T(0)) continue;
          const int i0 = i * stride - pad;
          const int j0 = j * stride - pad;
          for (int a = std::max(0, -i0); a < std::min(m, H - i0); ++a)
            for (int b = std::max(0, -j0); b < std::min(m, W - j0); ++b)
              gw[(static_cast<std::size_t>(a) * m + b) * C + k] +=
                  g * in[(static_cast<std::size_t>(i0 + a) * W + (j0 + b)) * C + k];
        }
      }
    }
    return;
  }
  for (int i = 0; i < outH; ++i) {
    const int i0 = i * stride - pad;
    const int a0 = std::max(0, -i0);
    const int a1 = std::min(m, H - i0);
    for (int j = 0; j < outW; ++j) {
      const T g = grad_out[(static_cast<std::size_t>(i) * outW + j) * grad_stride];
      if (g == T(0)) continue;
      const int j0 = j * stride - pad;
      const int b0 = std::max(0, -j0);
      const int b1 = std::min(m, W - j0);
      for (int a = a0; a < a1; ++a)
        axpy_span(gw + (static_cast<std::size_t>(a) * m + b0) * C,
                  in + (static_cast<std::size_t>(i0 + a) * W + (j0 + b0)) * C,
                  g, (b1 - b0) * C);
    }
  }
}

#define ROTEQNET_INSTANTIATE_KERNELS(T)                                        \
  template void conv_forward<T>(const T*, int, int, int, const T*, int, int,  \
                                int, T*, int, int, std::size_t, bool, bool);  \
  template void conv_backward_input<T>(const T*, int, int, std::size_t,       \
                                       const T*, int, int, int, T*, int, int, \
                                       int, bool);                            \
  template void conv_backward_weights<T>(const T*, int, int, std::size_t,     \
                                         const T*, int, int, int, int, int,   \
                                         int, T*, bool);

ROTEQNET_INSTANTIATE_KERNELS(float)
ROTEQNET_INSTANTIATE_KERNELS(double)
#undef ROTEQNET_INSTANTIATE_KERNELS

}  // namespace kernels

namespace serial_ref {

template <typename T>
void conv_forward(const T* in, int H, int W, int C, const T* w, int m, int pad,
                  int stride, T* out, int outH, int outW,
                  std::size_t out_stride, bool accumulate) {
  for (int i = 0; i < outH; ++i) {
    for (int j = 0; j < outW; ++j) {
      T acc = 0;
      for (int a = 0; a < m; ++a) {
        for (int b = 0; b < m; ++b) {
          const int y = i * stride + a - pad;
          const int x = j * stride + b - pad;
          if (y < 0 || y >= H || x < 0 || x >= W) continue;
          for (int k = 0; k < C; ++k)
            acc += in[(static_cast<std::size_t>(y) * W + x) * C + k] *
                   w[(static_cast<std::size_t>(a) * m + b) * C + k];
        }
      }
      T* dst = out + (static_cast<std::size_t>(i) * outW + j) * out_stride;
      *dst = accumulate ? *dst + acc : acc;
    }
  }
}

template <typename T>
void conv_backward_input(const T* grad_out, int outH, int outW,
                         std::size_t grad_stride, const T* w, int m, int pad,
                         int stride, T* gin, int H, int W, int C) {
  for (int i = 0; i < outH; ++i)
    for (int j = 0; j < outW; ++j) {
      const T g = grad_out[(static_cast<std::size_t>(i) * outW + j) * grad_stride];
      for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b) {
          const int y = i * stride + a - pad;
          const int x = j * stride + b - pad;
          if (y < 0 || y >= H || x < 0 || x >= W) continue;
          for (int k = 0; k < C; ++k)
            gin[(static_cast<std::size_t>(y) * W + x) * C + k] +=
                g * w[(static_cast<std::size_t>(a) * m + b) * C + k];
        }
    }
}

template <typename T>
void conv_backward_weights(const T* grad_out, int outH, int outW,
                           std::size_t grad_stride, const T* in, int H, int W,
                           int C, int m, int pad, int stride, T* gw) {
  for (int i = 0; i < outH; ++i)
    for (int j = 0; j < outW; ++j) {
      const T g = grad_out[(static_cast<std::size_t>(i) * outW + j) * grad_stride];
      for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b) {
          const int y = i * stride + a - pad;
          const int x = j * stride + b - pad;
          if (y < 0 || y >= H || x < 0 || x >= W) continue;
          for (int k = 0; k < C; ++k)
            gw[(static_cast<std::size_t>(a) * m + b) * C + k] +=
                g * in[(static_cast<std::size_t>(y) * W + x) * C + k];
        }
    }
}

#define ROTEQNET_INSTANTIATE_REF(T)                                           \
  template void conv_forward<T>(const T*, int, int, int, const T*, int, int,  \
                                int, T*, int, int, std::size_t, bool);        \
  template void conv_backward_input<T>(const T*, int, int, std::size_t,       \
                                       const T*, int, int, int, T*, int, int, \
                                       int);                                  \
  template void conv_backward_weights<T>(const T*, int, int, std::size_t,     \
                                         const T*, int, int, int, int, int,   \
                                         int, T*);

ROTEQNET_INSTANTIATE_REF(float)
ROTEQNET_INSTANTIATE_REF(double)
#undef ROTEQNET_INSTANTIATE_REF

}  // namespace serial_ref

namespace {

template <typename T>
void check_conv_args(const Tensor<T>& input, const Tensor<T>& filter) {
  if (input.ndim() != 2 && input.ndim() != 3)
    throw std::invalid_argument("conv2d: input must be HxW or HxWxC");
  if (filter.ndim() != 2 && filter.ndim() != 3)
    throw std::invalid_argument("conv2d: filter must be mxm or mxmxC");
  if (filter.extent(0) != filter.extent(1))
    throw std::invalid_argument("conv2d: filter must be square");
  const int din = input.ndim() == 3 ? input.extent(2) : 1;
  const int dfl = filter.ndim() == 3 ? filter.extent(2) : 1;
  if (din != dfl)
    throw std::invalid_argument("conv2d: channel mismatch, input has " +
                                std::to_string(din) + ", filter has " +
                                std::to_string(dfl));
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& filter, int pad,
                 int stride) {
  check_conv_args(input, filter);
  const int H = input.extent(0), W = input.extent(1);
  const int C = input.ndim() == 3 ? input.extent(2) : 1;
  const int m = filter.extent(0);
  const int outH = conv_output_extent(H, m, pad, stride);
  const int outW = conv_output_extent(W, m, pad, stride);
  Tensor<T> out({outH, outW});
  kernels::conv_forward(input.data(), H, W, C, filter.data(), m, pad, stride,
                        out.data(), outH, outW, std::size_t{1}, false, true);
  ensure_finite(out, "conv2d");
  return out;
}

template <typename T>
Tensor<T> conv2d_backward_input(const Tensor<T>& grad_out,
                                const Tensor<T>& filter,
                                const Shape& input_shape, int pad, int stride) {
  if (grad_out.ndim() != 2)
    throw std::invalid_argument("conv2d_backward_input: grad must be HxW");
  if (input_shape.size() != 2 && input_shape.size() != 3)
    throw std::invalid_argument("conv2d_backward_input: bad input shape");
  const int H = input_shape[0], W = input_shape[1];
  const int C = input_shape.size() == 3 ? input_shape[2] : 1;
  const int m = filter.extent(0);
  const int dfl = filter.ndim() == 3 ? filter.extent(2) : 1;
  if (dfl != C)
    throw std::invalid_argument("conv2d_backward_input: channel mismatch");
  if (conv_output_extent(H, m, pad, stride) != grad_out.extent(0) ||
      conv_output_extent(W, m, pad, stride) != grad_out.extent(1))
    throw std::invalid_argument(
        "conv2d_backward_input: grad shape inconsistent with forward call");
  Tensor<T> gin(input_shape);
  kernels::conv_backward_input(grad_out.data(), grad_out.extent(0),
                               grad_out.extent(1), std::size_t{1},
                               filter.data(), m, pad, stride, gin.data(), H, W,
                               C, true);
  ensure_finite(gin, "conv2d_backward_input");
  return gin;
}

template <typename T>
Tensor<T> conv2d_backward_weights(const Tensor<T>& grad_out,
                                  const Tensor<T>& input, int m, int pad,
                                  int stride) {
  if (grad_out.ndim() != 2)
    throw std::invalid_argument("conv2d_backward_weights: grad must be HxW");
  const int H = input.extent(0), W = input.extent(1);
  const int C = input.ndim() == 3 ? input.extent(2) : 1;
  if (conv_output_extent(H, m, pad, stride) != grad_out.extent(0) ||
      conv_output_extent(W, m, pad, stride) != grad_out.extent(1))
    throw std::invalid_argument(
        "conv2d_backward_weights: grad shape inconsistent with forward call");
  Shape wshape = input.ndim() == 3 ? Shape{m, m, C} : Shape{m, m};
  Tensor<T> gw(wshape);
  kernels::conv_backward_weights(grad_out.data(), grad_out.extent(0),
                                 grad_out.extent(1), std::size_t{1},
                                 input.data(), H, W, C, m, pad, stride,
                                 gw.data(), true);
  ensure_finite(gw, "conv2d_backward_weights");
  return gw;
}

#define ROTEQNET_INSTANTIATE_CONV(T)                                          \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, int, int); \
  template Tensor<T> conv2d_backward_input<T>(const Tensor<T>&,               \
                                              const Tensor<T>&, const Shape&, \
                                              int, int);                      \
  template Tensor<T> conv2d_backward_weights<T>(const Tensor<T>&,             \
                                                const Tensor<T>&, int, int,   \
                                                int);

ROTEQNET_INSTANTIATE_CONV(float)
ROTEQNET_INSTANTIATE_CONV(double)
#undef ROTEQNET_INSTANTIATE_CONV

}  // namespace roteqnet
