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
#ifndef ROTEQNET_CONV2D_HPP_
#define ROTEQNET_CONV2D_HPP_

#include <cstddef>

#include "roteqnet/tensor.hpp"

namespace roteqnet {

// 2D cross-correlation (the usual deep-learning "convolution": the filter is
// not flipped). Out-of-bounds input reads are zero. With pad = m/2 and unit
// stride the output has the input's spatial size.
//
// output[i,j] = sum_{a,b,k} input[i*stride + a - pad, j*stride + b - pad, k]
//               * filter[a,b,k]

/// input: H x W or H x W x d.  filter: m x m or m x m x d, same d.
/// Returns H' x W' with H' = (H + 2*pad - m)/stride + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& filter, int pad,
                 int stride = 1);

/// Adjoint with respect to the input: given dL/doutput, returns dL/dinput of
/// shape `input_shape` (H x W [x d]).
template <typename T>
Tensor<T> conv2d_backward_input(const Tensor<T>& grad_out,
                                const Tensor<T>& filter,
                                const Shape& input_shape, int pad,
                                int stride = 1);

/// Adjoint with respect to the filter: given dL/doutput and the forward
/// input, returns dL/dfilter of size m x m [x d].
template <typename T>
Tensor<T> conv2d_backward_weights(const Tensor<T>& grad_out,
                                  const Tensor<T>& input, int m, int pad,
                                  int stride = 1);

// Raw strided-plane kernels. Layers use these to write one response plane
// per (filter, orientation) directly into a packed H x W x (F*R) tensor.
// `parallel` enables the kernel's own OpenMP loop; callers that already run
// inside a parallel region (e.g. one worker per batch sample) pass false to
// avoid per-call nested-region overhead.
namespace kernels {

template <typename T>
void conv_forward(const T* in, int H, int W, int C, const T* w, int m, int pad,
                  int stride, T* out, int outH, int outW,
                  std::size_t out_stride, bool accumulate, bool parallel);

/// Accumulates into gin (H x W x C contiguous). Zero entries of grad_out are
/// skipped: after orientation pooling the response gradients are sparse and
/// the skip removes almost all of the adjoint's arithmetic.
template <typename T>
void conv_backward_input(const T* grad_out, int outH, int outW,
                         std::size_t grad_stride, const T* w, int m, int pad,
                         int stride, T* gin, int H, int W, int C,
                         bool parallel);

/// Accumulates into gw (m x m x C contiguous). Zero gradient pixels skipped.
template <typename T>
void conv_backward_weights(const T* grad_out, int outH, int outW,
                           std::size_t grad_stride, const T* in, int H, int W,
                           int C, int m, int pad, int stride, T* gw,
                           bool parallel);

}  // namespace kernels

// Plain serial implementations of the same contracts, kept as a reference
// for the unit tests and the kernel benchmark. No OpenMP, no skip logic,
// straight loop order.
namespace serial_ref {

template <typename T>
void conv_forward(const T* in, int H, int W, int C, const T* w, int m, int pad,
                  int stride, T* out, int outH, int outW,
                  std::size_t out_stride, bool accumulate);

template <typename T>
void conv_backward_input(const T* grad_out, int outH, int outW,
                         std::size_t grad_stride, const T* w, int m, int pad,
                         int stride, T* gin, int H, int W, int C);

template <typename T>
void conv_backward_weights(const T* grad_out, int outH, int outW,
                           std::size_t grad_stride, const T* in, int H, int W,
                           int C, int m, int pad, int stride, T* gw);

}  // namespace serial_ref

/// Output spatial extent for one axis; throws on invalid geometry.
int conv_output_extent(int in_extent, int m, int pad, int stride);

}  // namespace roteqnet

#endif  // ROTEQNET_CONV2D_HPP_
