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
#include "roteqnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace roteqnet {

std::string shape_to_string(const Shape& s) {
  std::ostringstream out;
  out << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out << "x";
    out << s[i];
  }
  out << "]";
  return out.str();
}

namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_to_string(a.shape()) + " vs " +
                                shape_to_string(b.shape()));
}

}  // namespace

template <typename T>
void ensure_finite(const Tensor<T>& t, const char* context) {
  const T* p = t.data();
  const std::size_t n = t.size();
  bool ok = true;
#pragma omp simd reduction(& : ok)
  for (std::size_t i = 0; i < n; ++i) ok &= std::isfinite(p[i]);
  if (!ok)
    throw std::runtime_error(std::string(context) +
                             ": produced a non-finite value");
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  ensure_finite(out, "add");
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, T scalar) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + scalar;
  ensure_finite(out, "add");
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  ensure_finite(out, "mul");
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * factor;
  ensure_finite(out, "scale");
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] > T(0) ? a[i] : T(0);
  return out;
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::tanh(a[i]);
  return out;
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::sqrt(a[i]);
  ensure_finite(out, "sqrt");
  return out;
}

template <typename T>
T sum(const Tensor<T>& a) {
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
  return s;
}

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "dot");
  T s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
MaxWithArgmax<T> max_with_argmax(const Tensor<T>& a, int axis) {
  if (axis < 0 || axis >= a.ndim())
    throw std::invalid_argument("max_with_argmax: axis out of range");
  const int n = a.extent(axis);
  if (n == 0) throw std::invalid_argument("max_with_argmax: empty axis");

  // View the tensor as outer x n x inner with the reduced axis in the middle.
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(a.extent(d));
  for (int d = axis + 1; d < a.ndim(); ++d)
    inner *= static_cast<std::size_t>(a.extent(d));

  Shape out_shape;
  for (int d = 0; d < a.ndim(); ++d)
    if (d != axis) out_shape.push_back(a.extent(d));

  MaxWithArgmax<T> result{Tensor<T>(out_shape), Tensor<std::int32_t>(out_shape)};
  const T* src = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      T best = src[o * n * inner + in];
      std::int32_t best_i = 0;
      for (int k = 1; k < n; ++k) {
        const T v = src[(o * n + k) * inner + in];
        if (v > best) {  // strict: ties keep the smallest index
          best = v;
          best_i = k;
        }
      }
      result.values[o * inner + in] = best;
      result.argmax[o * inner + in] = best_i;
    }
  }
  return result;
}

template <typename T>
Tensor<T> variance(const Tensor<T>& a, const std::vector<int>& axes) {
  if (axes.empty()) throw std::invalid_argument("variance: empty axis set");
  bool reduce[4] = {false, false, false, false};
  for (int ax : axes) {
    if (ax < 0 || ax >= a.ndim())
      throw std::invalid_argument("variance: axis out of range");
    reduce[ax] = true;
  }
  Shape out_shape;
  std::size_t reduced_n = 1;
  for (int d = 0; d < a.ndim(); ++d) {
    if (reduce[d])
      reduced_n *= static_cast<std::size_t>(a.extent(d));
    else
      out_shape.push_back(a.extent(d));
  }
  if (reduced_n == 0) throw std::invalid_argument("variance: empty reduction");

  Tensor<T> mean(out_shape);
  Tensor<T> out(out_shape);

  // Walk the full index space, mapping each element to its kept-axes slot.
  Shape ext(4, 1);
  for (int d = 0; d < a.ndim(); ++d) ext[d] = a.extent(d);
  auto kept_index = [&](int i0, int i1, int i2, int i3) {
    std::size_t idx = 0;
    const int ii[4] = {i0, i1, i2, i3};
    for (int d = 0; d < a.ndim(); ++d)
      if (!reduce[d]) idx = idx * static_cast<std::size_t>(ext[d]) + ii[d];
    return idx;
  };
  std::size_t flat = 0;
  for (int i0 = 0; i0 < ext[0]; ++i0)
    for (int i1 = 0; i1 < ext[1]; ++i1)
      for (int i2 = 0; i2 < ext[2]; ++i2)
        for (int i3 = 0; i3 < ext[3]; ++i3)
          mean[kept_index(i0, i1, i2, i3)] += a[flat++];
  for (std::size_t i = 0; i < mean.size(); ++i)
    mean[i] /= static_cast<T>(reduced_n);
  flat = 0;
  for (int i0 = 0; i0 < ext[0]; ++i0)
    for (int i1 = 0; i1 < ext[1]; ++i1)
      for (int i2 = 0; i2 < ext[2]; ++i2)
        for (int i3 = 0; i3 < ext[3]; ++i3) {
          const T d = a[flat++] - mean[kept_index(i0, i1, i2, i3)];
          out[kept_index(i0, i1, i2, i3)] += d * d;
        }
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] /= static_cast<T>(reduced_n);
  ensure_finite(out, "variance");
  return out;
}

#define ROTEQNET_INSTANTIATE(T)                                              \
  template void ensure_finite<T>(const Tensor<T>&, const char*);             \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> add<T>(const Tensor<T>&, T);                            \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                          \
  template Tensor<T> relu<T>(const Tensor<T>&);                              \
  template Tensor<T> tanh<T>(const Tensor<T>&);                              \
  template Tensor<T> sqrt<T>(const Tensor<T>&);                              \
  template T sum<T>(const Tensor<T>&);                                       \
  template T dot<T>(const Tensor<T>&, const Tensor<T>&);                     \
  template MaxWithArgmax<T> max_with_argmax<T>(const Tensor<T>&, int);       \
  template Tensor<T> variance<T>(const Tensor<T>&, const std::vector<int>&);

ROTEQNET_INSTANTIATE(float)
ROTEQNET_INSTANTIATE(double)
#undef ROTEQNET_INSTANTIATE

}  // namespace roteqnet
