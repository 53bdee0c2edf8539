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
#ifndef ROTEQNET_FIELD_HPP_
#define ROTEQNET_FIELD_HPP_

#include <memory>
#include <stdexcept>
#include <vector>

#include "roteqnet/rotation.hpp"
#include "roteqnet/tensor.hpp"

namespace roteqnet {

/// Shape of one feature map flowing between layers.
struct FieldShape {
  int h = 0, w = 0, c = 0;
  bool vec = false;  // true: 2D vector field (u,v per channel), false: scalar

  bool operator==(const FieldShape&) const = default;
};

std::string field_shape_to_string(const FieldShape& s);

/// One feature map: a scalar field (v empty) or a field of 2D vectors where
/// u and v hold the Cartesian components per channel. The vector form is the
/// inter-layer currency of the network; the derived magnitude
/// sqrt(u^2 + v^2) is non-negative by construction.
template <typename T>
struct FieldMap {
  Tensor<T> u;  // H x W x C
  Tensor<T> v;  // same shape as u, or empty for scalar maps

  bool is_vector() const { return !v.empty(); }

  FieldShape shape() const {
    if (u.ndim() != 3) throw std::logic_error("field map must be HxWxC");
    return {u.extent(0), u.extent(1), u.extent(2), is_vector()};
  }

  static FieldMap scalar(Tensor<T> values) {
    FieldMap f;
    f.u = std::move(values);
    return f;
  }
};

template <typename T>
using FieldBatch = std::vector<FieldMap<T>>;
template <typename T>
using BatchPtr = std::shared_ptr<const FieldBatch<T>>;

/// Per-channel magnitudes sqrt(u^2 + v^2) of a vector field map.
template <typename T>
Tensor<T> magnitude_map(const FieldMap<T>& z);

/// Rotates a feature map the way the input rotation propagates through the
/// network: spatial resampling of each component plus the in-place rotation
/// of every 2D vector (scalar maps only resample). Exact at quarter turns.
/// Used by the equivariance checks to build the expected right-hand sides.
template <typename T>
FieldMap<T> rotate_field_map(const FieldMap<T>& z, double degrees);

}  // namespace roteqnet

#endif  // ROTEQNET_FIELD_HPP_
