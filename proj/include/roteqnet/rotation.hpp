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
#ifndef ROTEQNET_ROTATION_HPP_
#define ROTEQNET_ROTATION_HPP_

#include <cstdint>
#include <utility>
#include <vector>

#include "roteqnet/tensor.hpp"

namespace roteqnet {

/// cos/sin of an angle in degrees. Multiples of 90 produce exact {0, +-1}
/// so that quarter-turn resampling degenerates to an index permutation with
/// no floating-point residue.
void cos_sin_deg(double degrees, double& c, double& s);

/// Evenly spaced filter orientations. angle(r) for r = 1..count, with the
/// last angle equal to the interval's upper bound (full circle by default;
/// the interval can be narrowed when the tilt range of a problem is known).
struct OrientationSet {
  int count = 1;
  double lower = 0.0;
  double upper = 360.0;

  OrientationSet() = default;
  OrientationSet(int r, double lo, double hi);
  static OrientationSet full_circle(int r) { return OrientationSet(r, 0.0, 360.0); }

  double angle(int r) const {  // r is 1-based
    return lower + (upper - lower) * static_cast<double>(r) /
                       static_cast<double>(count);
  }
  double step() const { return (upper - lower) / static_cast<double>(count); }
};

/// One stored canonical filter. Scalar-input filters use `wu` only; filters
/// that consume vector fields carry one tensor per Cartesian component.
/// Weights outside the inscribed circle of diameter m are zero at all times;
/// rotated instances are derived on demand and never stored.
template <typename T>
struct CanonicalFilter {
  Tensor<T> wu;  // m x m x d
  Tensor<T> wv;  // empty for scalar-input filters

  bool is_vector() const { return !wv.empty(); }
  int size() const { return wu.extent(0); }
  int channels() const { return wu.ndim() == 3 ? wu.extent(2) : 1; }
};

/// m x m boolean support: 1 where the cell centre lies within distance m/2
/// of the filter centre ((m-1)/2, (m-1)/2).
Tensor<std::uint8_t> circular_mask(int m);

/// Zeroes weights outside the circular support, in place. Idempotent.
/// Applied after initialisation and after every parameter update.
template <typename T>
void apply_circular_mask(Tensor<T>& w);
template <typename T>
void apply_circular_mask(CanonicalFilter<T>& f);

/// Rotates a filter by `degrees` about its centre with bilinear resampling.
/// Positive angles follow the convention pinned by the quarter-turn tests:
/// out[i,j] = w[j, m-1-i] at 90 degrees. Samples falling outside the grid or
/// outside the circular support read zero; the output is re-masked.
template <typename T>
Tensor<T> rotate_scalar_filter(const Tensor<T>& w, double degrees);

/// Transpose of rotate_scalar_filter at the same angle, accumulated into
/// `grad_canonical`. This is the exact adjoint of the forward resampling
/// (splats each gradient cell back through the bilinear weights); at
/// multiples of 90 degrees it coincides with rotation by -degrees.
template <typename T>
void rotate_scalar_filter_adjoint(const Tensor<T>& grad_rotated,
                                  double degrees, Tensor<T>& grad_canonical);

/// Rotating a vector-field filter re-mixes the two Cartesian components in
/// addition to resampling each of them:
///   u' = cos(a) g_a(wu) - sin(a) g_a(wv)
///   v' = cos(a) g_a(wv) + sin(a) g_a(wu)
template <typename T>
std::pair<Tensor<T>, Tensor<T>> rotate_vector_filter(const Tensor<T>& wu,
                                                     const Tensor<T>& wv,
                                                     double degrees);

template <typename T>
void rotate_vector_filter_adjoint(const Tensor<T>& grad_u,
                                  const Tensor<T>& grad_v, double degrees,
                                  Tensor<T>& grad_wu, Tensor<T>& grad_wv);

/// Accumulates per-orientation filter gradients back onto the canonical
/// frame: the transpose of each orientation's rotation applied to its
/// gradient, summed over orientations, then re-masked to circular support.
template <typename T>
Tensor<T> realign_gradients(const std::vector<Tensor<T>>& per_orientation,
                            const OrientationSet& orientations);
template <typename T>
CanonicalFilter<T> realign_gradients(
    const std::vector<std::pair<Tensor<T>, Tensor<T>>>& per_orientation,
    const OrientationSet& orientations);

/// Bilinear rotation of an image or feature map (H x W or H x W x C) about
/// its centre ((H-1)/2, (W-1)/2), zero fill outside. Shares the resampling
/// convention with the filter rotation above, so quarter turns are exact
/// index permutations here too.
template <typename T>
Tensor<T> rotate_image(const Tensor<T>& image, double degrees);

}  // namespace roteqnet

#endif  // ROTEQNET_ROTATION_HPP_
