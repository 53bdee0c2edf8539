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
#include "roteqnet/rotation.hpp"

#include <cmath>
#include <stdexcept>

namespace roteqnet {

void cos_sin_deg(double degrees, double& c, double& s) {
  double a = std::fmod(degrees, 360.0);
  if (a < 0) a += 360.0;
  if (a == 0.0) {
    c = 1.0; s = 0.0;
  } else if (a == 90.0) {
    c = 0.0; s = 1.0;
  } else if (a == 180.0) {
    c = -1.0; s = 0.0;
  } else if (a == 270.0) {
    c = 0.0; s = -1.0;
  } else {
    const double rad = a * 0.017453292519943295;
    c = std::cos(rad);
    s = std::sin(rad);
  }
}

OrientationSet::OrientationSet(int r, double lo, double hi)
    : count(r), lower(lo), upper(hi) {
  if (r < 1) throw std::invalid_argument("orientation set: count must be >= 1");
  if (!(hi > lo))
    throw std::invalid_argument("orientation set: empty angle interval");
}

Tensor<std::uint8_t> circular_mask(int m) {
  if (m < 1) throw std::invalid_argument("circular_mask: m must be >= 1");
  Tensor<std::uint8_t> mask({m, m});
  const double c = (m - 1) / 2.0;
  const double r2 = (m / 2.0) * (m / 2.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      const double d2 = (i - c) * (i - c) + (j - c) * (j - c);
      mask(i, j) = d2 <= r2 ? 1 : 0;
    }
  return mask;
}

template <typename T>
void apply_circular_mask(Tensor<T>& w) {
  const int m = w.extent(0);
  if (w.extent(1) != m)
    throw std::invalid_argument("apply_circular_mask: filter must be square");
  const int d = w.ndim() == 3 ? w.extent(2) : 1;
  const auto mask = circular_mask(m);
  T* p = w.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      if (!mask(i, j))
        for (int k = 0; k < d; ++k)
          p[(static_cast<std::size_t>(i) * m + j) * d + k] = T(0);
}

template <typename T>
void apply_circular_mask(CanonicalFilter<T>& f) {
  apply_circular_mask(f.wu);
  if (f.is_vector()) apply_circular_mask(f.wv);
}

namespace {

// Source position for output cell (i, j) under a rotation by `degrees`
// about centre (c, c): the output samples the input at the inversely
// rotated position, displacement mapped through [[cos, sin], [-sin, cos]].
struct SamplePos {
  double row, col;
};
inline SamplePos source_pos(int i, int j, double cr, double cc, double cosd,
                            double sind) {
  const double dr = i - cr;
  const double dc = j - cc;
  return {cr + cosd * dr + sind * dc, cc - sind * dr + cosd * dc};
}

// Gather: out[i,j] = bilinear(src, source_pos(i,j)), zero outside the grid.
template <typename T>
void resample_gather(const T* src, int H, int W, int C, double degrees,
                     double cr, double cc, const std::uint8_t* mask, T* out) {
  double cosd, sind;
  cos_sin_deg(degrees, cosd, sind);
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      T* dst = out + (static_cast<std::size_t>(i) * W + j) * C;
      if (mask && !mask[i * W + j]) {
        for (int k = 0; k < C; ++k) dst[k] = T(0);
        continue;
      }
      const SamplePos s = source_pos(i, j, cr, cc, cosd, sind);
      const int r0 = static_cast<int>(std::floor(s.row));
      const int c0 = static_cast<int>(std::floor(s.col));
      const double fr = s.row - r0;
      const double fc = s.col - c0;
      const double wgt[2][2] = {{(1 - fr) * (1 - fc), (1 - fr) * fc},
                                {fr * (1 - fc), fr * fc}};
      for (int k = 0; k < C; ++k) dst[k] = T(0);
      for (int dr = 0; dr < 2; ++dr) {
        const int r = r0 + dr;
        if (r < 0 || r >= H) continue;
        for (int dc = 0; dc < 2; ++dc) {
          const int c2 = c0 + dc;
          if (c2 < 0 || c2 >= W || wgt[dr][dc] == 0.0) continue;
          const T* sp = src + (static_cast<std::size_t>(r) * W + c2) * C;
          const T wl = static_cast<T>(wgt[dr][dc]);
          for (int k = 0; k < C; ++k) dst[k] += wl * sp[k];
        }
      }
    }
  }
}

// Scatter: exact transpose of resample_gather at the same angle. Gradient
// mass at cell (i, j) splats onto the up-to-four source cells it read from.
template <typename T>
void resample_scatter(const T* grad, int H, int W, int C, double degrees,
                      double cr, double cc, const std::uint8_t* mask, T* acc) {
  double cosd, sind;
  cos_sin_deg(degrees, cosd, sind);
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      if (mask && !mask[i * W + j]) continue;
      const T* g = grad + (static_cast<std::size_t>(i) * W + j) * C;
      const SamplePos s = source_pos(i, j, cr, cc, cosd, sind);
      const int r0 = static_cast<int>(std::floor(s.row));
      const int c0 = static_cast<int>(std::floor(s.col));
      const double fr = s.row - r0;
      const double fc = s.col - c0;
      const double wgt[2][2] = {{(1 - fr) * (1 - fc), (1 - fr) * fc},
                                {fr * (1 - fc), fr * fc}};
      for (int dr = 0; dr < 2; ++dr) {
        const int r = r0 + dr;
        if (r < 0 || r >= H) continue;
        for (int dc = 0; dc < 2; ++dc) {
          const int c2 = c0 + dc;
          if (c2 < 0 || c2 >= W || wgt[dr][dc] == 0.0) continue;
          T* dst = acc + (static_cast<std::size_t>(r) * W + c2) * C;
          const T wl = static_cast<T>(wgt[dr][dc]);
          for (int k = 0; k < C; ++k) dst[k] += wl * g[k];
        }
      }
    }
  }
}

template <typename T>
void require_square_filter(const Tensor<T>& w, const char* op) {
  if ((w.ndim() != 2 && w.ndim() != 3) || w.extent(0) != w.extent(1))
    throw std::invalid_argument(std::string(op) + ": filter must be square");
}

}  // namespace

template <typename T>
Tensor<T> rotate_scalar_filter(const Tensor<T>& w, double degrees) {
  require_square_filter(w, "rotate_scalar_filter");
  const int m = w.extent(0);
  const int d = w.ndim() == 3 ? w.extent(2) : 1;
  const auto mask = circular_mask(m);
  Tensor<T> out(w.shape());
  const double c = (m - 1) / 2.0;
  resample_gather(w.data(), m, m, d, degrees, c, c, mask.data(), out.data());
  return out;
}

template <typename T>
void rotate_scalar_filter_adjoint(const Tensor<T>& grad_rotated,
                                  double degrees, Tensor<T>& grad_canonical) {
  require_square_filter(grad_rotated, "rotate_scalar_filter_adjoint");
  if (!grad_rotated.same_shape(grad_canonical))
    throw std::invalid_argument("rotate_scalar_filter_adjoint: shape mismatch");
  const int m = grad_rotated.extent(0);
  const int d = grad_rotated.ndim() == 3 ? grad_rotated.extent(2) : 1;
  const auto mask = circular_mask(m);
  const double c = (m - 1) / 2.0;
  resample_scatter(grad_rotated.data(), m, m, d, degrees, c, c, mask.data(),
                   grad_canonical.data());
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> rotate_vector_filter(const Tensor<T>& wu,
                                                     const Tensor<T>& wv,
                                                     double degrees) {
  if (!wu.same_shape(wv))
    throw std::invalid_argument("rotate_vector_filter: component shape mismatch");
  double c, s;
  cos_sin_deg(degrees, c, s);
  Tensor<T> gu = rotate_scalar_filter(wu, degrees);
  Tensor<T> gv = rotate_scalar_filter(wv, degrees);
  Tensor<T> ru(wu.shape()), rv(wv.shape());
  for (std::size_t i = 0; i < gu.size(); ++i) {
    ru[i] = static_cast<T>(c) * gu[i] - static_cast<T>(s) * gv[i];
    rv[i] = static_cast<T>(c) * gv[i] + static_cast<T>(s) * gu[i];
  }
  return {std::move(ru), std::move(rv)};
}

template <typename T>
void rotate_vector_filter_adjoint(const Tensor<T>& grad_u,
                                  const Tensor<T>& grad_v, double degrees,
                                  Tensor<T>& grad_wu, Tensor<T>& grad_wv) {
  double c, s;
  cos_sin_deg(degrees, c, s);
  Tensor<T> a(grad_u.shape()), b(grad_v.shape());
  rotate_scalar_filter_adjoint(grad_u, degrees, a);
  rotate_scalar_filter_adjoint(grad_v, degrees, b);
  for (std::size_t i = 0; i < a.size(); ++i) {
    grad_wu[i] += static_cast<T>(c) * a[i] + static_cast<T>(s) * b[i];
    grad_wv[i] += static_cast<T>(c) * b[i] - static_cast<T>(s) * a[i];
  }
}

template <typename T>
Tensor<T> realign_gradients(const std::vector<Tensor<T>>& per_orientation,
                            const OrientationSet& orientations) {
  if (static_cast<int>(per_orientation.size()) != orientations.count)
    throw std::invalid_argument(
        "realign_gradients: gradient count does not match orientation count");
  Tensor<T> acc(per_orientation.front().shape());
  for (int r = 1; r <= orientations.count; ++r)
    rotate_scalar_filter_adjoint(per_orientation[r - 1], orientations.angle(r),
                                 acc);
  apply_circular_mask(acc);
  return acc;
}

template <typename T>
CanonicalFilter<T> realign_gradients(
    const std::vector<std::pair<Tensor<T>, Tensor<T>>>& per_orientation,
    const OrientationSet& orientations) {
  if (static_cast<int>(per_orientation.size()) != orientations.count)
    throw std::invalid_argument(
        "realign_gradients: gradient count does not match orientation count");
  CanonicalFilter<T> acc;
  acc.wu = Tensor<T>(per_orientation.front().first.shape());
  acc.wv = Tensor<T>(per_orientation.front().second.shape());
  for (int r = 1; r <= orientations.count; ++r)
    rotate_vector_filter_adjoint(per_orientation[r - 1].first,
                                 per_orientation[r - 1].second,
                                 orientations.angle(r), acc.wu, acc.wv);
  apply_circular_mask(acc);
  return acc;
}

template <typename T>
Tensor<T> rotate_image(const Tensor<T>& image, double degrees) {
  if (image.ndim() != 2 && image.ndim() != 3)
    throw std::invalid_argument("rotate_image: image must be HxW or HxWxC");
  const int H = image.extent(0), W = image.extent(1);
  const int C = image.ndim() == 3 ? image.extent(2) : 1;
  Tensor<T> out(image.shape());
  resample_gather(image.data(), H, W, C, degrees, (H - 1) / 2.0, (W - 1) / 2.0,
                  nullptr, out.data());
  return out;
}

#define ROTEQNET_INSTANTIATE_ROT(T)                                            \
  template void apply_circular_mask<T>(Tensor<T>&);                           \
  template void apply_circular_mask<T>(CanonicalFilter<T>&);                  \
  template Tensor<T> rotate_scalar_filter<T>(const Tensor<T>&, double);       \
  template void rotate_scalar_filter_adjoint<T>(const Tensor<T>&, double,     \
                                                Tensor<T>&);                  \
  template std::pair<Tensor<T>, Tensor<T>> rotate_vector_filter<T>(           \
      const Tensor<T>&, const Tensor<T>&, double);                            \
  template void rotate_vector_filter_adjoint<T>(const Tensor<T>&,             \
                                                const Tensor<T>&, double,     \
                                                Tensor<T>&, Tensor<T>&);      \
  template Tensor<T> realign_gradients<T>(const std::vector<Tensor<T>>&,      \
                                          const OrientationSet&);             \
  template CanonicalFilter<T> realign_gradients<T>(                           \
      const std::vector<std::pair<Tensor<T>, Tensor<T>>>&,                    \
      const OrientationSet&);                                                 \
  template Tensor<T> rotate_image<T>(const Tensor<T>&, double);

ROTEQNET_INSTANTIATE_ROT(float)
ROTEQNET_INSTANTIATE_ROT(double)
#undef ROTEQNET_INSTANTIATE_ROT

}  // namespace roteqnet
