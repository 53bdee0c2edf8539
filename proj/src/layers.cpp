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
#include "roteqnet/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "roteqnet/conv2d.hpp"

namespace roteqnet {

std::string field_shape_to_string(const FieldShape& s) {
  std::ostringstream out;
  out << s.h << "x" << s.w << "x" << s.c << (s.vec ? " (vector)" : " (scalar)");
  return out.str();
}

template <typename T>
Tensor<T> magnitude_map(const FieldMap<T>& z) {
  if (!z.is_vector())
    throw std::invalid_argument("magnitude_map: scalar field has no magnitude");
  Tensor<T> rho(z.u.shape());
  for (std::size_t i = 0; i < rho.size(); ++i)
    rho[i] = std::sqrt(z.u[i] * z.u[i] + z.v[i] * z.v[i]);
  return rho;
}

template <typename T>
FieldMap<T> rotate_field_map(const FieldMap<T>& z, double degrees) {
  FieldMap<T> out;
  if (!z.is_vector()) {
    out.u = rotate_image(z.u, degrees);
    return out;
  }
  double c, s;
  cos_sin_deg(degrees, c, s);
  Tensor<T> ru = rotate_image(z.u, degrees);
  Tensor<T> rv = rotate_image(z.v, degrees);
  out.u = Tensor<T>(ru.shape());
  out.v = Tensor<T>(rv.shape());
  for (std::size_t i = 0; i < ru.size(); ++i) {
    out.u[i] = static_cast<T>(c) * ru[i] - static_cast<T>(s) * rv[i];
    out.v[i] = static_cast<T>(c) * rv[i] + static_cast<T>(s) * ru[i];
  }
  return out;
}

namespace {

template <typename T>
void check_batch_not_empty(const BatchPtr<T>& in, const char* who) {
  if (!in || in->empty())
    throw std::invalid_argument(std::string(who) + ": empty batch");
}

template <typename Node, typename T>
Node& node_as(TapeNode<T>& node, const char* who) {
  auto* p = dynamic_cast<Node*>(&node);
  if (!p)
    throw std::logic_error(std::string(who) +
                           ": tape node does not belong to this layer");
  return *p;
}

template <typename T>
struct EmptyNode final : TapeNode<T> {};

}  // namespace

// ---- RotConvLayer -----------------------------------------------------------

namespace {

// Rotated instances of every filter, derived once per forward/backward
// pair. Vector-field filters are packed as 2d channels (u block then v
// block) so one convolution per orientation covers both components.
template <typename T>
struct FilterBank {
  std::vector<std::vector<Tensor<T>>> rotated;  // [f][r-1], m x m x (d or 2d)
};

template <typename T>
Tensor<T> pack_components(const Tensor<T>& u, const Tensor<T>& v) {
  const int h = u.extent(0), w = u.extent(1), d = u.extent(2);
  Tensor<T> packed({h, w, 2 * d});
  const T* us = u.data();
  const T* vs = v.data();
  T* p = packed.data();
  for (std::size_t px = 0; px < static_cast<std::size_t>(h) * w; ++px) {
    for (int k = 0; k < d; ++k) p[2 * d * px + k] = us[d * px + k];
    for (int k = 0; k < d; ++k) p[2 * d * px + d + k] = vs[d * px + k];
  }
  return packed;
}

template <typename T>
void unpack_components(const Tensor<T>& packed, Tensor<T>& u, Tensor<T>& v) {
  const int h = packed.extent(0), w = packed.extent(1);
  const int d = packed.extent(2) / 2;
  const T* p = packed.data();
  T* us = u.data();
  T* vs = v.data();
  for (std::size_t px = 0; px < static_cast<std::size_t>(h) * w; ++px) {
    for (int k = 0; k < d; ++k) us[d * px + k] = p[2 * d * px + k];
    for (int k = 0; k < d; ++k) vs[d * px + k] = p[2 * d * px + d + k];
  }
}

template <typename T>
struct RotConvNode final : TapeNode<T> {
  BatchPtr<T> input;
  std::vector<Tensor<T>> packed_input;  // vector case: one per sample
  std::shared_ptr<FilterBank<T>> bank;
};

}  // namespace

template <typename T>
RotConvLayer<T>::RotConvLayer(int filter_count, int filter_size,
                              int in_channels, bool vector_input,
                              OrientationSet orientations, bool same_pad)
    : orientations_(orientations),
      m_(filter_size),
      d_(in_channels),
      vector_input_(vector_input),
      same_pad_(same_pad) {
  if (filter_count < 1)
    throw std::invalid_argument("rotconv: need at least one filter");
  if (m_ < 1 || m_ % 2 == 0)
    throw std::invalid_argument(
        "rotconv: filter size must be odd (rotation centre must fall on the "
        "centre cell), got " + std::to_string(m_));
  if (d_ < 1) throw std::invalid_argument("rotconv: need at least one channel");
  filters_.resize(filter_count);
  grads_.resize(filter_count);
  for (auto& f : filters_) {
    f.wu = Tensor<T>({m_, m_, d_});
    if (vector_input_) f.wv = Tensor<T>({m_, m_, d_});
  }
  for (auto& g : grads_) {
    g.wu = Tensor<T>({m_, m_, d_});
    if (vector_input_) g.wv = Tensor<T>({m_, m_, d_});
  }
}

template <typename T>
std::string RotConvLayer<T>::describe() const {
  std::ostringstream out;
  out << "rotconv " << filters_.size() << "x(" << m_ << "x" << m_ << "x" << d_
      << (vector_input_ ? "x2" : "") << ") r=" << orientations_.count
      << (same_pad_ ? " same" : " valid");
  return out.str();
}

template <typename T>
FieldShape RotConvLayer<T>::infer(const FieldShape& in) const {
  if (in.c != d_)
    throw std::invalid_argument("rotconv: channel mismatch, input has " +
                                std::to_string(in.c) + " channels, filter " +
                                std::to_string(d_));
  if (in.vec != vector_input_)
    throw std::invalid_argument(vector_input_
                                    ? "rotconv: expected a vector field input"
                                    : "rotconv: expected a scalar field input");
  const int pad = same_pad_ ? m_ / 2 : 0;
  const int oh = conv_output_extent(in.h, m_, pad, 1);
  const int ow = conv_output_extent(in.w, m_, pad, 1);
  return {oh, ow, filter_count() * orientations_.count, false};
}

template <typename T>
void RotConvLayer<T>::init(Rng& rng, double sigma) {
  const auto mask = circular_mask(m_);
  int support = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) support += mask[i];
  const int fan_in = support * d_ * (vector_input_ ? 2 : 1);
  const double s = sigma > 0 ? sigma : std::sqrt(2.0 / fan_in);
  for (auto& f : filters_) {
    for (auto& w : f.wu) w = static_cast<T>(rng.normal(0.0, s));
    if (vector_input_)
      for (auto& w : f.wv) w = static_cast<T>(rng.normal(0.0, s));
    apply_circular_mask(f);
  }
}

template <typename T>
void RotConvLayer<T>::project() {
  for (auto& f : filters_) apply_circular_mask(f);
}

template <typename T>
std::vector<Tensor<T>*> RotConvLayer<T>::parameters() {
  std::vector<Tensor<T>*> out;
  for (auto& f : filters_) {
    out.push_back(&f.wu);
    if (vector_input_) out.push_back(&f.wv);
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>*> RotConvLayer<T>::gradients() {
  std::vector<Tensor<T>*> out;
  for (auto& g : grads_) {
    out.push_back(&g.wu);
    if (vector_input_) out.push_back(&g.wv);
  }
  return out;
}

template <typename T>
FieldBatch<T> RotConvLayer<T>::forward(const BatchPtr<T>& in, Mode,
                                       const StepInfo&,
                                       std::unique_ptr<TapeNode<T>>* node) {
  check_batch_not_empty(in, "rotconv");
  const int B = static_cast<int>(in->size());
  const int F = filter_count();
  const int R = orientations_.count;
  const int pad = same_pad_ ? m_ / 2 : 0;
  const FieldShape ishape = in->front().shape();
  const FieldShape oshape = infer(ishape);

  auto bank = std::make_shared<FilterBank<T>>();
  bank->rotated.resize(F);
  for (int f = 0; f < F; ++f) {
    bank->rotated[f].resize(R);
    for (int r = 1; r <= R; ++r) {
      const double a = orientations_.angle(r);
      if (vector_input_) {
        auto uv = rotate_vector_filter(filters_[f].wu, filters_[f].wv, a);
        bank->rotated[f][r - 1] = pack_components(uv.first, uv.second);
      } else {
        bank->rotated[f][r - 1] = rotate_scalar_filter(filters_[f].wu, a);
      }
    }
  }

  const int dc = vector_input_ ? 2 * d_ : d_;  // conv channel count
  std::vector<Tensor<T>> packed(static_cast<std::size_t>(vector_input_ ? B : 0));
  FieldBatch<T> out(static_cast<std::size_t>(B));
  const bool kernel_parallel = (B == 1);
  const std::size_t cs = static_cast<std::size_t>(F) * R;
#pragma omp parallel for schedule(static) if (B > 1)
  for (int b = 0; b < B; ++b) {
    const FieldMap<T>& x = (*in)[b];
    const T* data;
    if (vector_input_) {
      packed[b] = pack_components(x.u, x.v);
      data = packed[b].data();
    } else {
      data = x.u.data();
    }
    Tensor<T> y({oshape.h, oshape.w, oshape.c});
    for (int f = 0; f < F; ++f) {
      for (int r = 0; r < R; ++r) {
        T* plane = y.data() + static_cast<std::size_t>(f) * R + r;
        kernels::conv_forward(data, ishape.h, ishape.w, dc,
                              bank->rotated[f][r].data(), m_, pad, 1, plane,
                              oshape.h, oshape.w, cs, false, kernel_parallel);
      }
    }
    out[b].u = std::move(y);
  }

  if (node) {
    auto ctx = std::make_unique<RotConvNode<T>>();
    ctx->input = in;
    ctx->packed_input = std::move(packed);
    ctx->bank = bank;
    *node = std::move(ctx);
  }
  return out;
}

template <typename T>
FieldBatch<T> RotConvLayer<T>::backward(const FieldBatch<T>& grad_out,
                                        TapeNode<T>& node) {
  auto& ctx = node_as<RotConvNode<T>>(node, "rotconv");
  const FieldBatch<T>& input = *ctx.input;
  const int B = static_cast<int>(input.size());
  const int F = filter_count();
  const int R = orientations_.count;
  const int pad = same_pad_ ? m_ / 2 : 0;
  const FieldShape ishape = input.front().shape();
  const FieldShape oshape = grad_out.front().shape();
  const std::size_t cs = static_cast<std::size_t>(F) * R;
  const bool kernel_parallel = (B == 1);

  FieldBatch<T> grad_in(static_cast<std::size_t>(B));
  // Per-sample canonical gradients, reduced serially below so the summation
  // order never depends on the thread schedule.
  std::vector<std::vector<CanonicalFilter<T>>> partial(
      static_cast<std::size_t>(B));
  const int dc = vector_input_ ? 2 * d_ : d_;

#pragma omp parallel for schedule(static) if (B > 1)
  for (int b = 0; b < B; ++b) {
    const Tensor<T>& gy = grad_out[b].u;
    const T* xdata =
        vector_input_ ? ctx.packed_input[b].data() : input[b].u.data();
    FieldMap<T>& gx = grad_in[b];
    Tensor<T> gin_packed({ishape.h, ishape.w, dc});

    auto& acc = partial[b];
    acc.resize(F);
    for (auto& a : acc) {
      a.wu = Tensor<T>({m_, m_, d_});
      if (vector_input_) a.wv = Tensor<T>({m_, m_, d_});
    }
    Tensor<T> gw_packed({m_, m_, dc});
    Tensor<T> gwu({m_, m_, d_});
    Tensor<T> gwv = vector_input_ ? Tensor<T>({m_, m_, d_}) : Tensor<T>();

    // Orientation pooling routes each pixel's gradient to one orientation,
    // so the response-gradient planes are sparse and interleaved. Copy each
    // plane into a contiguous buffer once, and skip the orientations that
    // received nothing.
    const std::size_t pixels =
        static_cast<std::size_t>(oshape.h) * oshape.w;
    Tensor<T> plane({oshape.h, oshape.w});
    for (int f = 0; f < F; ++f) {
      for (int r = 0; r < R; ++r) {
        const T* src = gy.data() + static_cast<std::size_t>(f) * R + r;
        bool any = false;
        for (std::size_t px = 0; px < pixels; ++px) {
          const T v = src[px * cs];
          plane[px] = v;
          any |= v != T(0);
        }
        if (!any) continue;
        kernels::conv_backward_input(plane.data(), oshape.h, oshape.w,
                                     std::size_t{1},
                                     ctx.bank->rotated[f][r].data(), m_, pad, 1,
                                     gin_packed.data(), ishape.h, ishape.w, dc,
                                     kernel_parallel);

        gw_packed.fill(T(0));
        kernels::conv_backward_weights(plane.data(), oshape.h, oshape.w,
                                       std::size_t{1}, xdata, ishape.h,
                                       ishape.w, dc, m_, pad, 1,
                                       gw_packed.data(), kernel_parallel);
        const double angle = orientations_.angle(r + 1);
        if (vector_input_) {
          unpack_components(gw_packed, gwu, gwv);
          rotate_vector_filter_adjoint(gwu, gwv, angle, acc[f].wu, acc[f].wv);
        } else {
          rotate_scalar_filter_adjoint(gw_packed, angle, acc[f].wu);
        }
      }
    }

    if (vector_input_) {
      gx.u = Tensor<T>({ishape.h, ishape.w, d_});
      gx.v = Tensor<T>({ishape.h, ishape.w, d_});
      unpack_components(gin_packed, gx.u, gx.v);
    } else {
      gx.u = std::move(gin_packed);
    }
  }

  for (int b = 0; b < B; ++b) {
    for (int f = 0; f < F; ++f) {
      for (std::size_t i = 0; i < grads_[f].wu.size(); ++i)
        grads_[f].wu[i] += partial[b][f].wu[i];
      if (vector_input_)
        for (std::size_t i = 0; i < grads_[f].wv.size(); ++i)
          grads_[f].wv[i] += partial[b][f].wv[i];
    }
  }
  for (int f = 0; f < F; ++f) apply_circular_mask(grads_[f]);
  return grad_in;
}

// ---- OrientationPoolLayer ---------------------------------------------------

namespace {

template <typename T>
struct OrientationPoolNode final : TapeNode<T> {
  // winner: 1-based orientation index per (pixel, filter, bin);
  // response: the winning raw (pre-ReLU) response.
  std::vector<Tensor<std::int32_t>> winner;
  std::vector<Tensor<T>> response;
};

}  // namespace

template <typename T>
OrientationPoolLayer<T>::OrientationPoolLayer(int filter_count,
                                              OrientationSet orientations,
                                              int bins)
    : filter_count_(filter_count), orientations_(orientations), bins_(bins) {
  if (bins_ < 1) throw std::invalid_argument("orientation_pool: bins must be >= 1");
  if (orientations_.count % bins_ != 0)
    throw std::invalid_argument(
        "orientation_pool: bin count must divide the orientation count");
}

template <typename T>
void OrientationPoolLayer<T>::set_orientations(const OrientationSet& o) {
  if (o.count % bins_ != 0)
    throw std::invalid_argument(
        "orientation_pool: bin count must divide the orientation count");
  orientations_ = o;
}

template <typename T>
std::string OrientationPoolLayer<T>::describe() const {
  std::ostringstream out;
  out << "orientation_pool r=" << orientations_.count;
  if (bins_ > 1) out << " bins=" << bins_;
  return out.str();
}

template <typename T>
FieldShape OrientationPoolLayer<T>::infer(const FieldShape& in) const {
  if (in.vec)
    throw std::invalid_argument("orientation_pool: input must be a response map");
  if (in.c != filter_count_ * orientations_.count)
    throw std::invalid_argument(
        "orientation_pool: expected " +
        std::to_string(filter_count_ * orientations_.count) +
        " response channels, got " + std::to_string(in.c));
  return {in.h, in.w, filter_count_ * bins_, true};
}

template <typename T>
FieldBatch<T> OrientationPoolLayer<T>::forward(
    const BatchPtr<T>& in, Mode, const StepInfo&,
    std::unique_ptr<TapeNode<T>>* node) {
  check_batch_not_empty(in, "orientation_pool");
  const int B = static_cast<int>(in->size());
  const FieldShape ishape = in->front().shape();
  const int R = orientations_.count;
  const int F = filter_count_;
  const int arc = R / bins_;
  const int oc = F * bins_;

  FieldBatch<T> out(static_cast<std::size_t>(B));
  auto ctx = node ? std::make_unique<OrientationPoolNode<T>>() : nullptr;
  if (ctx) {
    ctx->winner.resize(static_cast<std::size_t>(B));
    ctx->response.resize(static_cast<std::size_t>(B));
  }

#pragma omp parallel for schedule(static) if (B > 1)
  for (int b = 0; b < B; ++b) {
    const Tensor<T>& y = (*in)[b].u;
    FieldMap<T>& z = out[b];
    z.u = Tensor<T>({ishape.h, ishape.w, oc});
    z.v = Tensor<T>({ishape.h, ishape.w, oc});
    Tensor<std::int32_t> win({ishape.h, ishape.w, oc});
    Tensor<T> resp({ishape.h, ishape.w, oc});
    for (int i = 0; i < ishape.h; ++i) {
      for (int j = 0; j < ishape.w; ++j) {
        const T* yp = &y(i, j, 0);
        for (int f = 0; f < F; ++f) {
          for (int bin = 0; bin < bins_; ++bin) {
            const int r0 = bin * arc;  // 0-based within the filter's R block
            T best = yp[f * R + r0];
            int best_r = r0;
            for (int t = 1; t < arc; ++t) {
              const T val = yp[f * R + r0 + t];
              if (val > best) {
                best = val;
                best_r = r0 + t;
              }
            }
            const int r1 = best_r + 1;  // 1-based orientation index
            double cosd, sind;
            cos_sin_deg(orientations_.angle(r1), cosd, sind);
            const T mag = best > T(0) ? best : T(0);
            const int c = f * bins_ + bin;
            z.u(i, j, c) = mag * static_cast<T>(cosd);
            z.v(i, j, c) = mag * static_cast<T>(sind);
            win(i, j, c) = r1;
            resp(i, j, c) = best;
          }
        }
      }
    }
    if (ctx) {
      ctx->winner[b] = std::move(win);
      ctx->response[b] = std::move(resp);
    }
  }
  if (node) *node = std::move(ctx);
  return out;
}

template <typename T>
FieldBatch<T> OrientationPoolLayer<T>::backward(const FieldBatch<T>& grad_out,
                                                TapeNode<T>& node) {
  auto& ctx = node_as<OrientationPoolNode<T>>(node, "orientation_pool");
  const int B = static_cast<int>(grad_out.size());
  const FieldShape gshape = grad_out.front().shape();
  const int R = orientations_.count;
  const int F = filter_count_;

  FieldBatch<T> grad_in(static_cast<std::size_t>(B));
  // The pooled angle is piecewise constant in the responses, so gradient
  // flows only through the magnitude of the winning orientation, gated by
  // the rectifier.
#pragma omp parallel for schedule(static) if (B > 1)
  for (int b = 0; b < B; ++b) {
    Tensor<T> gy({gshape.h, gshape.w, F * R});
    const FieldMap<T>& g = grad_out[b];
    for (int i = 0; i < gshape.h; ++i)
      for (int j = 0; j < gshape.w; ++j)
        for (int f = 0; f < F; ++f)
          for (int bin = 0; bin < bins_; ++bin) {
            const int c = f * bins_ + bin;
            if (ctx.response[b](i, j, c) <= T(0)) continue;
            const int r1 = ctx.winner[b](i, j, c);
            double cosd, sind;
            cos_sin_deg(orientations_.angle(r1), cosd, sind);
            gy(i, j, f * R + r1 - 1) = g.u(i, j, c) * static_cast<T>(cosd) +
                                       g.v(i, j, c) * static_cast<T>(sind);
          }
    grad_in[b].u = std::move(gy);
  }
  return grad_in;
}

// ---- VectorSpatialPoolLayer -------------------------------------------------

namespace {

template <typename T>
struct SpatialPoolNode final : TapeNode<T> {
  std::vector<Tensor<std::int32_t>> winner;  // flat input pixel per out cell
  FieldShape in_shape;
};

}  // namespace

template <typename T>
VectorSpatialPoolLayer<T>::VectorSpatialPoolLayer(int window)
    : window_(window) {
  if (window_ < 0)
    throw std::invalid_argument("spatial_pool: window must be >= 0");
}

template <typename T>
std::string VectorSpatialPoolLayer<T>::describe() const {
  return window_ == 0 ? "spatial_pool global"
                      : "spatial_pool " + std::to_string(window_) + "x" +
                            std::to_string(window_);
}

template <typename T>
FieldShape VectorSpatialPoolLayer<T>::infer(const FieldShape& in) const {
  if (!in.vec)
    throw std::invalid_argument("spatial_pool: input must be a vector field");
  if (window_ == 0) return {1, 1, in.c, true};
  if (window_ == 1) return in;
  const int oh = (in.h + window_ - 1) / window_;
  const int ow = (in.w + window_ - 1) / window_;
  return {oh, ow, in.c, true};
}

template <typename T>
FieldBatch<T> VectorSpatialPoolLayer<T>::forward(
    const BatchPtr<T>& in, Mode, const StepInfo&,
    std::unique_ptr<TapeNode<T>>* node) {
  check_batch_not_empty(in, "spatial_pool");
  const int B = static_cast<int>(in->size());
  const FieldShape ishape = in->front().shape();
  const FieldShape oshape = infer(ishape);
  const int ph = window_ == 0 ? ishape.h : window_;
  const int pw = window_ == 0 ? ishape.w : window_;

  FieldBatch<T> out(static_cast<std::size_t>(B));
  auto ctx = node ? std::make_unique<SpatialPoolNode<T>>() : nullptr;
  if (ctx) {
    ctx->winner.resize(static_cast<std::size_t>(B));
    ctx->in_shape = ishape;
  }

#pragma omp parallel for schedule(static) if (B > 1)
  for (int b = 0; b < B; ++b) {
    const FieldMap<T>& z = (*in)[b];
    FieldMap<T>& o = out[b];
    o.u = Tensor<T>({oshape.h, oshape.w, oshape.c});
    o.v = Tensor<T>({oshape.h, oshape.w, oshape.c});
    Tensor<std::int32_t> win({oshape.h, oshape.w, oshape.c});
    for (int oi = 0; oi < oshape.h; ++oi) {
      for (int oj = 0; oj < oshape.w; ++oj) {
        for (int c = 0; c < oshape.c; ++c) {
          // Row-major scan with strict improvement keeps the smallest index
          // on magnitude ties. Out-of-range cells are the zero-vector pad.
          T best = T(-1);
          int best_flat = -1;
          for (int wi = 0; wi < ph; ++wi) {
            const int i = oi * ph + wi;
            if (i >= ishape.h) break;
            for (int wj = 0; wj < pw; ++wj) {
              const int j = oj * pw + wj;
              if (j >= ishape.w) break;
              const T uu = z.u(i, j, c);
              const T vv = z.v(i, j, c);
              const T mag2 = uu * uu + vv * vv;
              if (mag2 > best) {
                best = mag2;
                best_flat = i * ishape.w + j;
              }
            }
          }
          const int ii = best_flat / ishape.w;
          const int jj = best_flat % ishape.w;
          o.u(oi, oj, c) = z.u(ii, jj, c);
          o.v(oi, oj, c) = z.v(ii, jj, c);
          win(oi, oj, c) = best_flat;
        }
      }
    }
    if (ctx) ctx->winner[b] = std::move(win);
  }
  if (node) *node = std::move(ctx);
  return out;
}

template <typename T>
FieldBatch<T> VectorSpatialPoolLayer<T>::backward(const FieldBatch<T>& grad_out,
                                                  TapeNode<T>& node) {
  auto& ctx = node_as<SpatialPoolNode<T>>(node, "spatial_pool");
  const int B = static_cast<int>(grad_out.size());
  const FieldShape gshape = grad_out.front().shape();
  const FieldShape ishape = ctx.in_shape;

  FieldBatch<T> grad_in(static_cast<std::size_t>(B));
#pragma omp parallel for schedule(static) if (B > 1)
  for (int b = 0; b < B; ++b) {
    FieldMap<T>& g = grad_in[b];
    g.u = Tensor<T>({ishape.h, ishape.w, ishape.c});
    g.v = Tensor<T>({ishape.h, ishape.w, ishape.c});
    for (int oi = 0; oi < gshape.h; ++oi)
      for (int oj = 0; oj < gshape.w; ++oj)
        for (int c = 0; c < gshape.c; ++c) {
          const int flat = ctx.winner[b](oi, oj, c);
          const int i = flat / ishape.w;
          const int j = flat % ishape.w;
          g.u(i, j, c) += grad_out[b].u(oi, oj, c);
          g.v(i, j, c) += grad_out[b].v(oi, oj, c);
        }
  }
  return grad_in;
}

// ---- VectorBatchNormLayer ---------------------------------------------------

namespace {

template <typename T>
struct VectorBatchNormNode final : TapeNode<T> {
  BatchPtr<T> input;
  Tensor<T> stddev;    // per channel, sqrt(var + eps)
  Tensor<T> mean_rho;  // per channel
};

}  // namespace

template <typename T>
VectorBatchNormLayer<T>::VectorBatchNormLayer(int channels)
    : channels_(channels), running_var_(Tensor<T>::full({channels}, T(1))) {
  if (channels < 1)
    throw std::invalid_argument("vector_batch_norm: need at least one channel");
}

template <typename T>
std::string VectorBatchNormLayer<T>::describe() const {
  return "vector_batch_norm c=" + std::to_string(channels_);
}

template <typename T>
FieldShape VectorBatchNormLayer<T>::infer(const FieldShape& in) const {
  if (!in.vec)
    throw std::invalid_argument("vector_batch_norm: input must be a vector field");
  if (in.c != channels_)
    throw std::invalid_argument("vector_batch_norm: channel mismatch");
  return in;
}

template <typename T>
FieldBatch<T> VectorBatchNormLayer<T>::forward(
    const BatchPtr<T>& in, Mode mode, const StepInfo&,
    std::unique_ptr<TapeNode<T>>* node) {
  check_batch_not_empty(in, "vector_batch_norm");
  const int B = static_cast<int>(in->size());
  const FieldShape ishape = in->front().shape();
  const int C = channels_;
  const std::size_t per_channel =
      static_cast<std::size_t>(B) * ishape.h * ishape.w;

  Tensor<T> stddev({C}), mean({C});
  if (mode == Mode::kTrain) {
    Tensor<double> sums({C}), sqsum({C});
    for (int b = 0; b < B; ++b) {
      const FieldMap<T>& z = (*in)[b];
      for (int i = 0; i < ishape.h; ++i)
        for (int j = 0; j < ishape.w; ++j)
          for (int c = 0; c < C; ++c)
            sums[c] += std::sqrt(static_cast<double>(z.u(i, j, c)) * z.u(i, j, c) +
                                 static_cast<double>(z.v(i, j, c)) * z.v(i, j, c));
    }
    for (int c = 0; c < C; ++c) mean[c] = static_cast<T>(sums[c] / per_channel);
    for (int b = 0; b < B; ++b) {
      const FieldMap<T>& z = (*in)[b];
      for (int i = 0; i < ishape.h; ++i)
        for (int j = 0; j < ishape.w; ++j)
          for (int c = 0; c < C; ++c) {
            const double rho =
                std::sqrt(static_cast<double>(z.u(i, j, c)) * z.u(i, j, c) +
                          static_cast<double>(z.v(i, j, c)) * z.v(i, j, c));
            const double d = rho - mean[c];
            sqsum[c] += d * d;
          }
    }
    for (int c = 0; c < C; ++c) {
      const double var = sqsum[c] / per_channel;
      stddev[c] = static_cast<T>(std::sqrt(var + kEps));
      running_var_[c] = static_cast<T>(kMomentum * running_var_[c] +
                                       (1.0 - kMomentum) * var);
    }
  } else {
    for (int c = 0; c < C; ++c)
      stddev[c] = static_cast<T>(
          std::sqrt(std::max(static_cast<double>(running_var_[c]), 0.0) + kEps));
  }

  FieldBatch<T> out(static_cast<std::size_t>(B));
#pragma omp parallel for schedule(static) if (B > 1)
  for (int b = 0; b < B; ++b) {
    const FieldMap<T>& z = (*in)[b];
    FieldMap<T>& o = out[b];
    o.u = Tensor<T>(z.u.shape());
    o.v = Tensor<T>(z.v.shape());
    for (int i = 0; i < ishape.h; ++i)
      for (int j = 0; j < ishape.w; ++j)
        for (int c = 0; c < C; ++c) {
          o.u(i, j, c) = z.u(i, j, c) / stddev[c];
          o.v(i, j, c) = z.v(i, j, c) / stddev[c];
        }
  }

  if (node) {
    auto ctx = std::make_unique<VectorBatchNormNode<T>>();
    ctx->input = in;
    ctx->stddev = std::move(stddev);
    ctx->mean_rho = std::move(mean);
    *node = std::move(ctx);
  }
  return out;
}

template <typename T>
FieldBatch<T> VectorBatchNormLayer<T>::backward(const FieldBatch<T>& grad_out,
                                                TapeNode<T>& node) {
  auto& ctx = node_as<VectorBatchNormNode<T>>(node, "vector_batch_norm");
  const FieldBatch<T>& input = *ctx.input;
  const int B = static_cast<int>(input.size());
  const FieldShape ishape = input.front().shape();
  const int C = channels_;
  const std::size_t N = static_cast<std::size_t>(B) * ishape.h * ishape.w;

  // d/dz of z / sqrt(var(rho) + eps): the direct term plus the coupling
  // through the batch variance, which only moves along each vector's own
  // direction (angles are untouched by the forward pass).
  Tensor<double> dvar_inner({C});  // sum over batch of <g, z>
  for (int b = 0; b < B; ++b) {
    const FieldMap<T>& z = input[b];
    const FieldMap<T>& g = grad_out[b];
    for (int i = 0; i < ishape.h; ++i)
      for (int j = 0; j < ishape.w; ++j)
        for (int c = 0; c < C; ++c)
          dvar_inner[c] += static_cast<double>(g.u(i, j, c)) * z.u(i, j, c) +
                           static_cast<double>(g.v(i, j, c)) * z.v(i, j, c);
  }

  FieldBatch<T> grad_in(static_cast<std::size_t>(B));
#pragma omp parallel for schedule(static) if (B > 1)
  for (int b = 0; b < B; ++b) {
    const FieldMap<T>& z = input[b];
    const FieldMap<T>& g = grad_out[b];
    FieldMap<T>& gi = grad_in[b];
    gi.u = Tensor<T>(z.u.shape());
    gi.v = Tensor<T>(z.v.shape());
    for (int i = 0; i < ishape.h; ++i)
      for (int j = 0; j < ishape.w; ++j)
        for (int c = 0; c < C; ++c) {
          const double s = ctx.stddev[c];
          const double u = z.u(i, j, c), v = z.v(i, j, c);
          const double rho = std::sqrt(u * u + v * v);
          double cu = 0.0, cv = 0.0;
          if (rho > 0.0) {
            const double common = dvar_inner[c] * (rho - ctx.mean_rho[c]) /
                                  (static_cast<double>(N) * s * s * s);
            cu = common * (u / rho);
            cv = common * (v / rho);
          }
          gi.u(i, j, c) = static_cast<T>(g.u(i, j, c) / s - cu);
          gi.v(i, j, c) = static_cast<T>(g.v(i, j, c) / s - cv);
        }
  }
  return grad_in;
}

// ---- ScalarBatchNormLayer ---------------------------------------------------

namespace {

template <typename T>
struct ScalarBatchNormNode final : TapeNode<T> {
  BatchPtr<T> input;
  Tensor<T> mean;
  Tensor<T> stddev;
};

}  // namespace

template <typename T>
ScalarBatchNormLayer<T>::ScalarBatchNormLayer(int channels)
    : channels_(channels),
      running_mean_(Tensor<T>({channels})),
      running_var_(Tensor<T>::full({channels}, T(1))) {
  if (channels < 1)
    throw std::invalid_argument("scalar_batch_norm: need at least one channel");
}

template <typename T>
std::string ScalarBatchNormLayer<T>::describe() const {
  return "scalar_batch_norm c=" + std::to_string(channels_);
}

template <typename T>
FieldShape ScalarBatchNormLayer<T>::infer(const FieldShape& in) const {
  if (in.vec)
    throw std::invalid_argument("scalar_batch_norm: input must be scalar");
  if (in.c != channels_)
    throw std::invalid_argument("scalar_batch_norm: channel mismatch");
  return in;
}

template <typename T>
FieldBatch<T> ScalarBatchNormLayer<T>::forward(
    const BatchPtr<T>& in, Mode mode, const StepInfo&,
    std::unique_ptr<TapeNode<T>>* node) {
  check_batch_not_empty(in, "scalar_batch_norm");
  const int B = static_cast<int>(in->size());
  const FieldShape ishape = in->front().shape();
  const int C = channels_;
  const std::size_t N = static_cast<std::size_t>(B) * ishape.h * ishape.w;
  constexpr double eps = 1e-5;

  Tensor<T> mean({C}), stddev({C});
  if (mode == Mode::kTrain) {
    Tensor<double> sums({C}), sqsum({C});
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < ishape.h; ++i)
        for (int j = 0; j < ishape.w; ++j)
          for (int c = 0; c < C; ++c) sums[c] += (*in)[b].u(i, j, c);
    for (int c = 0; c < C; ++c) mean[c] = static_cast<T>(sums[c] / N);
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < ishape.h; ++i)
        for (int j = 0; j < ishape.w; ++j)
          for (int c = 0; c < C; ++c) {
            const double d = (*in)[b].u(i, j, c) - mean[c];
            sqsum[c] += d * d;
          }
    for (int c = 0; c < C; ++c) {
      const double var = sqsum[c] / N;
      stddev[c] = static_cast<T>(std::sqrt(var + eps));
      running_mean_[c] = static_cast<T>(0.9 * running_mean_[c] + 0.1 * mean[c]);
      running_var_[c] = static_cast<T>(0.9 * running_var_[c] + 0.1 * var);
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = running_mean_[c];
      stddev[c] = static_cast<T>(
          std::sqrt(std::max(static_cast<double>(running_var_[c]), 0.0) + eps));
    }
  }

  FieldBatch<T> out(static_cast<std::size_t>(B));
#pragma omp parallel for schedule(static) if (B > 1)
  for (int b = 0; b < B; ++b) {
    out[b].u = Tensor<T>((*in)[b].u.shape());
    for (int i = 0; i < ishape.h; ++i)
      for (int j = 0; j < ishape.w; ++j)
        for (int c = 0; c < C; ++c)
          out[b].u(i, j, c) = ((*in)[b].u(i, j, c) - mean[c]) / stddev[c];
  }

  if (node) {
    auto ctx = std::make_unique<ScalarBatchNormNode<T>>();
    ctx->input = in;
    ctx->mean = std::move(mean);
    ctx->stddev = std::move(stddev);
    *node = std::move(ctx);
  }
  return out;
}

template <typename T>
FieldBatch<T> ScalarBatchNormLayer<T>::backward(const FieldBatch<T>& grad_out,
                                                TapeNode<T>& node) {
  auto& ctx = node_as<ScalarBatchNormNode<T>>(node, "scalar_batch_norm");
  const FieldBatch<T>& input = *ctx.input;
  const int B = static_cast<int>(input.size());
  const FieldShape ishape = input.front().shape();
  const int C = channels_;
  const double N = static_cast<double>(B) * ishape.h * ishape.w;

  Tensor<double> gsum({C}), gxsum({C});
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < ishape.h; ++i)
      for (int j = 0; j < ishape.w; ++j)
        for (int c = 0; c < C; ++c) {
          const double xh =
              (input[b].u(i, j, c) - ctx.mean[c]) / ctx.stddev[c];
          gsum[c] += grad_out[b].u(i, j, c);
          gxsum[c] += grad_out[b].u(i, j, c) * xh;
        }

  FieldBatch<T> grad_in(static_cast<std::size_t>(B));
#pragma omp parallel for schedule(static) if (B > 1)
  for (int b = 0; b < B; ++b) {
    grad_in[b].u = Tensor<T>(input[b].u.shape());
    for (int i = 0; i < ishape.h; ++i)
      for (int j = 0; j < ishape.w; ++j)
        for (int c = 0; c < C; ++c) {
          const double xh =
              (input[b].u(i, j, c) - ctx.mean[c]) / ctx.stddev[c];
          grad_in[b].u(i, j, c) = static_cast<T>(
              (grad_out[b].u(i, j, c) - gsum[c] / N - xh * gxsum[c] / N) /
              ctx.stddev[c]);
        }
  }
  return grad_in;
}

// ---- FullyConnectedLayer ----------------------------------------------------

namespace {

template <typename T>
struct FullyConnectedNode final : TapeNode<T> {
  BatchPtr<T> input;
  std::vector<Tensor<T>> flat;  // flattened input per sample
};

}  // namespace

template <typename T>
FullyConnectedLayer<T>::FullyConnectedLayer(int in_dim, int units)
    : in_dim_(in_dim),
      units_(units),
      weights_(Tensor<T>({units, in_dim})),
      bias_(Tensor<T>({units})),
      grad_weights_(Tensor<T>({units, in_dim})),
      grad_bias_(Tensor<T>({units})) {
  if (in_dim < 1 || units < 1)
    throw std::invalid_argument("fully_connected: bad dimensions");
}

template <typename T>
std::string FullyConnectedLayer<T>::describe() const {
  return "fully_connected " + std::to_string(in_dim_) + "->" +
         std::to_string(units_);
}

template <typename T>
FieldShape FullyConnectedLayer<T>::infer(const FieldShape& in) const {
  if (in.h * in.w * in.c != in_dim_)
    throw std::invalid_argument("fully_connected: expected " +
                                std::to_string(in_dim_) + " inputs, got " +
                                field_shape_to_string(in));
  return {1, 1, units_, false};
}

template <typename T>
void FullyConnectedLayer<T>::init(Rng& rng, double sigma) {
  const double s = sigma > 0 ? sigma : std::sqrt(2.0 / in_dim_);
  for (auto& w : weights_) w = static_cast<T>(rng.normal(0.0, s));
  bias_.fill(T(0));
}

template <typename T>
FieldBatch<T> FullyConnectedLayer<T>::forward(
    const BatchPtr<T>& in, Mode, const StepInfo&,
    std::unique_ptr<TapeNode<T>>* node) {
  check_batch_not_empty(in, "fully_connected");
  const int B = static_cast<int>(in->size());
  auto ctx = node ? std::make_unique<FullyConnectedNode<T>>() : nullptr;
  if (ctx) {
    ctx->input = in;
    ctx->flat.resize(static_cast<std::size_t>(B));
  }

  FieldBatch<T> out(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    const FieldMap<T>& x = (*in)[b];
    // Vector fields enter through their channel magnitudes; a pure rotation
    // of the pooled vectors then leaves this layer's output unchanged.
    Tensor<T> flat = x.is_vector() ? magnitude_map(x) : x.u;
    if (static_cast<int>(flat.size()) != in_dim_)
      throw std::invalid_argument("fully_connected: input size mismatch");
    Tensor<T> y({1, 1, units_});
    for (int o = 0; o < units_; ++o) {
      const T* wrow = weights_.data() + static_cast<std::size_t>(o) * in_dim_;
      T acc = bias_[o];
#pragma omp simd reduction(+ : acc)
      for (int k = 0; k < in_dim_; ++k) acc += wrow[k] * flat[k];
      y[o] = acc;
    }
    out[b].u = std::move(y);
    if (ctx) ctx->flat[b] = std::move(flat);
  }
  if (node) *node = std::move(ctx);
  return out;
}

template <typename T>
FieldBatch<T> FullyConnectedLayer<T>::backward(const FieldBatch<T>& grad_out,
                                               TapeNode<T>& node) {
  auto& ctx = node_as<FullyConnectedNode<T>>(node, "fully_connected");
  const FieldBatch<T>& input = *ctx.input;
  const int B = static_cast<int>(input.size());

  FieldBatch<T> grad_in(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    const Tensor<T>& g = grad_out[b].u;
    const Tensor<T>& flat = ctx.flat[b];
    for (int o = 0; o < units_; ++o) {
      const T go = g[o];
      grad_bias_[o] += go;
      T* gw = grad_weights_.data() + static_cast<std::size_t>(o) * in_dim_;
#pragma omp simd
      for (int k = 0; k < in_dim_; ++k) gw[k] += go * flat[k];
    }
    Tensor<T> gflat({in_dim_});
    for (int o = 0; o < units_; ++o) {
      const T go = g[o];
      const T* wrow = weights_.data() + static_cast<std::size_t>(o) * in_dim_;
#pragma omp simd
      for (int k = 0; k < in_dim_; ++k) gflat[k] += go * wrow[k];
    }

    const FieldMap<T>& x = input[b];
    FieldMap<T>& gi = grad_in[b];
    if (x.is_vector()) {
      gi.u = Tensor<T>(x.u.shape());
      gi.v = Tensor<T>(x.v.shape());
      for (std::size_t k = 0; k < x.u.size(); ++k) {
        const T rho = ctx.flat[b][k];
        if (rho > T(0)) {
          gi.u[k] = gflat[k] * x.u[k] / rho;
          gi.v[k] = gflat[k] * x.v[k] / rho;
        }
      }
    } else {
      Tensor<T> shaped(x.u.shape());
      for (std::size_t k = 0; k < shaped.size(); ++k) shaped[k] = gflat[k];
      gi.u = std::move(shaped);
    }
  }
  return grad_in;
}

// ---- ReluLayer ----------------------------------------------------------------

namespace {

template <typename T>
struct ReluNode final : TapeNode<T> {
  BatchPtr<T> input;
};

}  // namespace

template <typename T>
FieldShape ReluLayer<T>::infer(const FieldShape& in) const {
  if (in.vec)
    throw std::invalid_argument(
        "relu: applies to scalar maps (vector fields are rectified inside "
        "orientation pooling)");
  return in;
}

template <typename T>
FieldBatch<T> ReluLayer<T>::forward(const BatchPtr<T>& in, Mode,
                                    const StepInfo&,
                                    std::unique_ptr<TapeNode<T>>* node) {
  check_batch_not_empty(in, "relu");
  FieldBatch<T> out(in->size());
  for (std::size_t b = 0; b < in->size(); ++b)
    out[b].u = relu((*in)[b].u);
  if (node) {
    auto ctx = std::make_unique<ReluNode<T>>();
    ctx->input = in;
    *node = std::move(ctx);
  }
  return out;
}

template <typename T>
FieldBatch<T> ReluLayer<T>::backward(const FieldBatch<T>& grad_out,
                                     TapeNode<T>& node) {
  auto& ctx = node_as<ReluNode<T>>(node, "relu");
  FieldBatch<T> grad_in(grad_out.size());
  for (std::size_t b = 0; b < grad_out.size(); ++b) {
    const Tensor<T>& x = (*ctx.input)[b].u;
    Tensor<T> g(x.shape());
    for (std::size_t k = 0; k < x.size(); ++k)
      g[k] = x[k] > T(0) ? grad_out[b].u[k] : T(0);
    grad_in[b].u = std::move(g);
  }
  return grad_in;
}

// ---- DropoutLayer -------------------------------------------------------------

namespace {

template <typename T>
struct DropoutNode final : TapeNode<T> {
  std::vector<Tensor<T>> mask;  // kept-unit scale, 0 for dropped
};

}  // namespace

template <typename T>
DropoutLayer<T>::DropoutLayer(double rate) : rate_(rate) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("dropout: rate must be in [0, 1)");
}

template <typename T>
std::string DropoutLayer<T>::describe() const {
  std::ostringstream out;
  out << "dropout rate=" << rate_;
  return out.str();
}

template <typename T>
FieldShape DropoutLayer<T>::infer(const FieldShape& in) const {
  if (in.vec) throw std::invalid_argument("dropout: applies to scalar maps");
  return in;
}

template <typename T>
FieldBatch<T> DropoutLayer<T>::forward(const BatchPtr<T>& in, Mode mode,
                                       const StepInfo& step,
                                       std::unique_ptr<TapeNode<T>>* node) {
  check_batch_not_empty(in, "dropout");
  const int B = static_cast<int>(in->size());
  if (mode == Mode::kEval || rate_ == 0.0) {
    FieldBatch<T> out = *in;
    if (node) *node = std::make_unique<EmptyNode<T>>();
    return out;
  }
  if (!step.rng)
    throw std::logic_error("dropout: train-mode forward needs a step rng");

  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate_));
  auto ctx = std::make_unique<DropoutNode<T>>();
  ctx->mask.resize(static_cast<std::size_t>(B));
  FieldBatch<T> out(static_cast<std::size_t>(B));
  const Rng layer_rng =
      step.rng->substream(static_cast<std::uint64_t>(this->index()))
          .substream(step.step);
  for (int b = 0; b < B; ++b) {
    Rng r = layer_rng.substream(static_cast<std::uint64_t>(b));
    const Tensor<T>& x = (*in)[b].u;
    Tensor<T> m(x.shape());
    Tensor<T> y(x.shape());
    for (std::size_t k = 0; k < x.size(); ++k) {
      m[k] = r.bernoulli(rate_) ? T(0) : keep_scale;
      y[k] = x[k] * m[k];
    }
    ctx->mask[b] = std::move(m);
    out[b].u = std::move(y);
  }
  if (node) *node = std::move(ctx);
  return out;
}

template <typename T>
FieldBatch<T> DropoutLayer<T>::backward(const FieldBatch<T>& grad_out,
                                        TapeNode<T>& node) {
  if (dynamic_cast<EmptyNode<T>*>(&node)) return grad_out;
  auto& ctx = node_as<DropoutNode<T>>(node, "dropout");
  FieldBatch<T> grad_in(grad_out.size());
  for (std::size_t b = 0; b < grad_out.size(); ++b)
    grad_in[b].u = mul(grad_out[b].u, ctx.mask[b]);
  return grad_in;
}

// ---- SoftmaxHeadLayer ----------------------------------------------------------

template <typename T>
FieldShape SoftmaxHeadLayer<T>::infer(const FieldShape& in) const {
  if (in.vec || in.h != 1 || in.w != 1)
    throw std::invalid_argument("softmax_head: input must be a 1x1 scalar map");
  return in;
}

template <typename T>
FieldBatch<T> SoftmaxHeadLayer<T>::forward(const BatchPtr<T>& in, Mode,
                                           const StepInfo&,
                                           std::unique_ptr<TapeNode<T>>* node) {
  check_batch_not_empty(in, "softmax_head");
  FieldBatch<T> out(in->size());
  for (std::size_t b = 0; b < in->size(); ++b) {
    const Tensor<T>& logits = (*in)[b].u;
    Tensor<T> p(logits.shape());
    T mx = logits[0];
    for (std::size_t k = 1; k < logits.size(); ++k)
      mx = std::max(mx, logits[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
      p[k] = static_cast<T>(std::exp(static_cast<double>(logits[k] - mx)));
      z += p[k];
    }
    for (std::size_t k = 0; k < p.size(); ++k)
      p[k] = static_cast<T>(p[k] / z);
    out[b].u = std::move(p);
  }
  if (node) *node = std::make_unique<EmptyNode<T>>();
  return out;
}

template <typename T>
FieldBatch<T> SoftmaxHeadLayer<T>::backward(const FieldBatch<T>& grad_out,
                                            TapeNode<T>&) {
  // The cross-entropy loss supplies its gradient directly in logit space
  // (probs - onehot); the softmax Jacobian is already folded in there.
  return grad_out;
}

// ---- CovariantHeadLayer --------------------------------------------------------

namespace {

template <typename T>
struct CovariantHeadNode final : TapeNode<T> {
  std::vector<Tensor<T>> tanh_resp;
  std::vector<T> c, s, norm;
};

}  // namespace

template <typename T>
CovariantHeadLayer<T>::CovariantHeadLayer(OrientationSet orientations)
    : orientations_(orientations) {}

template <typename T>
FieldShape CovariantHeadLayer<T>::infer(const FieldShape& in) const {
  if (in.vec || in.h != 1 || in.w != 1)
    throw std::invalid_argument(
        "covariant_head: input must be the 1x1 orientation response vector");
  if (in.c != orientations_.count)
    throw std::invalid_argument("covariant_head: expected " +
                                std::to_string(orientations_.count) +
                                " responses, got " + std::to_string(in.c));
  return {1, 1, 2, false};
}

template <typename T>
FieldBatch<T> CovariantHeadLayer<T>::forward(
    const BatchPtr<T>& in, Mode, const StepInfo&,
    std::unique_ptr<TapeNode<T>>* node) {
  check_batch_not_empty(in, "covariant_head");
  const int B = static_cast<int>(in->size());
  const int R = orientations_.count;

  auto ctx = node ? std::make_unique<CovariantHeadNode<T>>() : nullptr;
  if (ctx) {
    ctx->tanh_resp.resize(static_cast<std::size_t>(B));
    ctx->c.resize(static_cast<std::size_t>(B));
    ctx->s.resize(static_cast<std::size_t>(B));
    ctx->norm.resize(static_cast<std::size_t>(B));
  }

  FieldBatch<T> out(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    const Tensor<T>& resp = (*in)[b].u;
    Tensor<T> t(resp.shape());
    double cacc = 0.0, sacc = 0.0, tmag = 0.0;
    for (int r = 1; r <= R; ++r) {
      double cr, sr;
      cos_sin_deg(orientations_.angle(r), cr, sr);
      const double tv = std::tanh(static_cast<double>(resp[r - 1]));
      t[r - 1] = static_cast<T>(tv);
      cacc += tv * cr;
      sacc += tv * sr;
      tmag += std::abs(tv);
    }
    const double n = std::sqrt(cacc * cacc + sacc * sacc);
    // A symmetric response pattern contracts to the zero vector; there is
    // no defensible angle to report, so surface it instead of perturbing.
    const double degenerate =
        100.0 * std::numeric_limits<T>::epsilon() * std::max(tmag, 1e-300);
    if (n <= degenerate)
      throw std::runtime_error(
          "covariant_head: zero-norm output, the orientation responses carry "
          "no direction");
    Tensor<T> o({1, 1, 2});
    o[0] = static_cast<T>(cacc / n);
    o[1] = static_cast<T>(sacc / n);
    out[b].u = std::move(o);
    if (ctx) {
      ctx->tanh_resp[b] = std::move(t);
      ctx->c[b] = static_cast<T>(cacc);
      ctx->s[b] = static_cast<T>(sacc);
      ctx->norm[b] = static_cast<T>(n);
    }
  }
  if (node) *node = std::move(ctx);
  return out;
}

template <typename T>
FieldBatch<T> CovariantHeadLayer<T>::backward(const FieldBatch<T>& grad_out,
                                              TapeNode<T>& node) {
  auto& ctx = node_as<CovariantHeadNode<T>>(node, "covariant_head");
  const int B = static_cast<int>(grad_out.size());
  const int R = orientations_.count;

  FieldBatch<T> grad_in(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    const double gc_out = grad_out[b].u[0];
    const double gs_out = grad_out[b].u[1];
    const double c = ctx.c[b], s = ctx.s[b], n = ctx.norm[b];
    // Through q / |q|: J = (I - qq^T/|q|^2) / |q|.
    const double qdotg = c * gc_out + s * gs_out;
    const double gc = gc_out / n - c * qdotg / (n * n * n);
    const double gs = gs_out / n - s * qdotg / (n * n * n);

    Tensor<T> gy({1, 1, R});
    for (int r = 1; r <= R; ++r) {
      double cr, sr;
      cos_sin_deg(orientations_.angle(r), cr, sr);
      const double t = ctx.tanh_resp[b][r - 1];
      gy[r - 1] = static_cast<T>((gc * cr + gs * sr) * (1.0 - t * t));
    }
    grad_in[b].u = std::move(gy);
  }
  return grad_in;
}

// ---- explicit instantiations -------------------------------------------------

#define ROTEQNET_INSTANTIATE_LAYERS(T)            \
  template Tensor<T> magnitude_map<T>(const FieldMap<T>&); \
  template FieldMap<T> rotate_field_map<T>(const FieldMap<T>&, double); \
  template class RotConvLayer<T>;                 \
  template class OrientationPoolLayer<T>;         \
  template class VectorSpatialPoolLayer<T>;       \
  template class VectorBatchNormLayer<T>;         \
  template class ScalarBatchNormLayer<T>;         \
  template class FullyConnectedLayer<T>;          \
  template class ReluLayer<T>;                    \
  template class DropoutLayer<T>;                 \
  template class SoftmaxHeadLayer<T>;             \
  template class CovariantHeadLayer<T>;

ROTEQNET_INSTANTIATE_LAYERS(float)
ROTEQNET_INSTANTIATE_LAYERS(double)
#undef ROTEQNET_INSTANTIATE_LAYERS

}  // namespace roteqnet
