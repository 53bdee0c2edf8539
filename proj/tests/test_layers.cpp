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
#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "roteqnet/conv2d.hpp"
#include "roteqnet/layers.hpp"
#include "roteqnet/rng.hpp"

using namespace roteqnet;

namespace {

template <typename T>
BatchPtr<T> one(FieldMap<T> f) {
  FieldBatch<T> b(1);
  b[0] = std::move(f);
  return std::make_shared<const FieldBatch<T>>(std::move(b));
}

template <typename T>
FieldMap<T> scalar_map(Shape shape, std::vector<T> values) {
  FieldMap<T> f;
  f.u = Tensor<T>(std::move(shape), std::move(values));
  return f;
}

const StepInfo kNoStep{};

}  // namespace

TEST_SUITE("layers") {

TEST_CASE("orientation pooling converts the best response to a vector") {
  OrientationPoolLayer<double> op(1, OrientationSet::full_circle(4));
  auto in = one(scalar_map<double>({1, 1, 4}, {0.5, 2.0, -1.0, 0.3}));
  FieldBatch<double> z = op.forward(in, Mode::kEval, kNoStep, nullptr);
  // Best response 2.0 at the second orientation, angle 180.
  CHECK(z[0].u(0, 0, 0) == -2.0);
  CHECK(z[0].v(0, 0, 0) == 0.0);

  // All responses negative: the rectifier zeroes the vector.
  auto neg = one(scalar_map<double>({1, 1, 4}, {-0.5, -2.0, -1.0, -0.3}));
  FieldBatch<double> zn = op.forward(neg, Mode::kEval, kNoStep, nullptr);
  CHECK(zn[0].u(0, 0, 0) == 0.0);
  CHECK(zn[0].v(0, 0, 0) == 0.0);

  // All equal and positive: ties take the smallest orientation (angle 90).
  auto tie = one(scalar_map<double>({1, 1, 4}, {0.7, 0.7, 0.7, 0.7}));
  FieldBatch<double> zt = op.forward(tie, Mode::kEval, kNoStep, nullptr);
  CHECK(zt[0].u(0, 0, 0) == 0.0);
  CHECK(zt[0].v(0, 0, 0) == 0.7);
}

TEST_CASE("orientation pooling agrees with the direct-evaluation oracle") {
  Rng rng(100);
  OrientationPoolLayer<double> op(3, OrientationSet::full_circle(5));
  FieldMap<double> y;
  y.u = Tensor<double>({4, 6, 15});
  for (auto& v : y.u) v = rng.uniform(-1, 1);
  FieldBatch<double> z = op.forward(one(y), Mode::kEval, kNoStep, nullptr);
  FieldMap<double> expect = oracles::orientation_pool(y.u, 3, 5);
  CHECK(oracles::max_abs_diff(z[0].u, expect.u) < 1e-14);
  CHECK(oracles::max_abs_diff(z[0].v, expect.v) < 1e-14);

  // Cross-check the winner bookkeeping against the generic reduction.
  Tensor<double> grouped({4 * 6 * 3, 5});
  std::size_t q = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j)
      for (int f = 0; f < 3; ++f)
        for (int r = 0; r < 5; ++r) grouped[q++] = y.u(i, j, f * 5 + r);
  auto reduced = max_with_argmax(grouped, 1);
  q = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j)
      for (int f = 0; f < 3; ++f, ++q) {
        const double mag = std::hypot(z[0].u(i, j, f), z[0].v(i, j, f));
        const double expect_mag = std::max(reduced.values[q], 0.0);
        CHECK(mag == doctest::Approx(expect_mag).epsilon(1e-12));
      }
}

TEST_CASE("orientation pooling backward gates on the winner") {
  OrientationPoolLayer<double> op(1, OrientationSet::full_circle(4));
  std::unique_ptr<TapeNode<double>> node;

  // Winner has angle 360 (cos 1, sin 0): gradient equals grad u exactly.
  auto in = one(scalar_map<double>({1, 1, 4}, {0.5, 2.0, -1.0, 3.0}));
  op.forward(in, Mode::kTrain, kNoStep, &node);
  FieldBatch<double> g(1);
  g[0].u = Tensor<double>({1, 1, 1}, {1.25});
  g[0].v = Tensor<double>({1, 1, 1}, {0.5});
  FieldBatch<double> gy = op.backward(g, *node);
  CHECK(gy[0].u(0, 0, 3) == 1.25);
  CHECK(gy[0].u(0, 0, 0) == 0.0);
  CHECK(gy[0].u(0, 0, 1) == 0.0);

  // Rectified-away pixels propagate nothing.
  auto neg = one(scalar_map<double>({1, 1, 4}, {-1.0, -2.0, -0.5, -3.0}));
  op.forward(neg, Mode::kTrain, kNoStep, &node);
  FieldBatch<double> gz = op.backward(g, *node);
  for (double v : gz[0].u) CHECK(v == 0.0);
}

TEST_CASE("multi-bin orientation pooling") {
  const OrientationSet o4 = OrientationSet::full_circle(4);
  Rng rng(101);

  // One bin is the plain pooling.
  OrientationPoolLayer<double> op1(2, o4, 1);
  OrientationPoolLayer<double> op(2, o4);
  FieldMap<double> y;
  y.u = Tensor<double>({3, 3, 8});
  for (auto& v : y.u) v = rng.uniform(-1, 1);
  FieldBatch<double> a = op1.forward(one(y), Mode::kEval, kNoStep, nullptr);
  FieldBatch<double> b = op.forward(one(y), Mode::kEval, kNoStep, nullptr);
  CHECK(oracles::max_abs_diff(a[0].u, b[0].u) == 0.0);
  CHECK(oracles::max_abs_diff(a[0].v, b[0].v) == 0.0);

  // bins == R: every orientation becomes its own rectified vector.
  OrientationPoolLayer<double> opr(1, o4, 4);
  auto yr = scalar_map<double>({1, 1, 4}, {0.5, -0.2, 0.9, 0.1});
  FieldBatch<double> zr = opr.forward(one(yr), Mode::kEval, kNoStep, nullptr);
  for (int r = 1; r <= 4; ++r) {
    double c, s;
    cos_sin_deg(o4.angle(r), c, s);
    const double mag = std::max(yr.u[r - 1], 0.0);
    CHECK(zr[0].u(0, 0, r - 1) == doctest::Approx(mag * c));
    CHECK(zr[0].v(0, 0, r - 1) == doctest::Approx(mag * s));
  }

  // R=4, two bins, y = [3,1,2,5]: arc winners 3 (angle 90) and 5 (angle 360).
  OrientationPoolLayer<double> op2(1, o4, 2);
  auto y2 = scalar_map<double>({1, 1, 4}, {3.0, 1.0, 2.0, 5.0});
  FieldBatch<double> z2 = op2.forward(one(y2), Mode::kEval, kNoStep, nullptr);
  CHECK(z2[0].u(0, 0, 0) == 0.0);
  CHECK(z2[0].v(0, 0, 0) == 3.0);
  CHECK(z2[0].u(0, 0, 1) == 5.0);
  CHECK(z2[0].v(0, 0, 1) == 0.0);

  // Oracle agreement including bins.
  FieldMap<double> yo;
  yo.u = Tensor<double>({2, 5, 8});
  for (auto& v : yo.u) v = rng.uniform(-1, 1);
  OrientationPoolLayer<double> opo(2, o4, 2);
  FieldBatch<double> zo = opo.forward(one(yo), Mode::kEval, kNoStep, nullptr);
  FieldMap<double> eo = oracles::orientation_pool(yo.u, 2, 4, 2);
  CHECK(oracles::max_abs_diff(zo[0].u, eo.u) < 1e-14);
  CHECK(oracles::max_abs_diff(zo[0].v, eo.v) < 1e-14);

  // The bin count must divide R.
  CHECK_THROWS_AS(OrientationPoolLayer<double>(1, o4, 3),
                  std::invalid_argument);
}

TEST_CASE("vector spatial pooling keeps the strongest vector") {
  VectorSpatialPoolLayer<double> pool(2);
  FieldMap<double> z;
  z.u = Tensor<double>({2, 2, 1}, {1.0, 0.0, 2.0, 0.0});
  z.v = Tensor<double>({2, 2, 1}, {0.0, 3.0, 0.0, 0.0});
  // Vectors (1,0), (0,3), (2,0), (0,0): magnitudes 1, 3, 2, 0.
  FieldBatch<double> out = pool.forward(one(z), Mode::kEval, kNoStep, nullptr);
  CHECK(out[0].u(0, 0, 0) == 0.0);
  CHECK(out[0].v(0, 0, 0) == 3.0);

  // All-zero field: the first window position wins the tie.
  std::unique_ptr<TapeNode<double>> node;
  FieldMap<double> zero;
  zero.u = Tensor<double>({2, 2, 1});
  zero.v = Tensor<double>({2, 2, 1});
  FieldBatch<double> oz = pool.forward(one(zero), Mode::kTrain, kNoStep, &node);
  CHECK(oz[0].u(0, 0, 0) == 0.0);
  FieldBatch<double> g(1);
  g[0].u = Tensor<double>({1, 1, 1}, {1.0});
  g[0].v = Tensor<double>({1, 1, 1}, {2.0});
  FieldBatch<double> gin = pool.backward(g, *node);
  CHECK(gin[0].u(0, 0, 0) == 1.0);  // routed to index 0
  CHECK(gin[0].v(0, 0, 0) == 2.0);
  CHECK(gin[0].u(0, 1, 0) == 0.0);

  // Window 1 is the identity.
  VectorSpatialPoolLayer<double> id(1);
  FieldBatch<double> same = id.forward(one(z), Mode::kEval, kNoStep, nullptr);
  CHECK(oracles::max_abs_diff(same[0].u, z.u) == 0.0);
  CHECK(oracles::max_abs_diff(same[0].v, z.v) == 0.0);
}

TEST_CASE("vector spatial pooling pads with zero vectors and matches the oracle") {
  Rng rng(102);
  VectorSpatialPoolLayer<double> pool(2);
  FieldMap<double> z;
  z.u = Tensor<double>({5, 5, 2});
  z.v = Tensor<double>({5, 5, 2});
  for (auto& v : z.u) v = rng.uniform(-1, 1);
  for (auto& v : z.v) v = rng.uniform(-1, 1);
  FieldBatch<double> out = pool.forward(one(z), Mode::kEval, kNoStep, nullptr);
  CHECK(out[0].u.extent(0) == 3);
  FieldMap<double> expect = oracles::vector_spatial_pool(z, 2);
  CHECK(oracles::max_abs_diff(out[0].u, expect.u) == 0.0);
  CHECK(oracles::max_abs_diff(out[0].v, expect.v) == 0.0);

  // Global pooling reduces to 1x1.
  VectorSpatialPoolLayer<double> global(0);
  FieldBatch<double> g = global.forward(one(z), Mode::kEval, kNoStep, nullptr);
  CHECK(g[0].u.extent(0) == 1);
  FieldMap<double> eg = oracles::vector_spatial_pool(z, 5);
  CHECK(oracles::max_abs_diff(g[0].u, eg.u) == 0.0);
}

TEST_CASE("vector batch norm scales magnitudes to unit variance") {
  VectorBatchNormLayer<double> bn(1);
  // Two vectors with magnitudes 1 and 5: mean 3, variance 4.
  FieldBatch<double> batch(2);
  batch[0].u = Tensor<double>({1, 1, 1}, {1.0});
  batch[0].v = Tensor<double>({1, 1, 1}, {0.0});
  batch[1].u = Tensor<double>({1, 1, 1}, {3.0});
  batch[1].v = Tensor<double>({1, 1, 1}, {4.0});
  auto in = std::make_shared<const FieldBatch<double>>(batch);
  FieldBatch<double> out = bn.forward(in, Mode::kTrain, kNoStep, nullptr);
  // Variance 4: all vectors halved, up to epsilon.
  CHECK(out[0].u(0, 0, 0) == doctest::Approx(0.5).epsilon(1e-5));
  CHECK(out[1].u(0, 0, 0) == doctest::Approx(1.5).epsilon(1e-5));
  CHECK(out[1].v(0, 0, 0) == doctest::Approx(2.0).epsilon(1e-5));

  // All-zero vectors stay zero.
  FieldBatch<double> zeros(2);
  for (auto& f : zeros) {
    f.u = Tensor<double>({2, 2, 1});
    f.v = Tensor<double>({2, 2, 1});
  }
  auto zin = std::make_shared<const FieldBatch<double>>(zeros);
  FieldBatch<double> zout = bn.forward(zin, Mode::kTrain, kNoStep, nullptr);
  for (const auto& f : zout)
    for (double v : f.u) CHECK(v == 0.0);

  CHECK_THROWS_AS(
      bn.forward(std::make_shared<const FieldBatch<double>>(), Mode::kTrain,
                 kNoStep, nullptr),
      std::invalid_argument);
}

TEST_CASE("vector batch norm matches the oracle and preserves angles") {
  Rng rng(103);
  VectorBatchNormLayer<double> bn(3);
  FieldBatch<double> batch(4);
  for (auto& f : batch) {
    f.u = Tensor<double>({3, 3, 3});
    f.v = Tensor<double>({3, 3, 3});
    for (auto& v : f.u) v = rng.uniform(-2, 2);
    for (auto& v : f.v) v = rng.uniform(-2, 2);
  }
  auto in = std::make_shared<const FieldBatch<double>>(batch);
  FieldBatch<double> out = bn.forward(in, Mode::kTrain, kNoStep, nullptr);
  auto expect = oracles::vector_batch_norm(batch);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    CHECK(oracles::max_abs_diff(out[b].u, expect[b].u) < 1e-12);
    CHECK(oracles::max_abs_diff(out[b].v, expect[b].v) < 1e-12);
    for (std::size_t k = 0; k < out[b].u.size(); ++k)
      CHECK(std::atan2(out[b].v[k], out[b].u[k]) ==
            doctest::Approx(std::atan2(batch[b].v[k], batch[b].u[k]))
                .epsilon(1e-12));
  }
}

TEST_CASE("vector batch norm applied twice is nearly idempotent") {
  // With per-channel magnitude variance exactly 1 the second pass divides
  // by sqrt(1/(1+eps) + eps) = 1 + O(eps^2).
  VectorBatchNormLayer<double> bn(1);
  FieldBatch<double> batch(2);
  batch[0].u = Tensor<double>({1, 1, 1}, {1.0});
  batch[0].v = Tensor<double>({1, 1, 1}, {0.0});
  batch[1].u = Tensor<double>({1, 1, 1}, {0.0});
  batch[1].v = Tensor<double>({1, 1, 1}, {3.0});
  auto in = std::make_shared<const FieldBatch<double>>(batch);
  FieldBatch<double> once = bn.forward(in, Mode::kTrain, kNoStep, nullptr);
  auto once_ptr = std::make_shared<const FieldBatch<double>>(once);
  VectorBatchNormLayer<double> bn2(1);
  FieldBatch<double> twice = bn2.forward(once_ptr, Mode::kTrain, kNoStep, nullptr);
  for (std::size_t b = 0; b < once.size(); ++b) {
    CHECK(oracles::max_abs_diff(twice[b].u, once[b].u) < 1e-6);
    CHECK(oracles::max_abs_diff(twice[b].v, once[b].v) < 1e-6);
  }
}

TEST_CASE("rotconv with a centre-only filter responds identically at all orientations") {
  Rng rng(104);
  // The centre cell is the resampler's fixed point: at quarter turns the
  // rotated instances are bit-identical, so all response maps coincide.
  const int r = 4;
  RotConvLayer<double> conv(1, 3, 1, false, OrientationSet::full_circle(r), true);
  conv.filters()[0].wu.fill(0.0);
  conv.filters()[0].wu(1, 1, 0) = 0.8;

  FieldMap<double> x;
  x.u = Tensor<double>({6, 6, 1});
  for (auto& v : x.u) v = rng.uniform(-1, 1);
  FieldBatch<double> y = conv.forward(one(x), Mode::kEval, kNoStep, nullptr);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j)
      for (int k = 1; k < r; ++k) CHECK(y[0].u(i, j, k) == y[0].u(i, j, 0));

  // At generic angles the maps agree up to the small interpolation bleed
  // around the centre cell.
  RotConvLayer<double> conv6(1, 3, 1, false, OrientationSet::full_circle(6), true);
  conv6.filters()[0].wu.fill(0.0);
  conv6.filters()[0].wu(1, 1, 0) = 0.8;
  FieldBatch<double> y6 = conv6.forward(one(x), Mode::kEval, kNoStep, nullptr);
  for (int i = 1; i < 5; ++i)
    for (int j = 1; j < 5; ++j)
      for (int k = 1; k < 6; ++k)
        CHECK(std::abs(y6[0].u(i, j, k) - y6[0].u(i, j, 0)) < 0.8 * 0.09 * 8);
}

TEST_CASE("rotconv on a degenerate vector field reduces to the scalar convolution") {
  Rng rng(105);
  RotConvLayer<double> conv(1, 3, 1, true, OrientationSet(1, 0, 360), true);
  conv.filters()[0].wu = Tensor<double>({3, 3, 1});
  for (auto& v : conv.filters()[0].wu) v = rng.uniform(-1, 1);
  apply_circular_mask(conv.filters()[0].wu);
  conv.filters()[0].wv.fill(0.0);

  FieldMap<double> z;
  z.u = Tensor<double>({5, 5, 1});
  z.v = Tensor<double>({5, 5, 1});
  for (auto& v : z.u) v = rng.uniform(-1, 1);

  FieldBatch<double> y = conv.forward(one(z), Mode::kEval, kNoStep, nullptr);
  Tensor<double> xin({5, 5});
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) xin(i, j) = z.u(i, j, 0);
  Tensor<double> win({3, 3});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) win(i, j) = conv.filters()[0].wu(i, j, 0);
  Tensor<double> expect = conv2d(xin, win, 1);
  // The vector path packs (u, v) channels into one summation, so the
  // reduction tree differs from the scalar convolution by rounding only.
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j)
      CHECK(y[0].u(i, j, 0) ==
            doctest::Approx(expect(i, j)).epsilon(1e-14));
}

TEST_CASE("rotconv edge response follows the edge orientation") {
  // Vertical edge image; a left-right contrast filter responds most
  // strongly at the orientation aligned with the edge, and rotating the
  // image a quarter turn advances the winning orientation by R/4.
  const int n = 9, r = 4;
  FieldMap<double> x;
  x.u = Tensor<double>({n, n, 1});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) x.u(i, j, 0) = j >= n / 2 ? 1.0 : 0.0;

  RotConvLayer<double> conv(1, 3, 1, false, OrientationSet::full_circle(r), true);
  conv.filters()[0].wu.fill(0.0);
  for (int i = 0; i < 3; ++i) {
    conv.filters()[0].wu(i, 0, 0) = -1.0;
    conv.filters()[0].wu(i, 2, 0) = 1.0;
  }
  apply_circular_mask(conv.filters()[0].wu);

  auto dominant = [&](const FieldMap<double>& img) {
    FieldBatch<double> y = conv.forward(one(img), Mode::kEval, kNoStep, nullptr);
    double best = -1e300;
    int best_r = -1;
    for (int k = 0; k < r; ++k) {
      double total = 0;
      for (int i = 2; i < n - 2; ++i)
        for (int j = 2; j < n - 2; ++j) total += y[0].u(i, j, k);
      if (total > best) {
        best = total;
        best_r = k;
      }
    }
    return best_r;
  };

  const int base = dominant(x);
  const int rotated = dominant(rotate_field_map(x, 90.0));
  CHECK((base + 1) % r == rotated);
}

TEST_CASE("rotconv backward reduces to the plain convolution adjoints at R=1") {
  Rng rng(106);
  RotConvLayer<double> conv(1, 3, 2, false, OrientationSet(1, 0, 360), true);
  conv.init(rng, 0.0);

  FieldMap<double> x;
  x.u = Tensor<double>({5, 5, 2});
  for (auto& v : x.u) v = rng.uniform(-1, 1);

  std::unique_ptr<TapeNode<double>> node;
  conv.forward(one(x), Mode::kTrain, kNoStep, &node);

  FieldBatch<double> g(1);
  g[0].u = Tensor<double>({5, 5, 1});
  for (auto& v : g[0].u) v = rng.uniform(-1, 1);

  for (Tensor<double>* gr : conv.gradients()) gr->fill(0.0);
  FieldBatch<double> gin = conv.backward(g, *node);

  Tensor<double> gplane({5, 5});
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) gplane(i, j) = g[0].u(i, j, 0);
  Tensor<double> expect_in =
      conv2d_backward_input(gplane, conv.filters()[0].wu, x.u.shape(), 1);
  CHECK(oracles::max_abs_diff(gin[0].u, expect_in) == 0.0);

  Tensor<double> expect_w = conv2d_backward_weights(gplane, x.u, 3, 1);
  apply_circular_mask(expect_w);
  CHECK(oracles::max_abs_diff(*conv.gradients()[0], expect_w) == 0.0);

  // Zero head gradient produces zero everywhere.
  conv.forward(one(x), Mode::kTrain, kNoStep, &node);
  for (Tensor<double>* gr : conv.gradients()) gr->fill(0.0);
  g[0].u.fill(0.0);
  FieldBatch<double> gz = conv.backward(g, *node);
  for (double v : gz[0].u) CHECK(v == 0.0);
  for (double v : *conv.gradients()[0]) CHECK(v == 0.0);
}

TEST_CASE("rotconv rejects invalid construction") {
  CHECK_THROWS_AS(
      RotConvLayer<double>(1, 4, 1, false, OrientationSet::full_circle(4), true),
      std::invalid_argument);  // even filter size
  RotConvLayer<double> conv(1, 3, 2, false, OrientationSet::full_circle(4), true);
  FieldShape wrong{8, 8, 3, false};
  CHECK_THROWS_WITH_AS(conv.infer(wrong), doctest::Contains("channel mismatch"),
                       std::invalid_argument);
  FieldShape vec{8, 8, 2, true};
  CHECK_THROWS_AS(conv.infer(vec), std::invalid_argument);
}

TEST_CASE("scalar heads") {
  // Uniform logits: cross entropy is ln(classes) for any label.
  SoftmaxHeadLayer<double> softmax;
  auto logits = one(scalar_map<double>({1, 1, 10}, std::vector<double>(10, 0.3)));
  FieldBatch<double> probs = softmax.forward(logits, Mode::kEval, kNoStep, nullptr);
  for (double p : probs[0].u) CHECK(p == doctest::Approx(0.1));

  // Dropout with rate zero is the identity even in train mode.
  DropoutLayer<double> drop(0.0);
  Rng rng(107);
  StepInfo step{0, &rng};
  auto x = one(scalar_map<double>({1, 1, 4}, {1.0, -2.0, 3.0, 0.5}));
  FieldBatch<double> dout = drop.forward(x, Mode::kTrain, step, nullptr);
  CHECK(oracles::max_abs_diff(dout[0].u, (*x)[0].u) == 0.0);

  // Dropout keeps roughly (1-rate) of units, scaled by 1/(1-rate).
  DropoutLayer<double> d7(0.7);
  d7.set_index(2);
  FieldMap<double> big;
  big.u = Tensor<double>::full({1, 1, 2000}, 1.0);
  FieldBatch<double> kept = d7.forward(one(big), Mode::kTrain, step, nullptr);
  int alive = 0;
  for (double v : kept[0].u) {
    if (v != 0.0) {
      CHECK(v == doctest::Approx(1.0 / 0.3));
      ++alive;
    }
  }
  CHECK(alive > 450);
  CHECK(alive < 750);
  // Eval mode is the identity.
  FieldBatch<double> ev = d7.forward(one(big), Mode::kEval, kNoStep, nullptr);
  CHECK(oracles::max_abs_diff(ev[0].u, big.u) == 0.0);

  // Identity weights, zero bias: a pure passthrough.
  FullyConnectedLayer<double> fc(3, 3);
  fc.weights().fill(0.0);
  for (int i = 0; i < 3; ++i) fc.weights()(i, i) = 1.0;
  fc.bias().fill(0.0);
  auto xi = one(scalar_map<double>({1, 1, 3}, {0.3, -1.0, 2.0}));
  FieldBatch<double> fout = fc.forward(xi, Mode::kEval, kNoStep, nullptr);
  CHECK(fout[0].u[0] == 0.3);
  CHECK(fout[0].u[1] == -1.0);
  CHECK(fout[0].u[2] == 2.0);
}

TEST_CASE("fully connected reads vector fields through their magnitudes") {
  FullyConnectedLayer<double> fc(2, 1);
  fc.weights().fill(1.0);
  fc.bias().fill(0.0);
  FieldMap<double> z;
  z.u = Tensor<double>({1, 1, 2}, {3.0, 0.0});
  z.v = Tensor<double>({1, 1, 2}, {4.0, 0.1});
  FieldBatch<double> out = fc.forward(one(z), Mode::kEval, kNoStep, nullptr);
  CHECK(out[0].u[0] == doctest::Approx(5.0 + 0.1));

  // Rotating every vector in place leaves the output unchanged.
  FieldMap<double> rot;
  rot.u = Tensor<double>({1, 1, 2}, {-4.0, -0.1});
  rot.v = Tensor<double>({1, 1, 2}, {3.0, 0.0});
  FieldBatch<double> out2 = fc.forward(one(rot), Mode::kEval, kNoStep, nullptr);
  CHECK(out2[0].u[0] == doctest::Approx(out[0].u[0]));
}

TEST_CASE("covariant head maps a one-hot response to its orientation") {
  const int r = 8;
  CovariantHeadLayer<double> head(OrientationSet::full_circle(r));
  for (int hot = 1; hot <= r; hot += 3) {
    Tensor<double> resp({1, 1, r});
    resp[hot - 1] = 25.0;  // tanh saturates to ~1
    FieldBatch<double> out =
        head.forward(one(FieldMap<double>::scalar(resp)), Mode::kEval, kNoStep,
                     nullptr);
    double c, s;
    cos_sin_deg(OrientationSet::full_circle(r).angle(hot), c, s);
    CHECK(out[0].u[0] == doctest::Approx(c).epsilon(1e-9));
    CHECK(out[0].u[1] == doctest::Approx(s).epsilon(1e-9));
  }

  // A fully symmetric response has no direction: hard error.
  Tensor<double> flat = Tensor<double>::full({1, 1, r}, 0.4);
  CHECK_THROWS_AS(head.forward(one(FieldMap<double>::scalar(flat)), Mode::kEval,
                               kNoStep, nullptr),
                  std::runtime_error);
}

TEST_CASE("covariant head rotates with a circular shift of the responses") {
  const int r = 8;
  CovariantHeadLayer<double> head(OrientationSet::full_circle(r));
  Rng rng(108);
  Tensor<double> resp({1, 1, r});
  for (auto& v : resp) v = rng.uniform(-1, 1);
  resp[2] += 1.5;  // a clear direction

  auto angle_of = [&](const Tensor<double>& in) {
    FieldBatch<double> out = head.forward(
        one(FieldMap<double>::scalar(in)), Mode::kEval, kNoStep, nullptr);
    double a = std::atan2(out[0].u[1], out[0].u[0]) * 180.0 / M_PI;
    return a < 0 ? a + 360.0 : a;
  };

  const double base = angle_of(resp);
  for (int k = 1; k < r; k += 2) {
    Tensor<double> shifted({1, 1, r});
    for (int i = 0; i < r; ++i) shifted[(i + k) % r] = resp[i];
    double expect = std::fmod(base + k * 360.0 / r, 360.0);
    double got = angle_of(shifted);
    double d = std::fmod(std::abs(got - expect), 360.0);
    if (d > 180.0) d = 360.0 - d;
    CHECK(d < 1e-9);
  }
}

}  // TEST_SUITE
