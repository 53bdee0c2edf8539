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
#include <limits>

#include "doctest.h"
#include "oracles.hpp"
#include "roteqnet/conv2d.hpp"
#include "roteqnet/rng.hpp"
#include "roteqnet/tensor.hpp"

using namespace roteqnet;

namespace {

template <typename T>
Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1, double hi = 1) {
  Tensor<T> t(std::move(shape));
  for (auto& x : t) x = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("conv2d scalar product on 1x1") {
  Tensor<double> in({1, 1}, {2.0});
  Tensor<double> f({1, 1}, {3.0});
  Tensor<double> out = conv2d(in, f, 0);
  CHECK(out.size() == 1);
  CHECK(out(0, 0) == 6.0);
}

TEST_CASE("conv2d all-ones 3x3 with same padding") {
  Tensor<double> in = Tensor<double>::full({3, 3}, 1.0);
  Tensor<double> f = Tensor<double>::full({3, 3}, 1.0);
  Tensor<double> out = conv2d(in, f, 1);
  CHECK(out(1, 1) == 9.0);
  CHECK(out(0, 0) == 4.0);
  CHECK(out(0, 2) == 4.0);
  CHECK(out(2, 0) == 4.0);
  CHECK(out(2, 2) == 4.0);
  Tensor<double> expect = oracles::conv2d(in, f, 1);
  CHECK(oracles::max_abs_diff(out, expect) == 0.0);
}

TEST_CASE("conv2d convention pinned by the delta image") {
  // Cross-correlation (no filter flip): a centred delta reproduces the
  // 180-degree-flipped filter, out[i][j] = f[2-i][2-j].
  Tensor<double> delta({3, 3});
  delta(1, 1) = 1.0;
  Rng rng(11);
  Tensor<double> f = random_tensor<double>(rng, {3, 3});
  Tensor<double> out = conv2d(delta, f, 1);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(out(i, j) == f(2 - i, 2 - j));
  CHECK(oracles::max_abs_diff(out, oracles::conv2d(delta, f, 1)) == 0.0);
}

TEST_CASE("conv2d oracle agreement on random instances") {
  Rng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    const int h = 2 + static_cast<int>(rng.uniform_int(7));
    const int w = 2 + static_cast<int>(rng.uniform_int(7));
    const int c = 1 + static_cast<int>(rng.uniform_int(3));
    const int m = 1 + 2 * static_cast<int>(rng.uniform_int(2));
    if (m > h || m > w) continue;
    const int pad = static_cast<int>(rng.uniform_int(m / 2 + 1));
    Tensor<double> in = random_tensor<double>(rng, {h, w, c});
    Tensor<double> f = random_tensor<double>(rng, {m, m, c});
    CHECK(oracles::max_abs_diff(conv2d(in, f, pad),
                                oracles::conv2d(in, f, pad)) < 1e-13);
  }
}

TEST_CASE("conv2d rejects bad arguments") {
  Tensor<double> in({4, 4, 2});
  Tensor<double> f({3, 3, 3});
  CHECK_THROWS_WITH_AS(conv2d(in, f, 1),
                       doctest::Contains("channel mismatch"),
                       std::invalid_argument);
  Tensor<double> ok({3, 3, 2});
  CHECK_THROWS_AS(conv2d(in, ok, 1, 0), std::invalid_argument);   // stride 0
  CHECK_THROWS_AS(conv2d(in, ok, 1, -2), std::invalid_argument);  // negative
}

TEST_CASE("conv2d backward input: zero, scaling, finite differences") {
  Rng rng(31);
  Tensor<double> zero_grad({4, 4});
  Tensor<double> f1({1, 1}, {2.5});
  Tensor<double> gin = conv2d_backward_input(zero_grad, f1, {4, 4}, 0);
  for (double v : gin) CHECK(v == 0.0);

  // 1x1 filter [[c]]: input gradient is c * grad_out.
  Tensor<double> g = random_tensor<double>(rng, {4, 4});
  gin = conv2d_backward_input(g, f1, {4, 4}, 0);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(gin[i] == 2.5 * g[i]);

  // Central finite differences on a random 5x5 / 3x3 case.
  Tensor<double> x = random_tensor<double>(rng, {5, 5, 2});
  Tensor<double> w = random_tensor<double>(rng, {3, 3, 2});
  Tensor<double> probe = random_tensor<double>(rng, {5, 5});
  Tensor<double> analytic = conv2d_backward_input(probe, w, x.shape(), 1);
  const double h = 1e-6;
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t k = rng.uniform_int(x.size());
    const double saved = x[k];
    x[k] = saved + h;
    const double lp = dot(conv2d(x, w, 1), probe);
    x[k] = saved - h;
    const double lm = dot(conv2d(x, w, 1), probe);
    x[k] = saved;
    const double numeric = (lp - lm) / (2 * h);
    CHECK(std::abs(numeric - analytic[k]) <=
          1e-6 * std::max({std::abs(numeric), std::abs(analytic[k]), 1.0}));
  }
}

TEST_CASE("conv2d backward weights: zero, direct summation, finite differences") {
  Rng rng(41);
  Tensor<double> x = Tensor<double>::full({4, 4}, 0.7);
  Tensor<double> zero({4, 4});
  Tensor<double> gw = conv2d_backward_weights(zero, x, 3, 1);
  for (double v : gw) CHECK(v == 0.0);

  // Constant input and constant gradient: each weight-gradient entry is
  // (number of valid window positions) * (product of the constants).
  Tensor<double> g = Tensor<double>::full({4, 4}, 2.0);
  gw = conv2d_backward_weights(g, x, 3, 1);
  Tensor<double> expect = oracles::conv2d_weight_grad(g, x, 3, 1);
  CHECK(oracles::max_abs_diff(gw, expect) < 1e-12);
  // Centre tap sees all 16 positions; the top-left tap loses one row+col.
  CHECK(gw(1, 1) == doctest::Approx(16 * 2.0 * 0.7));
  CHECK(gw(0, 0) == doctest::Approx(9 * 2.0 * 0.7));

  Tensor<double> xr = random_tensor<double>(rng, {5, 5, 2});
  Tensor<double> w = random_tensor<double>(rng, {3, 3, 2});
  Tensor<double> probe = random_tensor<double>(rng, {5, 5});
  Tensor<double> analytic = conv2d_backward_weights(probe, xr, 3, 1);
  const double h = 1e-6;
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t k = rng.uniform_int(w.size());
    const double saved = w[k];
    w[k] = saved + h;
    const double lp = dot(conv2d(xr, w, 1), probe);
    w[k] = saved - h;
    const double lm = dot(conv2d(xr, w, 1), probe);
    w[k] = saved;
    const double numeric = (lp - lm) / (2 * h);
    CHECK(std::abs(numeric - analytic[k]) <=
          1e-6 * std::max({std::abs(numeric), std::abs(analytic[k]), 1.0}));
  }
}

TEST_CASE("conv2d adjoint dot-product identities") {
  Rng rng(51);
  Tensor<double> x = random_tensor<double>(rng, {6, 5, 3});
  Tensor<double> w = random_tensor<double>(rng, {3, 3, 3});
  Tensor<double> y = conv2d(x, w, 1);
  Tensor<double> g = random_tensor<double>(rng, y.shape());
  const double d1 = dot(y, g);
  const double d2 = dot(x, conv2d_backward_input(g, w, x.shape(), 1));
  const double d3 = dot(w, conv2d_backward_weights(g, x, 3, 1));
  CHECK(std::abs(d1 - d2) <= 1e-10 * std::abs(d1));
  CHECK(std::abs(d1 - d3) <= 1e-10 * std::abs(d1));
}

TEST_CASE("conv2d linearity") {
  Rng rng(61);
  Tensor<double> x = random_tensor<double>(rng, {6, 6});
  Tensor<double> y = random_tensor<double>(rng, {6, 6});
  Tensor<double> w = random_tensor<double>(rng, {3, 3});
  const double a = 1.7, b = -0.4;
  Tensor<double> mix(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) mix[i] = a * x[i] + b * y[i];
  Tensor<double> lhs = conv2d(mix, w, 1);
  Tensor<double> cx = conv2d(x, w, 1);
  Tensor<double> cy = conv2d(y, w, 1);
  double scale = 0.0, diff = 0.0;
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    scale = std::max(scale, std::abs(lhs[i]));
    diff = std::max(diff, std::abs(lhs[i] - (a * cx[i] + b * cy[i])));
  }
  CHECK(diff <= 1e-12 * scale);
}

TEST_CASE("openmp kernels match the serial reference") {
  Rng rng(71);
  for (int trial = 0; trial < 8; ++trial) {
    const int h = 5 + static_cast<int>(rng.uniform_int(6));
    const int w = 5 + static_cast<int>(rng.uniform_int(6));
    const int c = 1 + static_cast<int>(rng.uniform_int(4));
    const int m = 3;
    Tensor<double> in = random_tensor<double>(rng, {h, w, c});
    Tensor<double> f = random_tensor<double>(rng, {m, m, c});
    Tensor<double> fast({h, w}), slow({h, w});
    kernels::conv_forward(in.data(), h, w, c, f.data(), m, 1, 1, fast.data(),
                          h, w, std::size_t{1}, false, true);
    serial_ref::conv_forward(in.data(), h, w, c, f.data(), m, 1, 1,
                             slow.data(), h, w, std::size_t{1}, false);
    CHECK(oracles::max_abs_diff(fast, slow) < 1e-12);

    Tensor<double> g = random_tensor<double>(rng, {h, w});
    Tensor<double> gin_fast({h, w, c}), gin_slow({h, w, c});
    kernels::conv_backward_input(g.data(), h, w, std::size_t{1}, f.data(), m,
                                 1, 1, gin_fast.data(), h, w, c, true);
    serial_ref::conv_backward_input(g.data(), h, w, std::size_t{1}, f.data(),
                                    m, 1, 1, gin_slow.data(), h, w, c);
    CHECK(oracles::max_abs_diff(gin_fast, gin_slow) < 1e-12);

    Tensor<double> gw_fast({m, m, c}), gw_slow({m, m, c});
    kernels::conv_backward_weights(g.data(), h, w, std::size_t{1}, in.data(),
                                   h, w, c, m, 1, 1, gw_fast.data(), true);
    serial_ref::conv_backward_weights(g.data(), h, w, std::size_t{1},
                                      in.data(), h, w, c, m, 1, 1,
                                      gw_slow.data());
    CHECK(oracles::max_abs_diff(gw_fast, gw_slow) < 1e-12);
  }
}

TEST_CASE("elementwise operations") {
  Tensor<double> a({3}, {-3.0, 0.0, 2.0});
  Tensor<double> r = relu(a);
  CHECK(r[0] == 0.0);
  CHECK(r[1] == 0.0);
  CHECK(r[2] == 2.0);

  Tensor<double> b({3}, {1.0, 2.0, 3.0});
  Tensor<double> s = add(a, b);
  CHECK(s[0] == -2.0);
  Tensor<double> m = mul(a, b);
  CHECK(m[2] == 6.0);
  CHECK(scale(b, 2.0)[1] == 4.0);
  CHECK(add(b, 0.5)[0] == 1.5);
  CHECK(roteqnet::tanh(Tensor<double>({1}, {0.0}))[0] == 0.0);
  CHECK(roteqnet::sqrt(Tensor<double>({1}, {4.0}))[0] == 2.0);
  CHECK(sum(b) == 6.0);

  Tensor<double> wrong({2}, {1.0, 2.0});
  CHECK_THROWS_AS(add(a, wrong), std::invalid_argument);
}

TEST_CASE("non-finite results are reported") {
  const double inf = std::numeric_limits<double>::infinity();
  Tensor<double> a({1}, {inf});
  Tensor<double> b({1}, {-inf});
  CHECK_THROWS_AS(add(a, b), std::runtime_error);  // inf - inf -> NaN
  CHECK_THROWS_AS(roteqnet::sqrt(Tensor<double>({1}, {-1.0})),
                  std::runtime_error);
}

TEST_CASE("max_with_argmax takes the smallest index on ties") {
  Tensor<double> a({4}, {0.5, 2.0, 2.0, 0.3});
  auto r = max_with_argmax(a, 0);
  CHECK(r.values[0] == 2.0);
  CHECK(r.argmax[0] == 1);

  Tensor<double> b({2, 3}, {1, 5, 2, 7, 0, 7});
  auto rows = max_with_argmax(b, 1);
  CHECK(rows.values[0] == 5.0);
  CHECK(rows.argmax[0] == 1);
  CHECK(rows.values[1] == 7.0);
  CHECK(rows.argmax[1] == 0);

  Tensor<double> empty({0});
  CHECK_THROWS_AS(max_with_argmax(empty, 0), std::invalid_argument);
}

TEST_CASE("variance") {
  Tensor<double> ones({3}, {1.0, 1.0, 1.0});
  CHECK(variance(ones, {0})[0] == 0.0);

  Tensor<double> m({2, 2}, {1.0, 3.0, 5.0, 7.0});
  Tensor<double> rows = variance(m, {1});
  CHECK(rows[0] == doctest::Approx(1.0));
  CHECK(rows[1] == doctest::Approx(1.0));
  Tensor<double> all = variance(m, {0, 1});
  CHECK(all[0] == doctest::Approx(5.0));
  CHECK_THROWS_AS(variance(m, {}), std::invalid_argument);
}

TEST_CASE("rng streams are deterministic and splittable") {
  Rng a(12345), b(12345);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng base(9);
  Rng s1 = base.substream("weights");
  Rng s2 = base.substream("weights");
  Rng s3 = base.substream("dropout");
  CHECK(s1.next_u64() == s2.next_u64());
  Rng s1b = base.substream("weights");
  CHECK(s1b.next_u64() != s3.next_u64());

  Rng n(7);
  double mean = 0;
  for (int i = 0; i < 10000; ++i) mean += n.normal();
  CHECK(std::abs(mean / 10000) < 0.05);
}

}  // TEST_SUITE
