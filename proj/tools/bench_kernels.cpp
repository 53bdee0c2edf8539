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

// Times the OpenMP convolution kernels against the serial reference
// implementations on the layer geometries the networks actually run, and
// cross-checks that both paths agree.

#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <vector>

#include "roteqnet/conv2d.hpp"
#include "roteqnet/rng.hpp"

using namespace roteqnet;

namespace {

struct Case {
  const char* name;
  int h, w, c, m, filters;  // filters = rotated-filter count convolved
};

template <typename F>
double time_ms(F&& fn, int reps) {
  fn();  // warm up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void run_case(const Case& c, Rng& rng) {
  const int pad = c.m / 2;
  std::vector<float> in(static_cast<std::size_t>(c.h) * c.w * c.c);
  std::vector<float> filters(static_cast<std::size_t>(c.filters) * c.m * c.m * c.c);
  std::vector<float> out_omp(static_cast<std::size_t>(c.h) * c.w * c.filters);
  std::vector<float> out_ref(out_omp.size());
  for (auto& x : in) x = static_cast<float>(rng.uniform(-1, 1));
  for (auto& x : filters) x = static_cast<float>(rng.uniform(-1, 1));

  const double flops =
      2.0 * c.h * c.w * c.m * c.m * c.c * c.filters;  // interior estimate
  const int reps = std::max(1, static_cast<int>(2e8 / flops));

  const double ms_omp = time_ms(
      [&] {
        for (int f = 0; f < c.filters; ++f)
          kernels::conv_forward(in.data(), c.h, c.w, c.c,
                                filters.data() + static_cast<std::size_t>(f) *
                                                     c.m * c.m * c.c,
                                c.m, pad, 1, out_omp.data() + f, c.h, c.w,
                                static_cast<std::size_t>(c.filters), false,
                                true);
      },
      reps);
  const double ms_ref = time_ms(
      [&] {
        for (int f = 0; f < c.filters; ++f)
          serial_ref::conv_forward(in.data(), c.h, c.w, c.c,
                                   filters.data() + static_cast<std::size_t>(f) *
                                                        c.m * c.m * c.c,
                                   c.m, pad, 1, out_ref.data() + f, c.h, c.w,
                                   static_cast<std::size_t>(c.filters), false);
      },
      reps);

  double max_diff = 0.0;
  for (std::size_t i = 0; i < out_omp.size(); ++i)
    max_diff = std::max(max_diff,
                        std::abs(static_cast<double>(out_omp[i]) - out_ref[i]));

  std::printf("%-28s %8.3f ms %7.2f GF/s | serial %8.3f ms %7.2f GF/s | x%.2f  max|diff| %.2e\n",
              c.name, ms_omp, flops / ms_omp / 1e6, ms_ref,
              flops / ms_ref / 1e6, ms_ref / ms_omp, max_diff);
}

}  // namespace

int main() {
  std::printf("threads: %d\n", omp_get_max_threads());
  std::printf("%-28s %23s | %25s |\n", "case (forward conv bank)", "openmp",
              "serial reference");
  Rng rng(42);
  const Case cases[] = {
      {"28x28x1  9x9   6x17 filt", 28, 28, 1, 9, 6 * 17},
      {"14x14x12 9x9  16x17 filt", 14, 14, 12, 9, 16 * 17},
      {"7x7x32   9x9  32x17 filt", 7, 7, 32, 9, 32 * 17},
      {"48x48x1  11x11 3x21 filt", 48, 48, 1, 11, 3 * 21},
      {"28x28x12 11x11 3x21 filt", 28, 28, 12, 11, 3 * 21},
  };
  for (const Case& c : cases) run_case(c, rng);
  return 0;
}
