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
#ifndef ROTEQNET_CHECKS_HPP_
#define ROTEQNET_CHECKS_HPP_

#include <cstdint>
#include <string>
#include <vector>

namespace roteqnet {

/// Outcome of one self-check property. `pass` is measured <= tolerance.
struct PropertyResult {
  std::string name;
  double measured = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct CheckConfig {
  /// Orientation counts for the exact quarter-turn family (multiples of 4).
  std::vector<int> quarter_r = {4, 8};
  std::uint64_t seed = 0x20e9a5eedULL;
  /// Test hook: negates the rotation adjoint inside the adjoint property,
  /// which must make that check fail (negative control for the harness).
  bool sabotage_realign = false;
  /// Include the finite-difference and generic-angle families (64-bit only).
  bool include_gradients = true;
};

/// Runs the structural property suite on randomly generated instances:
/// exact quarter-turn equivariance/invariance/covariance, adjoint
/// dot-product identities, pooling/normalisation identities, approximate
/// equivariance at 17 orientations, and central finite-difference checks of
/// every backward rule. Self-contained; no external data.
template <typename T>
std::vector<PropertyResult> run_property_checks(const CheckConfig& cfg);

/// One line per property: "PASS|FAIL <name> measured=<v> tol=<v>".
std::string format_property_report(const std::vector<PropertyResult>& results);

bool all_passed(const std::vector<PropertyResult>& results);

}  // namespace roteqnet

#endif  // ROTEQNET_CHECKS_HPP_
