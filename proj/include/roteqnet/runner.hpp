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
#ifndef ROTEQNET_RUNNER_HPP_
#define ROTEQNET_RUNNER_HPP_

#include <string>
#include <vector>

#include "roteqnet/data.hpp"
#include "roteqnet/network.hpp"

namespace roteqnet {

struct TrainConfig {
  int epochs = 90;
  double lr_start = 0.1;
  double lr_end = 0.001;
  double weight_decay = 0.01;
  int batch = 128;
  double momentum = 0.0;  // plain SGD unless configured
  /// Weight averaging window: final model averages the last k epoch
  /// snapshots (0 = off).
  int average_last = 0;

  void validate() const;
  /// Geometric decay from lr_start (first epoch) to lr_end (last epoch).
  double lr_at(int epoch_index, int total_epochs) const;
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double train_err = 0;  // classification: error fraction; covariant: mean deg
  double val_err = 0;
  double wall_seconds = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  int best_epoch = -1;
  double best_val_err = 0;
};

/// Runs the SGD loop on `model` (resuming from model.epoch). When out_dir
/// is non-empty, appends one row per epoch to out_dir/metrics.csv and keeps
/// checkpoint-best.ckpt / checkpoint-final.ckpt up to date. Deterministic:
/// shuffling and dropout derive from `run_seed` and the epoch/step indices.
template <typename T>
TrainResult train_model(Model<T>& model, const DatasetSplit<T>& data,
                        const TrainConfig& cfg, const std::string& out_dir,
                        std::uint64_t run_seed);

struct EvalReport {
  int n = 0;
  double error_rate = 0.0;          // classification
  double mean_angular_error = 0.0;  // degrees
  double frac_below_15 = 0.0;
  double frac_above_150 = 0.0;
};

/// Classification error rate; tta_k > 1 averages the softmax scores over
/// tta_k input rotations evenly spaced in [0, 90] degrees (endpoints
/// included). max_samples == 0 means the whole list.
template <typename T>
EvalReport evaluate_classifier(Model<T>& model,
                               const std::vector<Sample<T>>& samples,
                               int tta_k = 1, int max_samples = 0,
                               int batch = 256);

/// Mean angular error (degrees, wrapped to [0, 180]) plus the error
/// histogram fractions below 15 and above 150 degrees.
template <typename T>
EvalReport evaluate_covariant(Model<T>& model,
                              const std::vector<Sample<T>>& samples,
                              int max_samples = 0, int batch = 256);

/// Predicted class per sample.
template <typename T>
std::vector<int> predict_classes(Model<T>& model,
                                 const std::vector<Sample<T>>& samples,
                                 int tta_k = 1, int max_samples = 0,
                                 int batch = 256);

/// Fraction of samples whose predicted class is identical across the four
/// quarter-turn rotations of the input.
template <typename T>
double rotation_invariance_rate(Model<T>& model,
                                const std::vector<Sample<T>>& samples,
                                int max_samples = 0, int batch = 256);

/// Averaged softmax scores over k rotated copies of one image (angles
/// evenly spaced in [0, 90] including both endpoints; k = 1 is the plain
/// prediction). Errors when k < 1.
template <typename T>
Tensor<T> test_time_augment(Model<T>& model, const Tensor<T>& image, int k);

/// Softmax scores for one image (k = 1 path of the above).
template <typename T>
Tensor<T> predict_scores(Model<T>& model, const Tensor<T>& image);

/// Predicted angle in degrees ([0, 360)) from the covariant head.
template <typename T>
double predict_angle(Model<T>& model, const Tensor<T>& image);

/// |a - b| wrapped into [0, 180] degrees.
double angular_difference(double a_deg, double b_deg);

}  // namespace roteqnet

#endif  // ROTEQNET_RUNNER_HPP_
