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
#ifndef ROTEQNET_NETWORK_HPP_
#define ROTEQNET_NETWORK_HPP_

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "roteqnet/layers.hpp"

namespace roteqnet {

enum class LossKind { kCrossEntropy, kUnitVectorL2 };

/// One block in the declarative architecture description.
struct LayerSpec {
  enum class Kind {
    kRotConv,
    kSpatialPool,
    kVectorBatchNorm,
    kScalarBatchNorm,
    kFullyConnected,
    kDropout,
    kRelu,
    kSoftmaxHead,
    kCovariantHead,
  };
  Kind kind = Kind::kRotConv;
  int filters = 0;       // rotconv: canonical filter count
  int size = 0;          // rotconv: filter extent m (odd)
  bool same_pad = true;  // rotconv: m/2 zero padding vs none
  bool with_op = false;  // rotconv: followed by orientation pooling
  int bins = 1;          // orientation pooling arcs (must divide R)
  int window = 0;        // spatial pool: p, 0 pools the full extent
  int units = 0;         // fully connected
  double rate = 0.0;     // dropout
};

struct NetworkSpec {
  FieldShape input;  // scalar image shape, c = channels
  std::vector<LayerSpec> layers;
  LossKind loss = LossKind::kCrossEntropy;
  int orientation_count = 17;  // R, shared by all rotconv blocks
  double init_sigma = 0.0;     // > 0: N(0, sigma) init; else fan-in scaled
  std::uint64_t seed = 1;

  /// Shape-checks the whole chain (throws naming the offending layer) and
  /// returns the head output shape.
  FieldShape validate() const;

  /// Canonical text form; stable across runs, embedded in checkpoints.
  std::string to_text() const;
  static NetworkSpec from_text(const std::string& text);
};

/// The largest classification architecture: three rotating-convolution
/// blocks with orientation pooling and spatial pooling, then a dense head.
/// `filters_multiplier` scales the filter counts for model-size sweeps.
NetworkSpec preset_mnist_table2(int r, double filters_multiplier,
                                std::uint64_t seed);
/// Orientation-regression architecture on 48x48 inputs with a full-extent
/// rotating-convolution layer and the fixed trigonometric head.
NetworkSpec preset_covariant48(int r, std::uint64_t seed);
/// Lookup by name ("mnist-table2", "covariant-48").
NetworkSpec preset_by_name(const std::string& name, int r,
                           double filters_multiplier, std::uint64_t seed);

/// Recorded forward pass: one saved-activation node per layer. A tape is
/// consumed by exactly one backward pass.
template <typename T>
struct Tape {
  std::vector<std::unique_ptr<TapeNode<T>>> nodes;
  bool consumed = false;
};

template <typename T>
class Model {
 public:
  /// Allocates and initialises parameters (seeded from spec.seed), applies
  /// the circular filter masks. Throws on an invalid spec.
  static Model build(const NetworkSpec& spec);

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const NetworkSpec& spec() const { return spec_; }
  std::size_t parameter_count() const;

  /// Runs the network on a batch. In train mode `tape` must be non-null and
  /// dropout draws from step.rng; eval mode uses running statistics and
  /// identity dropout. A non-finite activation raises an error naming the
  /// layer that produced it.
  FieldBatch<T> forward(const BatchPtr<T>& in, Mode mode, Tape<T>* tape,
                        const StepInfo& step = {});

  /// Reverse pass from the head gradient; accumulates parameter gradients.
  void backward(Tape<T>& tape, const FieldBatch<T>& head_grad);

  void zero_gradients();
  /// p <- p - lr * (g + weight_decay * p); filters re-masked afterwards.
  /// momentum > 0 applies the update through a velocity buffer.
  void sgd_step(double lr, double weight_decay, double momentum = 0.0);

  std::vector<Tensor<T>*> parameters();
  std::vector<Tensor<T>*> gradients();
  std::vector<Tensor<T>*> state();
  void project();

  /// Swaps every orientation set for one with `r` angles (full circle).
  /// Parameter storage is independent of R, so a trained model can be
  /// evaluated at a different orientation resolution.
  void override_orientations(int r);

  int layer_count() const { return static_cast<int>(layers_.size()); }
  Layer<T>* layer(int i) { return layers_[static_cast<std::size_t>(i)].get(); }

  /// Training progress, persisted in checkpoints so runs can resume with
  /// continuous epoch numbering.
  int epoch = 0;

  void save(const std::string& path) const;
  static Model load(const std::string& path);

 private:
  Model() = default;
  NetworkSpec spec_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  std::vector<Tensor<T>> velocity_;
};

/// Copies of a model's learnable parameters and persistent state, tagged
/// with the spec so averaging across mismatched models is rejected.
template <typename T>
struct WeightSnapshot {
  std::string spec_text;
  std::vector<Tensor<T>> params;
  std::vector<Tensor<T>> state;
};

template <typename T>
WeightSnapshot<T> take_snapshot(Model<T>& model);

/// Arithmetic mean of the snapshots written into `model`; circular masks
/// re-applied. Errors on an empty list or on spec/shape mismatch.
template <typename T>
void apply_average(Model<T>& model, const std::vector<WeightSnapshot<T>>& snaps);

// ---- losses -------------------------------------------------------------------

/// Mean cross-entropy of softmax head outputs against integer labels.
/// When `grad` is non-null it receives the gradient in logit space,
/// (p - onehot)/batch, which is what SoftmaxHeadLayer::backward expects.
/// Labels outside [0, classes) are an error.
template <typename T>
double softmax_cross_entropy(const FieldBatch<T>& probs,
                             const std::vector<int>& labels,
                             FieldBatch<T>* grad);

/// Mean 0.5 * |output - target|^2 between the (cos, sin) head output and
/// unit-vector targets; `grad` receives (output - target)/batch.
template <typename T>
double unit_vector_l2(const FieldBatch<T>& outputs,
                      const std::vector<std::pair<double, double>>& targets,
                      FieldBatch<T>* grad);

}  // namespace roteqnet

#endif  // ROTEQNET_NETWORK_HPP_
