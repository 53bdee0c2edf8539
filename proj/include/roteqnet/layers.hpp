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
#ifndef ROTEQNET_LAYERS_HPP_
#define ROTEQNET_LAYERS_HPP_

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "roteqnet/field.hpp"
#include "roteqnet/rng.hpp"
#include "roteqnet/rotation.hpp"

namespace roteqnet {

enum class Mode { kTrain, kEval };

/// Saved forward values one layer needs for its backward rule. One node per
/// layer per recorded forward pass; the chain of nodes is the tape.
template <typename T>
struct TapeNode {
  virtual ~TapeNode() = default;
};

/// Per-step context threaded through a forward pass: the step index and the
/// generator dropout substreams derive from. Both may be unset in eval mode.
struct StepInfo {
  std::uint64_t step = 0;
  const Rng* rng = nullptr;
};

/// A network building block with a forward and a backward rule. Layers hold
/// their learnable parameters and the gradient accumulators the backward
/// pass fills; saved activations live on the tape, not in the layer, so a
/// layer object itself stays read-only during forward/backward except for
/// batch-norm running statistics (train mode, single writer).
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string describe() const = 0;

  /// Output shape for a given input shape; throws on a shape that does not
  /// compose.
  virtual FieldShape infer(const FieldShape& in) const = 0;

  /// `node` receives the saved-activation record when non-null (training);
  /// eval-mode callers pass nullptr and no state is recorded.
  virtual FieldBatch<T> forward(const BatchPtr<T>& in, Mode mode,
                                const StepInfo& step,
                                std::unique_ptr<TapeNode<T>>* node) = 0;

  /// Consumes the node produced by the matching forward call; returns the
  /// gradient with respect to the layer input and accumulates parameter
  /// gradients into the layer's buffers.
  virtual FieldBatch<T> backward(const FieldBatch<T>& grad_out,
                                 TapeNode<T>& node) = 0;

  virtual std::vector<Tensor<T>*> parameters() { return {}; }
  virtual std::vector<Tensor<T>*> gradients() { return {}; }
  /// Non-learnable persistent state (batch-norm running statistics).
  virtual std::vector<Tensor<T>*> state() { return {}; }

  /// sigma > 0 draws every weight from N(0, sigma); sigma <= 0 uses the
  /// default fan-in scaled initialisation.
  virtual void init(Rng& rng, double sigma) { (void)rng, (void)sigma; }

  /// Re-applies structural constraints after a parameter update (circular
  /// filter masks).
  virtual void project() {}

  void set_index(int i) { index_ = i; }
  int index() const { return index_; }

 protected:
  int index_ = -1;  // position in the network, for error messages and rng tags
};

// ---------------------------------------------------------------------------

/// Convolution of the input with rotated instances of each stored canonical
/// filter. Produces, per filter, one response map per orientation, packed as
/// a scalar field of F*R channels (orientation index fastest). Scalar inputs
/// convolve directly; vector-field inputs convolve per Cartesian component
/// with the component-remixed rotated filters and sum.
template <typename T>
class RotConvLayer : public Layer<T> {
 public:
  RotConvLayer(int filter_count, int filter_size, int in_channels,
               bool vector_input, OrientationSet orientations, bool same_pad);

  std::string describe() const override;
  FieldShape infer(const FieldShape& in) const override;
  FieldBatch<T> forward(const BatchPtr<T>& in, Mode mode, const StepInfo& step,
                        std::unique_ptr<TapeNode<T>>* node) override;
  FieldBatch<T> backward(const FieldBatch<T>& grad_out,
                         TapeNode<T>& node) override;
  std::vector<Tensor<T>*> parameters() override;
  std::vector<Tensor<T>*> gradients() override;
  void init(Rng& rng, double sigma) override;
  void project() override;

  int filter_count() const { return static_cast<int>(filters_.size()); }
  int filter_size() const { return m_; }
  const OrientationSet& orientations() const { return orientations_; }
  void set_orientations(const OrientationSet& o) { orientations_ = o; }
  std::vector<CanonicalFilter<T>>& filters() { return filters_; }

 private:
  std::vector<CanonicalFilter<T>> filters_;
  std::vector<CanonicalFilter<T>> grads_;
  OrientationSet orientations_;
  int m_;
  int d_;
  bool vector_input_;
  bool same_pad_;
};

/// Reduces the per-filter orientation responses at every pixel to a single
/// 2D vector: magnitude is the rectified maximal response, angle is the
/// angle of the maximising orientation. With bins > 1 the orientations are
/// partitioned into contiguous arcs pooled independently, one output vector
/// channel per (filter, arc). Ties take the smallest orientation index.
template <typename T>
class OrientationPoolLayer : public Layer<T> {
 public:
  OrientationPoolLayer(int filter_count, OrientationSet orientations,
                       int bins = 1);

  std::string describe() const override;
  FieldShape infer(const FieldShape& in) const override;
  FieldBatch<T> forward(const BatchPtr<T>& in, Mode mode, const StepInfo& step,
                        std::unique_ptr<TapeNode<T>>* node) override;
  FieldBatch<T> backward(const FieldBatch<T>& grad_out,
                         TapeNode<T>& node) override;

  void set_orientations(const OrientationSet& o);
  int bins() const { return bins_; }

 private:
  int filter_count_;
  OrientationSet orientations_;
  int bins_;
};

/// Max pooling for vector fields: each p x p window keeps the vector with
/// the largest magnitude; the gradient routes to that position only. Inputs
/// whose extent is not divisible by p are padded with zero vectors on the
/// bottom/right (a zero magnitude never beats a live vector). window == 0
/// pools the full spatial extent to 1 x 1.
template <typename T>
class VectorSpatialPoolLayer : public Layer<T> {
 public:
  explicit VectorSpatialPoolLayer(int window);

  std::string describe() const override;
  FieldShape infer(const FieldShape& in) const override;
  FieldBatch<T> forward(const BatchPtr<T>& in, Mode mode, const StepInfo& step,
                        std::unique_ptr<TapeNode<T>>* node) override;
  FieldBatch<T> backward(const FieldBatch<T>& grad_out,
                         TapeNode<T>& node) override;

 private:
  int window_;
};

/// Batch normalisation for vector fields: divides every vector by the
/// standard deviation of the magnitudes (per channel, over batch and
/// spatial positions). No mean subtraction and no learned affine, so vector
/// angles are never changed. Train mode uses batch statistics and updates
/// the running variance (momentum 0.9); eval mode uses the running value.
template <typename T>
class VectorBatchNormLayer : public Layer<T> {
 public:
  explicit VectorBatchNormLayer(int channels);

  std::string describe() const override;
  FieldShape infer(const FieldShape& in) const override;
  FieldBatch<T> forward(const BatchPtr<T>& in, Mode mode, const StepInfo& step,
                        std::unique_ptr<TapeNode<T>>* node) override;
  FieldBatch<T> backward(const FieldBatch<T>& grad_out,
                         TapeNode<T>& node) override;
  std::vector<Tensor<T>*> state() override { return {&running_var_}; }

  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.9;

 private:
  int channels_;
  Tensor<T> running_var_;
};

/// Standard scalar batch normalisation (zero mean, unit variance, no
/// affine), for the scalar maps ahead of the first convolution.
template <typename T>
class ScalarBatchNormLayer : public Layer<T> {
 public:
  explicit ScalarBatchNormLayer(int channels);

  std::string describe() const override;
  FieldShape infer(const FieldShape& in) const override;
  FieldBatch<T> forward(const BatchPtr<T>& in, Mode mode, const StepInfo& step,
                        std::unique_ptr<TapeNode<T>>* node) override;
  FieldBatch<T> backward(const FieldBatch<T>& grad_out,
                         TapeNode<T>& node) override;
  std::vector<Tensor<T>*> state() override {
    return {&running_mean_, &running_var_};
  }

 private:
  int channels_;
  Tensor<T> running_mean_;
  Tensor<T> running_var_;
};

/// Dense layer on the flattened input. Scalar maps flatten to their values;
/// vector maps flatten to their channel magnitudes, which keeps a classifier
/// head exactly invariant under input rotations that only re-orient the
/// pooled vectors. Output is a 1 x 1 x units scalar map.
template <typename T>
class FullyConnectedLayer : public Layer<T> {
 public:
  FullyConnectedLayer(int in_dim, int units);

  std::string describe() const override;
  FieldShape infer(const FieldShape& in) const override;
  FieldBatch<T> forward(const BatchPtr<T>& in, Mode mode, const StepInfo& step,
                        std::unique_ptr<TapeNode<T>>* node) override;
  FieldBatch<T> backward(const FieldBatch<T>& grad_out,
                         TapeNode<T>& node) override;
  std::vector<Tensor<T>*> parameters() override { return {&weights_, &bias_}; }
  std::vector<Tensor<T>*> gradients() override {
    return {&grad_weights_, &grad_bias_};
  }
  void init(Rng& rng, double sigma) override;

  Tensor<T>& weights() { return weights_; }
  Tensor<T>& bias() { return bias_; }

 private:
  int in_dim_, units_;
  Tensor<T> weights_;  // units x in_dim
  Tensor<T> bias_;     // units
  Tensor<T> grad_weights_, grad_bias_;
};

template <typename T>
class ReluLayer : public Layer<T> {
 public:
  std::string describe() const override { return "relu"; }
  FieldShape infer(const FieldShape& in) const override;
  FieldBatch<T> forward(const BatchPtr<T>& in, Mode mode, const StepInfo& step,
                        std::unique_ptr<TapeNode<T>>* node) override;
  FieldBatch<T> backward(const FieldBatch<T>& grad_out,
                         TapeNode<T>& node) override;
};

/// Inverted dropout on scalar maps: kept units scale by 1/(1-rate) at train
/// time, eval is the identity. Masks come from a substream of the step rng
/// keyed on (layer index, step, sample), so results do not depend on worker
/// scheduling.
template <typename T>
class DropoutLayer : public Layer<T> {
 public:
  explicit DropoutLayer(double rate);

  std::string describe() const override;
  FieldShape infer(const FieldShape& in) const override;
  FieldBatch<T> forward(const BatchPtr<T>& in, Mode mode, const StepInfo& step,
                        std::unique_ptr<TapeNode<T>>* node) override;
  FieldBatch<T> backward(const FieldBatch<T>& grad_out,
                         TapeNode<T>& node) override;

  double rate() const { return rate_; }

 private:
  double rate_;
};

/// Numerically stable softmax over the flattened input. The cross-entropy
/// loss couples with this layer: its gradient seed is expressed directly in
/// logit space (probs - onehot), so backward here is a pass-through. See
/// softmax_cross_entropy in network.hpp.
template <typename T>
class SoftmaxHeadLayer : public Layer<T> {
 public:
  std::string describe() const override { return "softmax_head"; }
  FieldShape infer(const FieldShape& in) const override;
  FieldBatch<T> forward(const BatchPtr<T>& in, Mode mode, const StepInfo& step,
                        std::unique_ptr<TapeNode<T>>* node) override;
  FieldBatch<T> backward(const FieldBatch<T>& grad_out,
                         TapeNode<T>& node) override;
};

/// Orientation-regression head. The input is the R-dimensional response
/// vector of a full-extent rotating convolution (no orientation pooling);
/// tanh responses are contracted against the two fixed (non-learned) rows
/// [sin(angle_r)] and [cos(angle_r)] and the resulting 2-vector is
/// normalised to unit length. Output channel order is (cos, sin) of the
/// predicted angle. A zero-norm pre-normalisation vector is an error.
template <typename T>
class CovariantHeadLayer : public Layer<T> {
 public:
  explicit CovariantHeadLayer(OrientationSet orientations);

  std::string describe() const override { return "covariant_head"; }
  FieldShape infer(const FieldShape& in) const override;
  FieldBatch<T> forward(const BatchPtr<T>& in, Mode mode, const StepInfo& step,
                        std::unique_ptr<TapeNode<T>>* node) override;
  FieldBatch<T> backward(const FieldBatch<T>& grad_out,
                         TapeNode<T>& node) override;

  void set_orientations(const OrientationSet& o) { orientations_ = o; }

 private:
  OrientationSet orientations_;
};

}  // namespace roteqnet

#endif  // ROTEQNET_LAYERS_HPP_
