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
#ifndef ROTEQNET_TENSOR_HPP_
#define ROTEQNET_TENSOR_HPP_

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace roteqnet {

/// Axis extents, outermost first. Row-major storage, last axis contiguous.
/// Semantic order is documented per use: images are H x W (x C), filters are
/// m x m x d, orientation responses are H x W x (filters * R).
using Shape = std::vector<int>;

std::string shape_to_string(const Shape& s);

/// Dense multi-dimensional array of real values, up to 4 axes.
///
/// Values produced by the library's primitive operations are always finite;
/// a NaN or Inf is a contract violation and is reported via exception by the
/// operation that produced it. Tensors are treated as immutable once an
/// operation has produced them: sharing read-only across threads is safe,
/// in-place mutation requires exclusive access.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    data_.assign(element_count(shape_), T(0));
  }

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != element_count(shape_))
      throw std::invalid_argument("tensor: value count does not match shape " +
                                  shape_to_string(shape_));
  }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = value;
    return t;
  }

  int ndim() const { return static_cast<int>(shape_.size()); }
  const Shape& shape() const { return shape_; }
  int extent(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(int i, int j) { return data_[flat2(i, j)]; }
  const T& operator()(int i, int j) const { return data_[flat2(i, j)]; }
  T& operator()(int i, int j, int k) { return data_[flat3(i, j, k)]; }
  const T& operator()(int i, int j, int k) const { return data_[flat3(i, j, k)]; }
  T& operator()(int i, int j, int k, int l) { return data_[flat4(i, j, k, l)]; }
  const T& operator()(int i, int j, int k, int l) const {
    return data_[flat4(i, j, k, l)];
  }

  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

  void fill(T value) {
    for (auto& x : data_) x = value;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  static std::size_t element_count(const Shape& s) {
    if (s.size() > 4) throw std::invalid_argument("tensor: more than 4 axes");
    std::size_t n = 1;
    for (int e : s) {
      if (e < 0) throw std::invalid_argument("tensor: negative extent");
      n *= static_cast<std::size_t>(e);
    }
    return n;
  }

 private:
  std::size_t flat2(int i, int j) const {
    return static_cast<std::size_t>(i) * shape_[1] + j;
  }
  std::size_t flat3(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k;
  }
  std::size_t flat4(int i, int j, int k, int l) const {
    return ((static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k) *
               shape_[3] +
           l;
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Throws if any element of `t` is NaN or Inf. `context` names the producing
/// operation in the error message.
template <typename T>
void ensure_finite(const Tensor<T>& t, const char* context);

// ---- elementwise operations ------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> add(const Tensor<T>& a, T scalar);  // scalar broadcast
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> relu(const Tensor<T>& a);  // max(x, 0)
template <typename T>
Tensor<T> tanh(const Tensor<T>& a);
template <typename T>
Tensor<T> sqrt(const Tensor<T>& a);

// ---- reductions -------------------------------------------------------------

template <typename T>
T sum(const Tensor<T>& a);

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b);

/// Reduces one axis to its maximum. Ties resolve to the smallest index so
/// repeated runs are reproducible. Errors if the reduced axis is empty.
template <typename T>
struct MaxWithArgmax {
  Tensor<T> values;
  Tensor<std::int32_t> argmax;
};
template <typename T>
MaxWithArgmax<T> max_with_argmax(const Tensor<T>& a, int axis);

/// Population variance over the given axis set (1/N normalisation, mean
/// subtracted). Errors if the reduction is empty.
template <typename T>
Tensor<T> variance(const Tensor<T>& a, const std::vector<int>& axes);

}  // namespace roteqnet

#endif  // ROTEQNET_TENSOR_HPP_
