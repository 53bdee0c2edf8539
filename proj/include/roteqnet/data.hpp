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
#ifndef ROTEQNET_DATA_HPP_
#define ROTEQNET_DATA_HPP_

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "roteqnet/rng.hpp"
#include "roteqnet/tensor.hpp"

namespace roteqnet {

/// One labelled example: pixels in [0, 1], and either a class label or an
/// orientation target in degrees (the training target is (cos, sin) of it).
template <typename T>
struct Sample {
  Tensor<T> image;  // H x W
  int label = -1;
  double angle_deg = 0.0;
};

template <typename T>
struct DatasetSplit {
  std::vector<Sample<T>> train, val, test;
  /// Canonical text describing exactly how the data was produced (source
  /// digests, seed, generation parameters). Two splits with equal
  /// provenance are byte-identical.
  std::string provenance;
};

// ---- idx container (big-endian header) -----------------------------------------

/// Parses an idx file. Magic 0x00000803 yields an N x H x W image tensor
/// with pixel bytes scaled to [0, 1]; magic 0x00000801 yields an N-vector
/// of digit labels (values above 9 are rejected). Anything else errors.
template <typename T>
Tensor<T> read_idx(const std::string& path);

void write_idx_images(const std::string& path,
                      const std::vector<const float*>& images, int h, int w);
void write_idx_labels(const std::string& path,
                      const std::vector<std::uint8_t>& labels);
/// float32 idx variant (type code 0x0D), used for orientation targets.
void write_idx_f32(const std::string& path, const std::vector<float>& values);
std::vector<float> read_idx_f32(const std::string& path);

/// Loads an images/labels idx pair into samples.
template <typename T>
std::vector<Sample<T>> load_mnist_pair(const std::string& images_path,
                                       const std::string& labels_path);

// ---- plain-text matrix format ----------------------------------------------------

/// Whitespace-separated text, 785 columns per row: 784 pixels already in
/// [0, 1] followed by the class label. Pixels are taken row-major (x[0] is
/// the top-left pixel, scanning left to right), which the rendered-digit
/// fixture test pins down.
template <typename T>
std::vector<Sample<T>> read_amat(const std::string& path);
template <typename T>
void write_amat(const std::string& path, const std::vector<Sample<T>>& rows);

// ---- generated datasets -----------------------------------------------------------

struct MnistRotSizes {
  int train = 10000;
  int val = 2000;
  int test = 50000;
};

/// Applies an independent uniform rotation in [0, 360) to each source digit
/// and deals the results into disjoint train/val/test splits. `images` is
/// the N x H x W tensor from read_idx, `labels` the matching digit labels.
/// Fully reproducible from the seed; errors when fewer source images than
/// train+val+test are supplied.
template <typename T>
DatasetSplit<T> make_mnist_rot(const Tensor<T>& images,
                               const std::vector<int>& labels,
                               std::uint64_t seed,
                               const MnistRotSizes& sizes = {});

/// Synthetic orientation-regression set: an asymmetric bar (one end
/// brighter, so opposite directions are distinguishable) rendered
/// analytically at a uniformly random angle, with additive Gaussian noise
/// (sigma 0.05) clamped back to [0, 1]. Targets are the rendering angle.
template <typename T>
DatasetSplit<T> make_oriented_shapes(int n_train, int n_test,
                                     std::uint64_t seed, int image_size = 48,
                                     double noise_sigma = 0.05, int n_val = 0);

/// Noise-free bar renderer at one angle (the generator above draws angles
/// and adds noise around this).
template <typename T>
Tensor<T> render_oriented_bar(double angle_deg, int image_size = 48);

// ---- dataset cache -----------------------------------------------------------------

/// Materialises a split under `dir` as idx-style files plus a provenance
/// sidecar. Returns false (and writes nothing) when an identical provenance
/// sidecar is already present.
template <typename T>
bool write_dataset_cache(const std::string& dir, const DatasetSplit<T>& split);
template <typename T>
DatasetSplit<T> load_dataset_cache(const std::string& dir);
/// Reads a cache directory's provenance sidecar ("" if absent).
std::string read_provenance(const std::string& dir);

// ---- pgm image io ------------------------------------------------------------------

/// Reads a P2 (ascii) or P5 (binary) greyscale PGM with maxval <= 255,
/// scaled to [0, 1].
template <typename T>
Tensor<T> read_pgm(const std::string& path);
template <typename T>
void write_pgm(const std::string& path, const Tensor<T>& image);

/// FNV-1a digest of a file's bytes, for provenance records.
std::uint64_t file_digest(const std::string& path);

}  // namespace roteqnet

#endif  // ROTEQNET_DATA_HPP_
