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
#include "roteqnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "roteqnet/rotation.hpp"

namespace roteqnet {

namespace {

std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("idx: truncated header in " + path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

void write_be32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {
      static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
      static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;
constexpr std::uint32_t kIdxFloat1d = 0x00000D01;

}  // namespace

std::uint64_t file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("digest: cannot open " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (in) {
    in.read(buf, sizeof(buf));
    const std::streamsize n = in.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

template <typename T>
Tensor<T> read_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("idx: cannot open " + path);
  const std::uint32_t magic = read_be32(in, path);
  if (magic == kIdxImages) {
    const int n = static_cast<int>(read_be32(in, path));
    const int h = static_cast<int>(read_be32(in, path));
    const int w = static_cast<int>(read_be32(in, path));
    if (n < 0 || h < 1 || w < 1)
      throw std::runtime_error("idx: implausible dimensions in " + path);
    Tensor<T> out({n, h, w});
    std::vector<unsigned char> row(static_cast<std::size_t>(h) * w);
    for (int i = 0; i < n; ++i) {
      in.read(reinterpret_cast<char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
      if (!in) throw std::runtime_error("idx: truncated image data in " + path);
      T* dst = out.data() + static_cast<std::size_t>(i) * h * w;
      for (std::size_t k = 0; k < row.size(); ++k)
        dst[k] = static_cast<T>(row[k] / 255.0);
    }
    return out;
  }
  if (magic == kIdxLabels) {
    const int n = static_cast<int>(read_be32(in, path));
    Tensor<T> out({n});
    std::vector<unsigned char> bytes(static_cast<std::size_t>(n));
    in.read(reinterpret_cast<char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!in) throw std::runtime_error("idx: truncated label data in " + path);
    for (int i = 0; i < n; ++i) {
      if (bytes[static_cast<std::size_t>(i)] > 9)
        throw std::runtime_error(
            "idx: label " + std::to_string(bytes[static_cast<std::size_t>(i)]) +
            " out of the digit range 0-9 in " + path);
      out[static_cast<std::size_t>(i)] = static_cast<T>(bytes[i]);
    }
    return out;
  }
  std::ostringstream msg;
  msg << "idx: bad magic 0x" << std::hex << magic << " in " << path;
  throw std::runtime_error(msg.str());
}

void write_idx_images(const std::string& path,
                      const std::vector<const float*>& images, int h, int w) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("idx: cannot write " + path);
  write_be32(out, kIdxImages);
  write_be32(out, static_cast<std::uint32_t>(images.size()));
  write_be32(out, static_cast<std::uint32_t>(h));
  write_be32(out, static_cast<std::uint32_t>(w));
  std::vector<unsigned char> row(static_cast<std::size_t>(h) * w);
  for (const float* img : images) {
    for (std::size_t k = 0; k < row.size(); ++k) {
      const float v = std::min(1.0f, std::max(0.0f, img[k]));
      row[k] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
}

void write_idx_labels(const std::string& path,
                      const std::vector<std::uint8_t>& labels) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("idx: cannot write " + path);
  write_be32(out, kIdxLabels);
  write_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()),
            static_cast<std::streamsize>(labels.size()));
}

void write_idx_f32(const std::string& path, const std::vector<float>& values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("idx: cannot write " + path);
  write_be32(out, kIdxFloat1d);
  write_be32(out, static_cast<std::uint32_t>(values.size()));
  for (float v : values) {
    // big-endian float, matching the container's header convention
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_be32(out, bits);
  }
}

std::vector<float> read_idx_f32(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("idx: cannot open " + path);
  const std::uint32_t magic = read_be32(in, path);
  if (magic != kIdxFloat1d)
    throw std::runtime_error("idx: expected float32 vector file at " + path);
  const int n = static_cast<int>(read_be32(in, path));
  std::vector<float> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const std::uint32_t bits = read_be32(in, path);
    std::memcpy(&out[static_cast<std::size_t>(i)], &bits, 4);
  }
  return out;
}

template <typename T>
std::vector<Sample<T>> load_mnist_pair(const std::string& images_path,
                                       const std::string& labels_path) {
  Tensor<T> images = read_idx<T>(images_path);
  Tensor<T> labels = read_idx<T>(labels_path);
  if (images.ndim() != 3)
    throw std::runtime_error("idx: " + images_path + " is not an image file");
  if (labels.ndim() != 1)
    throw std::runtime_error("idx: " + labels_path + " is not a label file");
  if (images.extent(0) != labels.extent(0))
    throw std::runtime_error("idx: image/label count mismatch");
  const int n = images.extent(0), h = images.extent(1), w = images.extent(2);
  std::vector<Sample<T>> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Tensor<T> img({h, w});
    std::copy_n(images.data() + static_cast<std::size_t>(i) * h * w,
                static_cast<std::size_t>(h) * w, img.data());
    out[static_cast<std::size_t>(i)].image = std::move(img);
    out[static_cast<std::size_t>(i)].label = static_cast<int>(labels[i]);
  }
  return out;
}

// ---- amat -------------------------------------------------------------------------

template <typename T>
std::vector<Sample<T>> read_amat(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("amat: cannot open " + path);
  std::vector<Sample<T>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    std::istringstream row(line);
    std::vector<double> values;
    values.reserve(785);
    double v;
    while (row >> v) values.push_back(v);
    if (!row.eof())
      throw std::runtime_error("amat: non-numeric token on line " +
                               std::to_string(lineno) + " of " + path);
    if (values.size() != 785)
      throw std::runtime_error("amat: expected 785 columns, got " +
                               std::to_string(values.size()) + " on line " +
                               std::to_string(lineno) + " of " + path);
    Sample<T> s;
    s.image = Tensor<T>({28, 28});
    for (int k = 0; k < 784; ++k)
      s.image[static_cast<std::size_t>(k)] = static_cast<T>(values[k]);
    s.label = static_cast<int>(std::lround(values[784]));
    if (s.label < 0 || s.label > 9)
      throw std::runtime_error("amat: label out of range on line " +
                               std::to_string(lineno));
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
void write_amat(const std::string& path, const std::vector<Sample<T>>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("amat: cannot write " + path);
  char buf[32];
  for (const Sample<T>& s : rows) {
    for (std::size_t k = 0; k < s.image.size(); ++k) {
      std::snprintf(buf, sizeof(buf), "%.17g",
                    static_cast<double>(s.image[k]));
      out << buf << ' ';
    }
    out << s.label << '\n';
  }
}

// ---- generated datasets --------------------------------------------------------------

template <typename T>
DatasetSplit<T> make_mnist_rot(const Tensor<T>& images,
                               const std::vector<int>& labels,
                               std::uint64_t seed, const MnistRotSizes& sizes) {
  if (images.ndim() != 3)
    throw std::invalid_argument("make_mnist_rot: images must be N x H x W");
  const int n = images.extent(0), h = images.extent(1), w = images.extent(2);
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("make_mnist_rot: image/label count mismatch");
  const long needed =
      static_cast<long>(sizes.train) + sizes.val + sizes.test;
  if (n < needed)
    throw std::invalid_argument("make_mnist_rot: need " +
                                std::to_string(needed) + " source images, got " +
                                std::to_string(n));

  Rng rng(seed);
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng shuffle_rng = rng.substream("split-shuffle");
  shuffle_rng.shuffle(order);
  Rng angle_rng = rng.substream("angles");

  auto take = [&](int offset, int count) {
    std::vector<Sample<T>> out(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      const int src = order[static_cast<std::size_t>(offset + i)];
      Tensor<T> img({h, w});
      std::copy_n(images.data() + static_cast<std::size_t>(src) * h * w,
                  static_cast<std::size_t>(h) * w, img.data());
      const double angle = angle_rng.uniform(0.0, 360.0);
      Tensor<T> rotated = rotate_image(img, angle);
      for (auto& p : rotated) p = std::min(T(1), std::max(T(0), p));
      out[static_cast<std::size_t>(i)].image = std::move(rotated);
      out[static_cast<std::size_t>(i)].label =
          labels[static_cast<std::size_t>(src)];
      out[static_cast<std::size_t>(i)].angle_deg = angle;
    }
    return out;
  };

  DatasetSplit<T> split;
  split.train = take(0, sizes.train);
  split.val = take(sizes.train, sizes.val);
  split.test = take(sizes.train + sizes.val, sizes.test);

  std::ostringstream prov;
  prov << "kind mnist-rot\n"
       << "seed " << seed << "\n"
       << "train " << sizes.train << "\n"
       << "val " << sizes.val << "\n"
       << "test " << sizes.test << "\n"
       << "source-images " << n << "\n";
  split.provenance = prov.str();
  return split;
}

template <typename T>
Tensor<T> render_oriented_bar(double angle_deg, int image_size) {
  // Bar along the +column axis at angle 0, one end brightened so that a
  // half-turn changes the image. Coverage falls off linearly over one pixel
  // at the edges. Evaluating the rotated frame analytically keeps
  // render(a + 90) identical to rotating render(a) by a quarter turn.
  const int n = image_size;
  Tensor<T> img({n, n});
  const double c = (n - 1) / 2.0;
  const double half_len = n * 0.30;
  const double half_width = n * 0.07;
  const double head_start = half_len * 0.45;  // along +x: the bright end
  double cosd, sind;
  cos_sin_deg(angle_deg, cosd, sind);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      // Inverse-rotate the pixel into the bar frame; x along the bar.
      const double dr = i - c;
      const double dc = j - c;
      const double br = cosd * dr + sind * dc;
      const double bc = -sind * dr + cosd * dc;
      const double x = bc;
      const double y = br;
      const double cov_x =
          std::min(1.0, std::max(0.0, 0.5 + (half_len - std::abs(x))));
      const double cov_y =
          std::min(1.0, std::max(0.0, 0.5 + (half_width - std::abs(y))));
      const double intensity = x > head_start ? 1.0 : 0.55;
      img(i, j) = static_cast<T>(cov_x * cov_y * intensity);
    }
  }
  return img;
}

template <typename T>
DatasetSplit<T> make_oriented_shapes(int n_train, int n_test,
                                     std::uint64_t seed, int image_size,
                                     double noise_sigma, int n_val) {
  if (n_train < 1) throw std::invalid_argument("oriented shapes: n_train < 1");
  if (n_test < 0 || n_val < 0)
    throw std::invalid_argument("oriented shapes: negative split size");
  Rng rng(seed);
  Rng angle_rng = rng.substream("angles");
  Rng noise_rng = rng.substream("noise");

  auto generate = [&](int count) {
    std::vector<Sample<T>> out(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      const double angle = angle_rng.uniform(0.0, 360.0);
      Tensor<T> img = render_oriented_bar<T>(angle, image_size);
      if (noise_sigma > 0.0) {
        for (auto& p : img) {
          const double v = p + noise_rng.normal(0.0, noise_sigma);
          p = static_cast<T>(std::min(1.0, std::max(0.0, v)));
        }
      }
      out[static_cast<std::size_t>(i)].image = std::move(img);
      out[static_cast<std::size_t>(i)].angle_deg = angle;
    }
    return out;
  };

  DatasetSplit<T> split;
  split.train = generate(n_train);
  split.val = generate(n_val);
  split.test = generate(n_test);

  std::ostringstream prov;
  prov << "kind oriented-shapes\n"
       << "seed " << seed << "\n"
       << "train " << n_train << "\n"
       << "val " << n_val << "\n"
       << "test " << n_test << "\n"
       << "size " << image_size << "\n"
       << "noise-sigma " << noise_sigma << "\n";
  split.provenance = prov.str();
  return split;
}

// ---- dataset cache --------------------------------------------------------------------

namespace {

bool provenance_mentions(const std::string& prov, const std::string& kind) {
  return prov.find("kind " + kind) != std::string::npos;
}

template <typename T>
void write_part(const std::string& dir, const std::string& name,
                const std::vector<Sample<T>>& part, bool angles) {
  if (part.empty()) return;
  const int h = part.front().image.extent(0);
  const int w = part.front().image.extent(1);
  std::vector<Tensor<float>> converted;
  std::vector<const float*> ptrs;
  converted.reserve(part.size());
  ptrs.reserve(part.size());
  for (const Sample<T>& s : part) {
    Tensor<float> img({h, w});
    for (std::size_t k = 0; k < s.image.size(); ++k)
      img[k] = static_cast<float>(s.image[k]);
    converted.push_back(std::move(img));
    ptrs.push_back(converted.back().data());
  }
  write_idx_images(dir + "/" + name + "-images-idx3-ubyte", ptrs, h, w);
  if (angles) {
    std::vector<float> degs(part.size());
    for (std::size_t i = 0; i < part.size(); ++i)
      degs[i] = static_cast<float>(part[i].angle_deg);
    write_idx_f32(dir + "/" + name + "-angles-idxf", degs);
  } else {
    std::vector<std::uint8_t> labels(part.size());
    for (std::size_t i = 0; i < part.size(); ++i)
      labels[i] = static_cast<std::uint8_t>(part[i].label);
    write_idx_labels(dir + "/" + name + "-labels-idx1-ubyte", labels);
  }
}

template <typename T>
std::vector<Sample<T>> load_part(const std::string& dir,
                                 const std::string& name, bool angles) {
  const std::string img_path = dir + "/" + name + "-images-idx3-ubyte";
  if (!std::filesystem::exists(img_path)) return {};
  Tensor<T> images = read_idx<T>(img_path);
  const int n = images.extent(0), h = images.extent(1), w = images.extent(2);
  std::vector<Sample<T>> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Tensor<T> img({h, w});
    std::copy_n(images.data() + static_cast<std::size_t>(i) * h * w,
                static_cast<std::size_t>(h) * w, img.data());
    out[static_cast<std::size_t>(i)].image = std::move(img);
  }
  if (angles) {
    const auto degs = read_idx_f32(dir + "/" + name + "-angles-idxf");
    if (degs.size() != out.size())
      throw std::runtime_error("dataset cache: angle/image count mismatch");
    for (std::size_t i = 0; i < out.size(); ++i) out[i].angle_deg = degs[i];
  } else {
    Tensor<T> labels = read_idx<T>(dir + "/" + name + "-labels-idx1-ubyte");
    if (static_cast<std::size_t>(labels.extent(0)) != out.size())
      throw std::runtime_error("dataset cache: label/image count mismatch");
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i].label = static_cast<int>(labels[i]);
  }
  return out;
}

}  // namespace

std::string read_provenance(const std::string& dir) {
  std::ifstream in(dir + "/provenance.txt");
  if (!in) return "";
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

template <typename T>
bool write_dataset_cache(const std::string& dir, const DatasetSplit<T>& split) {
  std::filesystem::create_directories(dir);
  if (read_provenance(dir) == split.provenance && !split.provenance.empty())
    return false;  // identical data already materialised
  const bool angles = provenance_mentions(split.provenance, "oriented-shapes");
  write_part(dir, "train", split.train, angles);
  write_part(dir, "val", split.val, angles);
  write_part(dir, "test", split.test, angles);
  std::ofstream prov(dir + "/provenance.txt", std::ios::trunc);
  prov << split.provenance;
  return true;
}

template <typename T>
DatasetSplit<T> load_dataset_cache(const std::string& dir) {
  DatasetSplit<T> split;
  split.provenance = read_provenance(dir);
  if (split.provenance.empty())
    throw std::runtime_error("dataset cache: no provenance sidecar in " + dir +
                             " (run prepare first)");
  const bool angles = provenance_mentions(split.provenance, "oriented-shapes");
  split.train = load_part<T>(dir, "train", angles);
  split.val = load_part<T>(dir, "val", angles);
  split.test = load_part<T>(dir, "test", angles);
  return split;
}

// ---- pgm ---------------------------------------------------------------------------

template <typename T>
Tensor<T> read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("pgm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P2" && magic != "P5")
    throw std::runtime_error("pgm: bad magic '" + magic + "' in " + path);
  auto next_int = [&]() {
    // Skip whitespace and '#' comment lines between header tokens.
    while (true) {
      const int c = in.peek();
      if (c == '#') {
        std::string comment;
        std::getline(in, comment);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    long v = -1;
    in >> v;
    if (!in || v < 0) throw std::runtime_error("pgm: malformed header in " + path);
    return v;
  };
  const long w = next_int();
  const long h = next_int();
  const long maxval = next_int();
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255)
    throw std::runtime_error("pgm: unsupported geometry or maxval in " + path);
  Tensor<T> img({static_cast<int>(h), static_cast<int>(w)});
  if (magic == "P5") {
    in.get();  // the single whitespace after maxval
    std::vector<unsigned char> bytes(static_cast<std::size_t>(w * h));
    in.read(reinterpret_cast<char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!in) throw std::runtime_error("pgm: truncated pixel data in " + path);
    for (std::size_t k = 0; k < bytes.size(); ++k)
      img[k] = static_cast<T>(bytes[k] / static_cast<double>(maxval));
  } else {
    for (std::size_t k = 0; k < img.size(); ++k) {
      long v;
      in >> v;
      if (!in || v < 0 || v > maxval)
        throw std::runtime_error("pgm: bad pixel value in " + path);
      img[k] = static_cast<T>(v / static_cast<double>(maxval));
    }
  }
  return img;
}

template <typename T>
void write_pgm(const std::string& path, const Tensor<T>& image) {
  if (image.ndim() != 2)
    throw std::invalid_argument("pgm: image must be H x W");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("pgm: cannot write " + path);
  out << "P5\n" << image.extent(1) << " " << image.extent(0) << "\n255\n";
  for (std::size_t k = 0; k < image.size(); ++k) {
    const double v = std::min(1.0, std::max(0.0, static_cast<double>(image[k])));
    out.put(static_cast<char>(std::lround(v * 255.0)));
  }
}

// ---- instantiation -----------------------------------------------------------------

#define ROTEQNET_INSTANTIATE_DATA(T)                                            \
  template Tensor<T> read_idx<T>(const std::string&);                           \
  template std::vector<Sample<T>> load_mnist_pair<T>(const std::string&,        \
                                                     const std::string&);       \
  template std::vector<Sample<T>> read_amat<T>(const std::string&);             \
  template void write_amat<T>(const std::string&,                               \
                              const std::vector<Sample<T>>&);                   \
  template DatasetSplit<T> make_mnist_rot<T>(const Tensor<T>&,                  \
                                             const std::vector<int>&,           \
                                             std::uint64_t,                     \
                                             const MnistRotSizes&);             \
  template DatasetSplit<T> make_oriented_shapes<T>(int, int, std::uint64_t,     \
                                                   int, double, int);           \
  template Tensor<T> render_oriented_bar<T>(double, int);                       \
  template bool write_dataset_cache<T>(const std::string&,                      \
                                       const DatasetSplit<T>&);                 \
  template DatasetSplit<T> load_dataset_cache<T>(const std::string&);           \
  template Tensor<T> read_pgm<T>(const std::string&);                           \
  template void write_pgm<T>(const std::string&, const Tensor<T>&);

ROTEQNET_INSTANTIATE_DATA(float)
ROTEQNET_INSTANTIATE_DATA(double)
#undef ROTEQNET_INSTANTIATE_DATA

}  // namespace roteqnet
