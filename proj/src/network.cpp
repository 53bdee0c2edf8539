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
#include "roteqnet/network.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace roteqnet {

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

const char* kind_name(LayerSpec::Kind k) {
  switch (k) {
    case LayerSpec::Kind::kRotConv: return "rotconv";
    case LayerSpec::Kind::kSpatialPool: return "spatial_pool";
    case LayerSpec::Kind::kVectorBatchNorm: return "vector_batch_norm";
    case LayerSpec::Kind::kScalarBatchNorm: return "scalar_batch_norm";
    case LayerSpec::Kind::kFullyConnected: return "fully_connected";
    case LayerSpec::Kind::kDropout: return "dropout";
    case LayerSpec::Kind::kRelu: return "relu";
    case LayerSpec::Kind::kSoftmaxHead: return "softmax_head";
    case LayerSpec::Kind::kCovariantHead: return "covariant_head";
  }
  throw std::logic_error("unknown layer kind");
}

LayerSpec::Kind kind_from_name(const std::string& name) {
  for (auto k : {LayerSpec::Kind::kRotConv, LayerSpec::Kind::kSpatialPool,
                 LayerSpec::Kind::kVectorBatchNorm,
                 LayerSpec::Kind::kScalarBatchNorm,
                 LayerSpec::Kind::kFullyConnected, LayerSpec::Kind::kDropout,
                 LayerSpec::Kind::kRelu, LayerSpec::Kind::kSoftmaxHead,
                 LayerSpec::Kind::kCovariantHead})
    if (name == kind_name(k)) return k;
  throw std::invalid_argument("network spec: unknown layer kind '" + name + "'");
}

}  // namespace

FieldShape NetworkSpec::validate() const {
  if (layers.empty())
    throw std::invalid_argument("network spec: no layers");
  if (input.h < 1 || input.w < 1 || input.c < 1 || input.vec)
    throw std::invalid_argument("network spec: input must be a scalar image");
  if (orientation_count < 1)
    throw std::invalid_argument("network spec: orientation count must be >= 1");

  int heads = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto k = layers[i].kind;
    if (k == LayerSpec::Kind::kSoftmaxHead ||
        k == LayerSpec::Kind::kCovariantHead) {
      ++heads;
      if (i + 1 != layers.size())
        throw std::invalid_argument("network spec: head must be the last layer");
    }
  }
  if (heads != 1)
    throw std::invalid_argument("network spec: exactly one head required");
  const auto last = layers.back().kind;
  if (loss == LossKind::kCrossEntropy && last != LayerSpec::Kind::kSoftmaxHead)
    throw std::invalid_argument(
        "network spec: cross-entropy loss needs a softmax head");
  if (loss == LossKind::kUnitVectorL2 && last != LayerSpec::Kind::kCovariantHead)
    throw std::invalid_argument(
        "network spec: unit-vector loss needs the covariant head");

  // Walk shapes through throw-away layer instances.
  FieldShape cur = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& ls = layers[i];
    try {
      switch (ls.kind) {
        case LayerSpec::Kind::kRotConv: {
          RotConvLayer<double> conv(ls.filters, ls.size, cur.c, cur.vec,
                                    OrientationSet::full_circle(orientation_count),
                                    ls.same_pad);
          cur = conv.infer(cur);
          if (ls.with_op) {
            OrientationPoolLayer<double> op(
                ls.filters, OrientationSet::full_circle(orientation_count),
                ls.bins);
            cur = op.infer(cur);
          }
          break;
        }
        case LayerSpec::Kind::kSpatialPool:
          cur = VectorSpatialPoolLayer<double>(ls.window).infer(cur);
          break;
        case LayerSpec::Kind::kVectorBatchNorm:
          cur = VectorBatchNormLayer<double>(cur.c).infer(cur);
          break;
        case LayerSpec::Kind::kScalarBatchNorm:
          cur = ScalarBatchNormLayer<double>(cur.c).infer(cur);
          break;
        case LayerSpec::Kind::kFullyConnected:
          cur = FullyConnectedLayer<double>(cur.h * cur.w * cur.c, ls.units)
                    .infer(cur);
          break;
        case LayerSpec::Kind::kDropout:
          cur = DropoutLayer<double>(ls.rate).infer(cur);
          break;
        case LayerSpec::Kind::kRelu:
          cur = ReluLayer<double>().infer(cur);
          break;
        case LayerSpec::Kind::kSoftmaxHead:
          cur = SoftmaxHeadLayer<double>().infer(cur);
          break;
        case LayerSpec::Kind::kCovariantHead:
          cur = CovariantHeadLayer<double>(
                    OrientationSet::full_circle(orientation_count))
                    .infer(cur);
          break;
      }
    } catch (const std::exception& e) {
      throw std::invalid_argument("network spec: layer " + std::to_string(i) +
                                  " (" + kind_name(ls.kind) +
                                  ") does not compose: " + e.what());
    }
  }
  return cur;
}

std::string NetworkSpec::to_text() const {
  std::ostringstream out;
  out << "roteqnet-spec v1\n";
  out << "input " << input.h << " " << input.w << " " << input.c << "\n";
  out << "orientations " << orientation_count << "\n";
  out << "loss "
      << (loss == LossKind::kCrossEntropy ? "cross_entropy" : "unit_vector_l2")
      << "\n";
  out << "init_sigma " << format_double(init_sigma) << "\n";
  out << "seed " << seed << "\n";
  for (const LayerSpec& ls : layers) {
    out << "layer " << kind_name(ls.kind);
    switch (ls.kind) {
      case LayerSpec::Kind::kRotConv:
        out << " filters=" << ls.filters << " size=" << ls.size
            << " pad=" << (ls.same_pad ? "same" : "valid")
            << " op=" << (ls.with_op ? 1 : 0) << " bins=" << ls.bins;
        break;
      case LayerSpec::Kind::kSpatialPool:
        out << " window=" << ls.window;
        break;
      case LayerSpec::Kind::kFullyConnected:
        out << " units=" << ls.units;
        break;
      case LayerSpec::Kind::kDropout:
        out << " rate=" << format_double(ls.rate);
        break;
      default:
        break;
    }
    out << "\n";
  }
  out << "end\n";
  return out.str();
}

NetworkSpec NetworkSpec::from_text(const std::string& text) {
  NetworkSpec spec;
  spec.layers.clear();
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "roteqnet-spec v1")
    throw std::invalid_argument("network spec: bad header");
  bool saw_end = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tok;
    ls >> tok;
    if (tok == "end") {
      saw_end = true;
      break;
    } else if (tok == "input") {
      ls >> spec.input.h >> spec.input.w >> spec.input.c;
      spec.input.vec = false;
    } else if (tok == "orientations") {
      ls >> spec.orientation_count;
    } else if (tok == "loss") {
      std::string v;
      ls >> v;
      if (v == "cross_entropy")
        spec.loss = LossKind::kCrossEntropy;
      else if (v == "unit_vector_l2")
        spec.loss = LossKind::kUnitVectorL2;
      else
        throw std::invalid_argument("network spec: unknown loss '" + v + "'");
    } else if (tok == "init_sigma") {
      ls >> spec.init_sigma;
    } else if (tok == "seed") {
      ls >> spec.seed;
    } else if (tok == "layer") {
      std::string name;
      ls >> name;
      LayerSpec layer;
      layer.kind = kind_from_name(name);
      std::string kv;
      while (ls >> kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
          throw std::invalid_argument("network spec: bad attribute '" + kv + "'");
        const std::string key = kv.substr(0, eq);
        const std::string val = kv.substr(eq + 1);
        if (key == "filters") layer.filters = std::stoi(val);
        else if (key == "size") layer.size = std::stoi(val);
        else if (key == "pad") layer.same_pad = (val == "same");
        else if (key == "op") layer.with_op = (val != "0");
        else if (key == "bins") layer.bins = std::stoi(val);
        else if (key == "window") layer.window = std::stoi(val);
        else if (key == "units") layer.units = std::stoi(val);
        else if (key == "rate") layer.rate = std::stod(val);
        else
          throw std::invalid_argument("network spec: unknown attribute '" +
                                      key + "'");
      }
      spec.layers.push_back(layer);
    } else {
      throw std::invalid_argument("network spec: unknown line '" + line + "'");
    }
    if (!ls && !ls.eof())
      throw std::invalid_argument("network spec: malformed line '" + line + "'");
  }
  if (!saw_end) throw std::invalid_argument("network spec: missing end marker");
  return spec;
}

// ---- presets -------------------------------------------------------------------

namespace {
int scaled(int base, double mult) {
  const int v = static_cast<int>(std::lround(base * mult));
  return std::max(1, v);
}
}  // namespace

NetworkSpec preset_mnist_table2(int r, double filters_multiplier,
                                std::uint64_t seed) {
  NetworkSpec spec;
  spec.input = {28, 28, 1, false};
  spec.orientation_count = r;
  spec.loss = LossKind::kCrossEntropy;
  spec.init_sigma = 0.0;
  spec.seed = seed;
  const double m = filters_multiplier;
  auto rc = [&](int filters) {
    LayerSpec ls;
    ls.kind = LayerSpec::Kind::kRotConv;
    ls.filters = scaled(filters, m);
    ls.size = 9;
    ls.same_pad = true;
    ls.with_op = true;
    return ls;
  };
  auto pool = [](int w) {
    LayerSpec ls;
    ls.kind = LayerSpec::Kind::kSpatialPool;
    ls.window = w;
    return ls;
  };
  spec.layers.push_back({.kind = LayerSpec::Kind::kScalarBatchNorm});
  spec.layers.push_back(rc(6));
  spec.layers.push_back(pool(2));
  spec.layers.push_back({.kind = LayerSpec::Kind::kVectorBatchNorm});
  spec.layers.push_back(rc(16));
  spec.layers.push_back(pool(2));
  spec.layers.push_back({.kind = LayerSpec::Kind::kVectorBatchNorm});
  spec.layers.push_back(rc(32));
  spec.layers.push_back(pool(0));  // global, down to 1x1
  spec.layers.push_back(
      {.kind = LayerSpec::Kind::kFullyConnected, .units = scaled(128, m)});
  spec.layers.push_back({.kind = LayerSpec::Kind::kRelu});
  spec.layers.push_back({.kind = LayerSpec::Kind::kDropout, .rate = 0.7});
  spec.layers.push_back(
      {.kind = LayerSpec::Kind::kFullyConnected, .units = 10});
  spec.layers.push_back({.kind = LayerSpec::Kind::kSoftmaxHead});
  return spec;
}

NetworkSpec preset_covariant48(int r, std::uint64_t seed) {
  NetworkSpec spec;
  spec.input = {48, 48, 1, false};
  spec.orientation_count = r;
  spec.loss = LossKind::kUnitVectorL2;
  spec.init_sigma = 1e-3;
  spec.seed = seed;
  auto rc = [&](int filters, int size, bool with_op) {
    LayerSpec ls;
    ls.kind = LayerSpec::Kind::kRotConv;
    ls.filters = filters;
    ls.size = size;
    ls.same_pad = false;
    ls.with_op = with_op;
    return ls;
  };
  spec.layers.push_back(rc(3, 11, true));   // 48 -> 38
  spec.layers.push_back(rc(6, 11, true));   // 38 -> 28
  spec.layers.push_back(rc(3, 11, true));   // 28 -> 18
  spec.layers.push_back(
      {.kind = LayerSpec::Kind::kSpatialPool, .window = 2});  // -> 9
  spec.layers.push_back(rc(1, 9, false));   // full extent -> 1x1xR responses
  spec.layers.push_back({.kind = LayerSpec::Kind::kCovariantHead});
  return spec;
}

NetworkSpec preset_by_name(const std::string& name, int r,
                           double filters_multiplier, std::uint64_t seed) {
  if (name == "mnist-table2")
    return preset_mnist_table2(r, filters_multiplier, seed);
  if (name == "covariant-48") return preset_covariant48(r, seed);
  throw std::invalid_argument("unknown preset '" + name +
                              "' (expected mnist-table2 or covariant-48)");
}

// ---- model ---------------------------------------------------------------------

template <typename T>
Model<T> Model<T>::build(const NetworkSpec& spec) {
  spec.validate();
  Model model;
  model.spec_ = spec;
  const OrientationSet orient =
      OrientationSet::full_circle(spec.orientation_count);

  FieldShape cur = spec.input;
  for (const LayerSpec& ls : spec.layers) {
    switch (ls.kind) {
      case LayerSpec::Kind::kRotConv: {
        auto conv = std::make_unique<RotConvLayer<T>>(
            ls.filters, ls.size, cur.c, cur.vec, orient, ls.same_pad);
        cur = conv->infer(cur);
        model.layers_.push_back(std::move(conv));
        if (ls.with_op) {
          auto op = std::make_unique<OrientationPoolLayer<T>>(ls.filters,
                                                              orient, ls.bins);
          cur = op->infer(cur);
          model.layers_.push_back(std::move(op));
        }
        break;
      }
      case LayerSpec::Kind::kSpatialPool: {
        auto l = std::make_unique<VectorSpatialPoolLayer<T>>(ls.window);
        cur = l->infer(cur);
        model.layers_.push_back(std::move(l));
        break;
      }
      case LayerSpec::Kind::kVectorBatchNorm: {
        auto l = std::make_unique<VectorBatchNormLayer<T>>(cur.c);
        cur = l->infer(cur);
        model.layers_.push_back(std::move(l));
        break;
      }
      case LayerSpec::Kind::kScalarBatchNorm: {
        auto l = std::make_unique<ScalarBatchNormLayer<T>>(cur.c);
        cur = l->infer(cur);
        model.layers_.push_back(std::move(l));
        break;
      }
      case LayerSpec::Kind::kFullyConnected: {
        auto l = std::make_unique<FullyConnectedLayer<T>>(cur.h * cur.w * cur.c,
                                                          ls.units);
        cur = l->infer(cur);
        model.layers_.push_back(std::move(l));
        break;
      }
      case LayerSpec::Kind::kDropout: {
        auto l = std::make_unique<DropoutLayer<T>>(ls.rate);
        cur = l->infer(cur);
        model.layers_.push_back(std::move(l));
        break;
      }
      case LayerSpec::Kind::kRelu: {
        auto l = std::make_unique<ReluLayer<T>>();
        cur = l->infer(cur);
        model.layers_.push_back(std::move(l));
        break;
      }
      case LayerSpec::Kind::kSoftmaxHead: {
        auto l = std::make_unique<SoftmaxHeadLayer<T>>();
        cur = l->infer(cur);
        model.layers_.push_back(std::move(l));
        break;
      }
      case LayerSpec::Kind::kCovariantHead: {
        auto l = std::make_unique<CovariantHeadLayer<T>>(orient);
        cur = l->infer(cur);
        model.layers_.push_back(std::move(l));
        break;
      }
    }
  }

  Rng init_rng = Rng(spec.seed).substream("weight-init");
  for (std::size_t i = 0; i < model.layers_.size(); ++i) {
    model.layers_[i]->set_index(static_cast<int>(i));
    model.layers_[i]->init(init_rng, spec.init_sigma);
  }
  model.project();
  return model;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_)
    for (const Tensor<T>* p : const_cast<Layer<T>*>(l.get())->parameters())
      n += p->size();
  return n;
}

namespace {

template <typename T>
void check_batch_finite(const FieldBatch<T>& batch, int layer_index,
                        const std::string& what) {
  for (const FieldMap<T>& f : batch) {
    const T* us = f.u.data();
    bool ok = true;
    const std::size_t n = f.u.size();
#pragma omp simd reduction(& : ok)
    for (std::size_t i = 0; i < n; ++i) ok &= std::isfinite(us[i]);
    if (ok && f.is_vector()) {
      const T* vs = f.v.data();
      const std::size_t nv = f.v.size();
#pragma omp simd reduction(& : ok)
      for (std::size_t i = 0; i < nv; ++i) ok &= std::isfinite(vs[i]);
    }
    if (!ok)
      throw std::runtime_error("layer " + std::to_string(layer_index) + " (" +
                               what + "): non-finite activation");
  }
}

}  // namespace

template <typename T>
FieldBatch<T> Model<T>::forward(const BatchPtr<T>& in, Mode mode, Tape<T>* tape,
                                const StepInfo& step) {
  if (!in || in->empty()) throw std::invalid_argument("model: empty batch");
  if (in->front().shape() != spec_.input)
    throw std::invalid_argument(
        "model: input shape " + field_shape_to_string(in->front().shape()) +
        " does not match the spec input " + field_shape_to_string(spec_.input));
  if (tape) {
    tape->nodes.clear();
    tape->nodes.resize(layers_.size());
    tape->consumed = false;
  }
  BatchPtr<T> cur = in;
  FieldBatch<T> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    out = layers_[i]->forward(cur, mode, step, tape ? &tape->nodes[i] : nullptr);
    check_batch_finite(out, static_cast<int>(i), layers_[i]->describe());
    cur = std::make_shared<const FieldBatch<T>>(std::move(out));
  }
  return *cur;
}

template <typename T>
void Model<T>::backward(Tape<T>& tape, const FieldBatch<T>& head_grad) {
  if (tape.consumed)
    throw std::logic_error("model: tape already consumed by a backward pass");
  if (tape.nodes.size() != layers_.size())
    throw std::logic_error("model: tape does not match this network");
  tape.consumed = true;
  FieldBatch<T> grad = head_grad;
  for (int i = static_cast<int>(layers_.size()) - 1; i >= 0; --i) {
    if (!tape.nodes[static_cast<std::size_t>(i)])
      throw std::logic_error("model: tape node missing (eval-mode forward?)");
    grad = layers_[static_cast<std::size_t>(i)]->backward(
        grad, *tape.nodes[static_cast<std::size_t>(i)]);
  }
}

template <typename T>
void Model<T>::zero_gradients() {
  for (auto& l : layers_)
    for (Tensor<T>* g : l->gradients()) g->fill(T(0));
}

template <typename T>
void Model<T>::sgd_step(double lr, double weight_decay, double momentum) {
  auto params = parameters();
  auto grads = gradients();
  if (momentum > 0.0 && velocity_.empty()) {
    velocity_.reserve(params.size());
    for (Tensor<T>* p : params) velocity_.emplace_back(p->shape());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    const Tensor<T>& g = *grads[i];
    if (momentum > 0.0) {
      Tensor<T>& v = velocity_[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        v[k] = static_cast<T>(momentum * v[k] + (g[k] + weight_decay * p[k]));
        p[k] -= static_cast<T>(lr) * v[k];
      }
    } else {
      for (std::size_t k = 0; k < p.size(); ++k)
        p[k] -= static_cast<T>(lr) * (g[k] + static_cast<T>(weight_decay) * p[k]);
    }
  }
  project();
}

template <typename T>
std::vector<Tensor<T>*> Model<T>::parameters() {
  std::vector<Tensor<T>*> out;
  for (auto& l : layers_)
    for (Tensor<T>* p : l->parameters()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<Tensor<T>*> Model<T>::gradients() {
  std::vector<Tensor<T>*> out;
  for (auto& l : layers_)
    for (Tensor<T>* g : l->gradients()) out.push_back(g);
  return out;
}

template <typename T>
std::vector<Tensor<T>*> Model<T>::state() {
  std::vector<Tensor<T>*> out;
  for (auto& l : layers_)
    for (Tensor<T>* s : l->state()) out.push_back(s);
  return out;
}

template <typename T>
void Model<T>::project() {
  for (auto& l : layers_) l->project();
}

template <typename T>
void Model<T>::override_orientations(int r) {
  const OrientationSet orient = OrientationSet::full_circle(r);
  spec_.orientation_count = r;
  for (auto& l : layers_) {
    if (auto* conv = dynamic_cast<RotConvLayer<T>*>(l.get()))
      conv->set_orientations(orient);
    else if (auto* op = dynamic_cast<OrientationPoolLayer<T>*>(l.get()))
      op->set_orientations(orient);
    else if (auto* head = dynamic_cast<CovariantHeadLayer<T>*>(l.get()))
      head->set_orientations(orient);
  }
}

// ---- snapshots / averaging ------------------------------------------------------

template <typename T>
WeightSnapshot<T> take_snapshot(Model<T>& model) {
  WeightSnapshot<T> snap;
  snap.spec_text = model.spec().to_text();
  for (Tensor<T>* p : model.parameters()) snap.params.push_back(*p);
  for (Tensor<T>* s : model.state()) snap.state.push_back(*s);
  return snap;
}

template <typename T>
void apply_average(Model<T>& model,
                   const std::vector<WeightSnapshot<T>>& snaps) {
  if (snaps.empty())
    throw std::invalid_argument("apply_average: no snapshots");
  const std::string expect = model.spec().to_text();
  for (const auto& s : snaps)
    if (s.spec_text != expect)
      throw std::invalid_argument("apply_average: snapshot spec mismatch");
  auto params = model.parameters();
  auto state = model.state();
  const T inv = static_cast<T>(1.0 / static_cast<double>(snaps.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& dst = *params[i];
    for (std::size_t k = 0; k < dst.size(); ++k) {
      T acc = 0;
      for (const auto& s : snaps) acc += s.params[i][k];
      dst[k] = acc * inv;
    }
  }
  for (std::size_t i = 0; i < state.size(); ++i) {
    Tensor<T>& dst = *state[i];
    for (std::size_t k = 0; k < dst.size(); ++k) {
      T acc = 0;
      for (const auto& s : snaps) acc += s.state[i][k];
      dst[k] = acc * inv;
    }
  }
  model.project();
}

// ---- checkpoint io ---------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'R', 'Q', 'N', 'C', 'K', 'v', '0', '1'};

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}
std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t) {
  write_u32(out, static_cast<std::uint32_t>(t.ndim()));
  for (int d = 0; d < t.ndim(); ++d)
    write_u32(out, static_cast<std::uint32_t>(t.extent(d)));
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(T)));
}

template <typename T>
void read_tensor_into(std::istream& in, Tensor<T>& t) {
  const std::uint32_t nd = read_u32(in);
  Shape shape;
  for (std::uint32_t d = 0; d < nd; ++d)
    shape.push_back(static_cast<int>(read_u32(in)));
  if (shape != t.shape())
    throw std::runtime_error("checkpoint: tensor shape mismatch, expected " +
                             shape_to_string(t.shape()) + ", file has " +
                             shape_to_string(shape));
  in.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.size() * sizeof(T)));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
}

}  // namespace

template <typename T>
void Model<T>::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out.write(kMagic, sizeof(kMagic));
  write_u32(out, static_cast<std::uint32_t>(sizeof(T) * 8));
  write_u32(out, static_cast<std::uint32_t>(epoch));
  const std::string spec_text = spec_.to_text();
  write_u64(out, spec_text.size());
  out.write(spec_text.data(), static_cast<std::streamsize>(spec_text.size()));

  auto* self = const_cast<Model<T>*>(this);
  auto params = self->parameters();
  auto state = self->state();
  write_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const Tensor<T>* p : params) write_tensor(out, *p);
  write_u32(out, static_cast<std::uint32_t>(state.size()));
  for (const Tensor<T>* s : state) write_tensor(out, *s);
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

template <typename T>
Model<T> Model<T>::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const std::uint32_t bits = read_u32(in);
  if (bits != sizeof(T) * 8)
    throw std::runtime_error("checkpoint: precision is " + std::to_string(bits) +
                             "-bit, expected " + std::to_string(sizeof(T) * 8));
  const int epoch = static_cast<int>(read_u32(in));
  const std::uint64_t spec_len = read_u64(in);
  std::string spec_text(spec_len, '\0');
  in.read(spec_text.data(), static_cast<std::streamsize>(spec_len));
  if (!in) throw std::runtime_error("checkpoint: truncated file");

  Model model = Model::build(NetworkSpec::from_text(spec_text));
  model.epoch = epoch;
  auto params = model.parameters();
  auto state = model.state();
  const std::uint32_t n_params = read_u32(in);
  if (n_params != params.size())
    throw std::runtime_error("checkpoint: parameter count mismatch");
  for (Tensor<T>* p : params) read_tensor_into(in, *p);
  const std::uint32_t n_state = read_u32(in);
  if (n_state != state.size())
    throw std::runtime_error("checkpoint: state count mismatch");
  for (Tensor<T>* s : state) read_tensor_into(in, *s);
  in.peek();
  if (!in.eof())
    throw std::runtime_error("checkpoint: trailing bytes in " + path);
  return model;
}

// ---- losses ----------------------------------------------------------------------

template <typename T>
double softmax_cross_entropy(const FieldBatch<T>& probs,
                             const std::vector<int>& labels,
                             FieldBatch<T>* grad) {
  if (probs.size() != labels.size())
    throw std::invalid_argument("cross_entropy: batch/label count mismatch");
  const int B = static_cast<int>(probs.size());
  if (grad) grad->assign(probs.size(), FieldMap<T>{});
  double total = 0.0;
  for (int b = 0; b < B; ++b) {
    const Tensor<T>& p = probs[static_cast<std::size_t>(b)].u;
    const int classes = static_cast<int>(p.size());
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= classes)
      throw std::invalid_argument("cross_entropy: label " + std::to_string(y) +
                                  " out of range [0, " +
                                  std::to_string(classes) + ")");
    const double py = std::max(static_cast<double>(p[y]), 1e-300);
    total -= std::log(py);
    if (grad) {
      Tensor<T> g(p.shape());
      for (int k = 0; k < classes; ++k)
        g[k] = static_cast<T>((static_cast<double>(p[k]) - (k == y ? 1.0 : 0.0)) / B);
      (*grad)[static_cast<std::size_t>(b)].u = std::move(g);
    }
  }
  return total / B;
}

template <typename T>
double unit_vector_l2(const FieldBatch<T>& outputs,
                      const std::vector<std::pair<double, double>>& targets,
                      FieldBatch<T>* grad) {
  if (outputs.size() != targets.size())
    throw std::invalid_argument("unit_vector_l2: batch/target count mismatch");
  const int B = static_cast<int>(outputs.size());
  if (grad) grad->assign(outputs.size(), FieldMap<T>{});
  double total = 0.0;
  for (int b = 0; b < B; ++b) {
    const Tensor<T>& o = outputs[static_cast<std::size_t>(b)].u;
    if (o.size() != 2)
      throw std::invalid_argument("unit_vector_l2: head output must be 2-d");
    const double dc = o[0] - targets[static_cast<std::size_t>(b)].first;
    const double ds = o[1] - targets[static_cast<std::size_t>(b)].second;
    total += 0.5 * (dc * dc + ds * ds);
    if (grad) {
      Tensor<T> g(o.shape());
      g[0] = static_cast<T>(dc / B);
      g[1] = static_cast<T>(ds / B);
      (*grad)[static_cast<std::size_t>(b)].u = std::move(g);
    }
  }
  return total / B;
}

// ---- instantiation ---------------------------------------------------------------

#define ROTEQNET_INSTANTIATE_NETWORK(T)                                         \
  template class Model<T>;                                                      \
  template WeightSnapshot<T> take_snapshot<T>(Model<T>&);                       \
  template void apply_average<T>(Model<T>&,                                     \
                                 const std::vector<WeightSnapshot<T>>&);        \
  template double softmax_cross_entropy<T>(const FieldBatch<T>&,                \
                                           const std::vector<int>&,             \
                                           FieldBatch<T>*);                     \
  template double unit_vector_l2<T>(                                            \
      const FieldBatch<T>&, const std::vector<std::pair<double, double>>&,      \
      FieldBatch<T>*);

ROTEQNET_INSTANTIATE_NETWORK(float)
ROTEQNET_INSTANTIATE_NETWORK(double)
#undef ROTEQNET_INSTANTIATE_NETWORK

}  // namespace roteqnet
