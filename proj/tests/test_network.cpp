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
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "oracles.hpp"
#include "roteqnet/runner.hpp"

using namespace roteqnet;

namespace {

std::string temp_dir(const char* tag) {
  auto dir = std::filesystem::temp_directory_path() /
             (std::string("roteqnet-test-") + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

NetworkSpec toy_classifier(int r, std::uint64_t seed) {
  NetworkSpec spec;
  spec.input = {8, 8, 1, false};
  spec.orientation_count = r;
  spec.seed = seed;
  spec.layers = {{.kind = LayerSpec::Kind::kRotConv,
                  .filters = 2,
                  .size = 3,
                  .same_pad = true,
                  .with_op = true},
                 {.kind = LayerSpec::Kind::kSpatialPool, .window = 0},
                 {.kind = LayerSpec::Kind::kFullyConnected, .units = 4},
                 {.kind = LayerSpec::Kind::kSoftmaxHead}};
  return spec;
}

template <typename T>
BatchPtr<T> image_batch(Rng& rng, int n, int h, int w) {
  FieldBatch<T> batch(static_cast<std::size_t>(n));
  for (auto& f : batch) {
    f.u = Tensor<T>({h, w, 1});
    for (auto& v : f.u) v = static_cast<T>(rng.uniform(0, 1));
  }
  return std::make_shared<const FieldBatch<T>>(std::move(batch));
}

}  // namespace

TEST_SUITE("network") {

TEST_CASE("parameter count of the large classification preset") {
  NetworkSpec spec = preset_mnist_table2(17, 1.0, 1);
  Model<double> model = Model<double>::build(spec);
  const std::size_t count = model.parameter_count();
  CHECK(count >= 90000);
  CHECK(count <= 110000);

  // Storage is independent of the orientation count.
  for (int r : {4, 8, 21}) {
    Model<double> other = Model<double>::build(preset_mnist_table2(r, 1.0, 1));
    CHECK(other.parameter_count() == count);
  }

  // The regression preset matches its small published size.
  Model<double> cov = Model<double>::build(preset_covariant48(21, 1));
  CHECK(cov.parameter_count() == 9561);
}

TEST_CASE("degenerate specs are rejected, tiny specs count exactly") {
  NetworkSpec empty;
  empty.input = {8, 8, 1, false};
  CHECK_THROWS_AS(Model<double>::build(empty), std::invalid_argument);

  // One 1x1 rotating convolution with one filter on one channel stores a
  // single learnable weight; batch norm adds none.
  NetworkSpec tiny;
  tiny.input = {1, 1, 1, false};
  tiny.orientation_count = 4;
  tiny.loss = LossKind::kUnitVectorL2;
  tiny.layers = {{.kind = LayerSpec::Kind::kScalarBatchNorm},
                 {.kind = LayerSpec::Kind::kRotConv,
                  .filters = 1,
                  .size = 1,
                  .same_pad = false,
                  .with_op = false},
                 {.kind = LayerSpec::Kind::kCovariantHead}};
  Model<double> model = Model<double>::build(tiny);
  CHECK(model.parameter_count() == 1);

  // Head in the middle is invalid.
  NetworkSpec bad = toy_classifier(4, 1);
  bad.layers.insert(bad.layers.begin(),
                    LayerSpec{.kind = LayerSpec::Kind::kSoftmaxHead});
  CHECK_THROWS_AS(Model<double>::build(bad), std::invalid_argument);

  // Shape break is reported with the layer index.
  NetworkSpec mis = toy_classifier(4, 1);
  mis.layers[2].units = 0;
  CHECK_THROWS_WITH_AS(Model<double>::build(mis), doctest::Contains("layer 2"),
                       std::invalid_argument);
}

TEST_CASE("spec text round-trips") {
  NetworkSpec spec = preset_mnist_table2(17, 0.5, 99);
  const std::string text = spec.to_text();
  NetworkSpec parsed = NetworkSpec::from_text(text);
  CHECK(parsed.to_text() == text);
  CHECK(parsed.orientation_count == 17);
  CHECK(parsed.seed == 99);

  NetworkSpec cov = preset_covariant48(21, 3);
  CHECK(NetworkSpec::from_text(cov.to_text()).to_text() == cov.to_text());

  CHECK_THROWS_AS(NetworkSpec::from_text("bogus"), std::invalid_argument);
}

TEST_CASE("zero-weight classifier outputs uniform probabilities") {
  Model<double> model = Model<double>::build(toy_classifier(4, 7));
  for (Tensor<double>* p : model.parameters()) p->fill(0.0);
  Rng rng(1);
  auto in = image_batch<double>(rng, 3, 8, 8);
  FieldBatch<double> probs = model.forward(in, Mode::kEval, nullptr);
  for (const auto& p : probs)
    for (double v : p.u) CHECK(v == doctest::Approx(0.25));
  const double loss = softmax_cross_entropy<double>(probs, {0, 1, 3}, nullptr);
  CHECK(loss == doctest::Approx(std::log(4.0)));
}

TEST_CASE("forward is deterministic") {
  Model<float> model = Model<float>::build(toy_classifier(8, 21));
  Rng rng(2);
  auto in = image_batch<float>(rng, 2, 8, 8);
  FieldBatch<float> a = model.forward(in, Mode::kEval, nullptr);
  FieldBatch<float> b = model.forward(in, Mode::kEval, nullptr);
  for (std::size_t s = 0; s < a.size(); ++s)
    CHECK(oracles::max_abs_diff(a[s].u, b[s].u) == 0.0);

  // Train mode with dropout is reproducible for a fixed step and seed.
  NetworkSpec spec = toy_classifier(4, 5);
  spec.layers.insert(spec.layers.begin() + 3,
                     LayerSpec{.kind = LayerSpec::Kind::kDropout, .rate = 0.5});
  Model<float> m1 = Model<float>::build(spec);
  Model<float> m2 = Model<float>::build(spec);
  Rng drng(77);
  StepInfo step{3, &drng};
  Tape<float> t1, t2;
  FieldBatch<float> o1 = m1.forward(in, Mode::kTrain, &t1, step);
  FieldBatch<float> o2 = m2.forward(in, Mode::kTrain, &t2, step);
  for (std::size_t s = 0; s < o1.size(); ++s)
    CHECK(oracles::max_abs_diff(o1[s].u, o2[s].u) == 0.0);
}

TEST_CASE("backward basics") {
  Model<double> model = Model<double>::build(toy_classifier(4, 11));
  Rng rng(3);
  auto in = image_batch<double>(rng, 2, 8, 8);

  // Zero head gradient: all parameter gradients stay zero.
  Tape<double> tape;
  model.zero_gradients();
  FieldBatch<double> out = model.forward(in, Mode::kTrain, &tape, {});
  FieldBatch<double> zero_grad(out.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    zero_grad[i].u = Tensor<double>(out[i].u.shape());
  model.backward(tape, zero_grad);
  for (Tensor<double>* g : model.gradients())
    for (double v : *g) CHECK(v == 0.0);

  // A tape is consumed by exactly one backward pass.
  CHECK_THROWS_AS(model.backward(tape, zero_grad), std::logic_error);

  // Eval-mode forward records no tape to run backward from.
  Tape<double> empty;
  CHECK_THROWS_AS(model.backward(empty, zero_grad), std::logic_error);
}

TEST_CASE("single dense layer inside a model matches the standalone layer") {
  NetworkSpec spec;
  spec.input = {1, 1, 3, false};
  spec.orientation_count = 4;
  spec.seed = 21;
  spec.layers = {{.kind = LayerSpec::Kind::kFullyConnected, .units = 2},
                 {.kind = LayerSpec::Kind::kSoftmaxHead}};
  Model<double> model = Model<double>::build(spec);

  FullyConnectedLayer<double> standalone(3, 2);
  auto* inner = dynamic_cast<FullyConnectedLayer<double>*>(model.layer(0));
  REQUIRE(inner != nullptr);
  standalone.weights() = inner->weights();
  standalone.bias() = inner->bias();

  FieldBatch<double> batch(1);
  batch[0].u = Tensor<double>({1, 1, 3}, {0.2, -0.4, 1.1});
  auto in = std::make_shared<const FieldBatch<double>>(batch);

  Tape<double> tape;
  model.zero_gradients();
  FieldBatch<double> probs = model.forward(in, Mode::kTrain, &tape, {});
  FieldBatch<double> grad;
  softmax_cross_entropy<double>(probs, {1}, &grad);
  model.backward(tape, grad);

  std::unique_ptr<TapeNode<double>> node;
  for (Tensor<double>* g : standalone.gradients()) g->fill(0.0);
  standalone.forward(in, Mode::kTrain, {}, &node);
  standalone.backward(grad, *node);

  CHECK(oracles::max_abs_diff(*model.gradients()[0], *standalone.gradients()[0]) == 0.0);
  CHECK(oracles::max_abs_diff(*model.gradients()[1], *standalone.gradients()[1]) == 0.0);
}

TEST_CASE("three-block composite passes finite differences") {
  Model<double> model = Model<double>::build(toy_classifier(5, 13));
  Rng rng(4);
  auto in = image_batch<double>(rng, 2, 8, 8);
  const std::vector<int> labels = {1, 2};

  auto loss_value = [&]() {
    Tape<double> tape;
    FieldBatch<double> out = model.forward(in, Mode::kTrain, &tape, {});
    return softmax_cross_entropy<double>(out, labels, nullptr);
  };

  model.zero_gradients();
  Tape<double> tape;
  FieldBatch<double> out = model.forward(in, Mode::kTrain, &tape, {});
  FieldBatch<double> grad;
  softmax_cross_entropy<double>(out, labels, &grad);
  model.backward(tape, grad);

  auto params = model.parameters();
  auto grads = model.gradients();
  const double h = 1e-6;
  int tested = 0;
  for (int t = 0; t < 40 && tested < 20; ++t) {
    const std::size_t pi = rng.uniform_int(params.size());
    Tensor<double>& p = *params[pi];
    const std::size_t k = rng.uniform_int(p.size());
    if (p[k] == 0.0) continue;  // masked filter cell
    const double saved = p[k];
    p[k] = saved + h;
    const double lp = loss_value();
    p[k] = saved - h;
    const double lm = loss_value();
    p[k] = saved;
    const double numeric = (lp - lm) / (2 * h);
    const double analytic = (*grads[pi])[k];
    CHECK(std::abs(numeric - analytic) <=
          1e-4 * std::max({std::abs(numeric), std::abs(analytic), 1e-3}));
    ++tested;
  }
  CHECK(tested == 20);
}

TEST_CASE("sgd update rule") {
  Model<double> model = Model<double>::build(toy_classifier(4, 17));
  auto params = model.parameters();
  std::vector<Tensor<double>> before;
  for (Tensor<double>* p : params) before.push_back(*p);

  // Zero learning rate leaves everything alone.
  model.zero_gradients();
  model.sgd_step(0.0, 0.01);
  for (std::size_t i = 0; i < params.size(); ++i)
    CHECK(oracles::max_abs_diff(*params[i], before[i]) == 0.0);

  // Zero gradient with weight decay scales parameters by (1 - lr*wd).
  model.sgd_step(0.1, 0.01);
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t k = 0; k < params[i]->size(); ++k)
      CHECK((*params[i])[k] ==
            doctest::Approx(0.999 * before[i][k]).epsilon(1e-12));

  // Masked filter cells stay exactly zero through noisy updates.
  for (Tensor<double>* g : model.gradients())
    for (auto& v : *g) v = 0.37;
  model.sgd_step(0.05, 0.01);
  auto* conv = dynamic_cast<RotConvLayer<double>*>(model.layer(0));
  REQUIRE(conv != nullptr);
  // 3x3 filters have full circular support; build a 5x5 case instead.
  NetworkSpec spec5 = toy_classifier(4, 18);
  spec5.layers[0].size = 5;
  Model<double> model5 = Model<double>::build(spec5);
  for (Tensor<double>* g : model5.gradients())
    for (auto& v : *g) v = 0.37;
  model5.sgd_step(0.05, 0.01);
  auto* conv5 = dynamic_cast<RotConvLayer<double>*>(model5.layer(0));
  REQUIRE(conv5 != nullptr);
  const Tensor<double>& w = conv5->filters()[0].wu;
  CHECK(w(0, 0, 0) == 0.0);
  CHECK(w(0, 4, 0) == 0.0);
  CHECK(w(4, 0, 0) == 0.0);
  CHECK(w(4, 4, 0) == 0.0);
  CHECK(w(2, 2, 0) != 0.0);
}

TEST_CASE("weight averaging") {
  Model<double> model = Model<double>::build(toy_classifier(4, 19));
  WeightSnapshot<double> snap = take_snapshot(model);

  // k = 1 is the identity.
  apply_average(model, {snap});
  WeightSnapshot<double> after = take_snapshot(model);
  for (std::size_t i = 0; i < snap.params.size(); ++i)
    CHECK(oracles::max_abs_diff(after.params[i], snap.params[i]) == 0.0);

  // p and -p average to zero.
  WeightSnapshot<double> neg = snap;
  for (auto& t : neg.params)
    for (auto& v : t) v = -v;
  apply_average(model, {snap, neg});
  for (Tensor<double>* p : model.parameters())
    for (double v : *p) CHECK(v == 0.0);

  // {1,2,3} * w averages to 2w.
  WeightSnapshot<double> s1 = snap, s2 = snap, s3 = snap;
  for (auto& t : s2.params)
    for (auto& v : t) v *= 2.0;
  for (auto& t : s3.params)
    for (auto& v : t) v *= 3.0;
  apply_average(model, {s1, s2, s3});
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t k = 0; k < params[i]->size(); ++k)
      CHECK((*params[i])[k] == doctest::Approx(2.0 * snap.params[i][k]));

  // Snapshots from a different architecture are rejected.
  Model<double> other = Model<double>::build(toy_classifier(8, 19));
  WeightSnapshot<double> wrong = take_snapshot(other);
  CHECK_THROWS_AS(apply_average(model, {wrong}), std::invalid_argument);
  CHECK_THROWS_AS(apply_average(model, {}), std::invalid_argument);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
  const std::string dir = temp_dir("ckpt");
  Model<double> model = Model<double>::build(toy_classifier(4, 23));
  model.epoch = 5;
  const std::string p1 = dir + "/a.ckpt";
  const std::string p2 = dir + "/b.ckpt";
  model.save(p1);
  Model<double> loaded = Model<double>::load(p1);
  CHECK(loaded.epoch == 5);
  loaded.save(p2);
  CHECK(read_file(p1) == read_file(p2));

  // Forward after load is bit-identical to before save.
  Rng rng(5);
  auto in = image_batch<double>(rng, 2, 8, 8);
  FieldBatch<double> a = model.forward(in, Mode::kEval, nullptr);
  FieldBatch<double> b = loaded.forward(in, Mode::kEval, nullptr);
  for (std::size_t s = 0; s < a.size(); ++s)
    CHECK(oracles::max_abs_diff(a[s].u, b[s].u) == 0.0);

  // Corrupted magic and truncation are detected.
  std::string bytes = read_file(p1);
  bytes[0] = 'X';
  {
    std::ofstream bad(dir + "/bad.ckpt", std::ios::binary);
    bad << bytes;
  }
  CHECK_THROWS_WITH_AS(Model<double>::load(dir + "/bad.ckpt"),
                       doctest::Contains("magic"), std::runtime_error);
  {
    std::ofstream trunc(dir + "/trunc.ckpt", std::ios::binary);
    trunc << read_file(p1).substr(0, 100);
  }
  CHECK_THROWS_AS(Model<double>::load(dir + "/trunc.ckpt"), std::runtime_error);

  // Loading at the wrong precision is an error, not a reinterpretation.
  CHECK_THROWS_WITH_AS(Model<float>::load(p1), doctest::Contains("precision"),
                       std::runtime_error);
}

TEST_CASE("training is deterministic and reaches zero loss on a toy problem") {
  // Two identical runs produce bit-identical weights; the loss falls.
  auto make_data = [] {
    DatasetSplit<double> data;
    Rng rng(9);
    for (int i = 0; i < 32; ++i) {
      Sample<double> s;
      s.image = Tensor<double>({8, 8});
      for (auto& v : s.image) v = rng.uniform(0, 0.2);
      s.label = i % 4;
      // Label encoded in the peak brightness: a position-free cue that a
      // globally pooled invariant net can pick up.
      const int ci = 1 + static_cast<int>(rng.uniform_int(5));
      const int cj = 1 + static_cast<int>(rng.uniform_int(5));
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
          s.image(ci + a, cj + b) = 0.25 * (s.label + 1);
      data.train.push_back(std::move(s));
    }
    data.val = data.train;
    return data;
  };

  TrainConfig cfg;
  cfg.epochs = 100;
  cfg.lr_start = 0.2;
  cfg.lr_end = 0.05;
  cfg.weight_decay = 0.0;
  cfg.batch = 8;

  DatasetSplit<double> data = make_data();
  Model<double> m1 = Model<double>::build(toy_classifier(4, 31));
  Model<double> m2 = Model<double>::build(toy_classifier(4, 31));
  TrainResult r1 = train_model(m1, data, cfg, "", 42);
  TrainResult r2 = train_model(m2, data, cfg, "", 42);

  auto p1 = m1.parameters();
  auto p2 = m2.parameters();
  for (std::size_t i = 0; i < p1.size(); ++i)
    CHECK(oracles::max_abs_diff(*p1[i], *p2[i]) == 0.0);
  for (std::size_t e = 0; e < r1.metrics.size(); ++e) {
    CHECK(r1.metrics[e].train_loss == r2.metrics[e].train_loss);
    CHECK(r1.metrics[e].val_err == r2.metrics[e].val_err);
  }
  CHECK(r1.metrics.back().train_loss < r1.metrics.front().train_loss);
  CHECK(r1.metrics.back().train_loss < 0.5 * r1.metrics.front().train_loss);
}

TEST_CASE("momentum accelerates a quadratic descent") {
  // p <- p - lr*v with v = m*v + g on a 1-parameter quadratic.
  NetworkSpec spec;
  spec.input = {1, 1, 1, false};
  spec.orientation_count = 1;
  spec.loss = LossKind::kUnitVectorL2;
  spec.layers = {{.kind = LayerSpec::Kind::kRotConv,
                  .filters = 1,
                  .size = 1,
                  .same_pad = false,
                  .with_op = false},
                 {.kind = LayerSpec::Kind::kCovariantHead}};
  Model<double> model = Model<double>::build(spec);
  Tensor<double>& p = *model.parameters()[0];
  Tensor<double>& g = *model.gradients()[0];
  p[0] = 4.0;
  double v = 0.0, expect = 4.0;
  for (int i = 0; i < 5; ++i) {
    g[0] = 2.0 * p[0];
    model.sgd_step(0.1, 0.0, 0.9);
    v = 0.9 * v + 2.0 * expect;
    expect -= 0.1 * v;
    CHECK(p[0] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("a 64-sample rotated-digit subset is memorised within 200 steps") {
  const char* env = std::getenv("ROTEQNET_MNIST_DIR");
  const std::string dir = env && *env ? env : ROTEQNET_MNIST_DIR;
  if (!std::filesystem::exists(dir + "/train-images-idx3-ubyte")) {
    MESSAGE("MNIST files not found under ", dir, "; skipping the overfit test");
    return;
  }
  Tensor<float> images = read_idx<float>(dir + "/train-images-idx3-ubyte");
  Tensor<float> labels_t = read_idx<float>(dir + "/train-labels-idx1-ubyte");
  std::vector<int> labels(labels_t.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    labels[i] = static_cast<int>(labels_t[i]);
  DatasetSplit<float> rot =
      make_mnist_rot(images, labels, 7, MnistRotSizes{64, 0, 0});

  // Small rotation-equivariant net, no regularisation: it must overfit.
  NetworkSpec spec;
  spec.input = {28, 28, 1, false};
  spec.orientation_count = 4;
  spec.seed = 3;
  LayerSpec rc{.kind = LayerSpec::Kind::kRotConv,
               .filters = 4,
               .size = 9,
               .same_pad = true,
               .with_op = true};
  LayerSpec rc2 = rc;
  rc2.filters = 8;
  spec.layers = {{.kind = LayerSpec::Kind::kScalarBatchNorm},
                 rc,
                 {.kind = LayerSpec::Kind::kSpatialPool, .window = 2},
                 {.kind = LayerSpec::Kind::kVectorBatchNorm},
                 rc2,
                 {.kind = LayerSpec::Kind::kSpatialPool, .window = 0},
                 {.kind = LayerSpec::Kind::kFullyConnected, .units = 32},
                 {.kind = LayerSpec::Kind::kRelu},
                 {.kind = LayerSpec::Kind::kFullyConnected, .units = 10},
                 {.kind = LayerSpec::Kind::kSoftmaxHead}};
  Model<float> model = Model<float>::build(spec);

  TrainConfig cfg;
  cfg.epochs = 200;  // one full-batch step per epoch
  cfg.lr_start = 0.1;
  cfg.lr_end = 0.02;
  cfg.weight_decay = 0.0;
  cfg.batch = 64;
  TrainResult result = train_model(model, rot, cfg, "", 11);
  CHECK(result.metrics.back().train_loss < 0.1);
}

}  // TEST_SUITE
