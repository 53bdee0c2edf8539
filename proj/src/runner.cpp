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
#include "roteqnet/runner.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>

#include "roteqnet/rotation.hpp"

namespace roteqnet {

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train config: epochs < 1");
  if (!(lr_start >= lr_end) || !(lr_end > 0.0))
    throw std::invalid_argument(
        "train config: need lr_start >= lr_end > 0");
  if (batch < 1) throw std::invalid_argument("train config: batch < 1");
  if (weight_decay < 0.0)
    throw std::invalid_argument("train config: negative weight decay");
  if (momentum < 0.0 || momentum >= 1.0)
    throw std::invalid_argument("train config: momentum must be in [0, 1)");
  if (average_last < 0)
    throw std::invalid_argument("train config: negative averaging window");
}

double TrainConfig::lr_at(int epoch_index, int total_epochs) const {
  if (total_epochs <= 1 || lr_start == lr_end) return lr_start;
  const double t =
      static_cast<double>(epoch_index) / static_cast<double>(total_epochs - 1);
  return lr_start * std::pow(lr_end / lr_start, t);
}

double angular_difference(double a_deg, double b_deg) {
  double d = std::fmod(std::abs(a_deg - b_deg), 360.0);
  if (d > 180.0) d = 360.0 - d;
  return d;
}

namespace {

template <typename T>
FieldBatch<T> to_batch(const std::vector<Sample<T>>& samples,
                       const std::vector<int>& order, int begin, int end) {
  FieldBatch<T> batch(static_cast<std::size_t>(end - begin));
  for (int i = begin; i < end; ++i) {
    const Sample<T>& s = samples[static_cast<std::size_t>(order[i])];
    Tensor<T> img({s.image.extent(0), s.image.extent(1), 1});
    std::copy(s.image.begin(), s.image.end(), img.begin());
    batch[static_cast<std::size_t>(i - begin)].u = std::move(img);
  }
  return batch;
}

template <typename T>
int argmax_class(const Tensor<T>& scores) {
  int best = 0;
  for (std::size_t k = 1; k < scores.size(); ++k)
    if (scores[k] > scores[best]) best = static_cast<int>(k);
  return best;
}

template <typename T>
double head_angle_deg(const Tensor<T>& out) {
  const double a =
      std::atan2(static_cast<double>(out[1]), static_cast<double>(out[0])) *
      57.295779513082320877;
  return a < 0 ? a + 360.0 : a;
}

std::vector<int> identity_order(std::size_t n) {
  std::vector<int> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
  return order;
}

}  // namespace

template <typename T>
TrainResult train_model(Model<T>& model, const DatasetSplit<T>& data,
                        const TrainConfig& cfg, const std::string& out_dir,
                        std::uint64_t run_seed) {
  cfg.validate();
  if (data.train.empty())
    throw std::invalid_argument("train: empty training split");
  const bool classification = model.spec().loss == LossKind::kCrossEntropy;

  const std::string metrics_path = out_dir + "/metrics.csv";
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    if (!std::filesystem::exists(metrics_path) || model.epoch == 0) {
      std::ofstream head(metrics_path, std::ios::trunc);
      head << "epoch,lr,train_loss,train_err,val_err,wall_seconds\n";
    }
  }

  Rng run_rng(run_seed);
  const Rng dropout_base = run_rng.substream("dropout");

  TrainResult result;
  result.best_val_err = std::numeric_limits<double>::infinity();
  std::deque<WeightSnapshot<T>> recent;

  const int n = static_cast<int>(data.train.size());
  const int steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  std::vector<int> order = identity_order(data.train.size());

  const int first_epoch = model.epoch;
  const int last_epoch = first_epoch + cfg.epochs;
  for (int epoch = first_epoch; epoch < last_epoch; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = cfg.lr_at(epoch - first_epoch, cfg.epochs);

    Rng shuffle_rng = run_rng.substream("shuffle").substream(
        static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    double err_sum = 0.0;
    long err_count = 0;
    for (int step = 0; step < steps_per_epoch; ++step) {
      const int b0 = step * cfg.batch;
      const int b1 = std::min(n, b0 + cfg.batch);
      auto batch = std::make_shared<const FieldBatch<T>>(
          to_batch(data.train, order, b0, b1));

      StepInfo info;
      info.step = static_cast<std::uint64_t>(epoch) *
                      static_cast<std::uint64_t>(steps_per_epoch) +
                  static_cast<std::uint64_t>(step);
      info.rng = &dropout_base;

      Tape<T> tape;
      model.zero_gradients();
      FieldBatch<T> out = model.forward(batch, Mode::kTrain, &tape, info);

      FieldBatch<T> grad;
      if (classification) {
        std::vector<int> labels(static_cast<std::size_t>(b1 - b0));
        for (int i = b0; i < b1; ++i)
          labels[static_cast<std::size_t>(i - b0)] =
              data.train[static_cast<std::size_t>(order[i])].label;
        loss_sum += softmax_cross_entropy(out, labels, &grad) * (b1 - b0);
        for (int i = 0; i < b1 - b0; ++i)
          err_sum += argmax_class(out[static_cast<std::size_t>(i)].u) !=
                     labels[static_cast<std::size_t>(i)];
      } else {
        std::vector<std::pair<double, double>> targets(
            static_cast<std::size_t>(b1 - b0));
        for (int i = b0; i < b1; ++i) {
          double c, s;
          cos_sin_deg(data.train[static_cast<std::size_t>(order[i])].angle_deg,
                      c, s);
          targets[static_cast<std::size_t>(i - b0)] = {c, s};
        }
        loss_sum += unit_vector_l2(out, targets, &grad) * (b1 - b0);
        for (int i = b0; i < b1; ++i)
          err_sum += angular_difference(
              head_angle_deg(out[static_cast<std::size_t>(i - b0)].u),
              data.train[static_cast<std::size_t>(order[i])].angle_deg);
      }
      err_count += b1 - b0;

      model.backward(tape, grad);
      model.sgd_step(lr, cfg.weight_decay, cfg.momentum);
    }

    model.epoch = epoch + 1;
    if (cfg.average_last > 0) {
      recent.push_back(take_snapshot(model));
      while (static_cast<int>(recent.size()) > cfg.average_last)
        recent.pop_front();
    }

    const std::vector<Sample<T>>& val =
        !data.val.empty() ? data.val : data.test;
    double val_err = 0.0;
    if (!val.empty()) {
      val_err = classification
                    ? evaluate_classifier(model, val).error_rate
                    : evaluate_covariant(model, val).mean_angular_error;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.train_loss = loss_sum / err_count;
    m.train_err = err_sum / err_count;
    m.val_err = val_err;
    m.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    result.metrics.push_back(m);

    if (!out_dir.empty()) {
      std::ofstream csv(metrics_path, std::ios::app);
      char line[256];
      std::snprintf(line, sizeof(line), "%d,%.9g,%.9g,%.9g,%.9g,%.3f\n",
                    m.epoch, m.lr, m.train_loss, m.train_err, m.val_err,
                    m.wall_seconds);
      csv << line;
    }
    if (val_err < result.best_val_err) {
      result.best_val_err = val_err;
      result.best_epoch = epoch;
      if (!out_dir.empty()) model.save(out_dir + "/checkpoint-best.ckpt");
    }
  }

  if (cfg.average_last > 0 && !recent.empty()) {
    apply_average(model,
                  std::vector<WeightSnapshot<T>>(recent.begin(), recent.end()));
  }
  if (!out_dir.empty()) model.save(out_dir + "/checkpoint-final.ckpt");
  return result;
}

namespace {

// Shared batched-evaluation driver: calls `consume(sample_index, scores)`
// for every evaluated sample.
template <typename T, typename Consume>
void for_each_output(Model<T>& model, const std::vector<Sample<T>>& samples,
                     int max_samples, int batch, double rotate_deg,
                     Consume&& consume) {
  const int n = max_samples > 0
                    ? std::min<int>(max_samples, static_cast<int>(samples.size()))
                    : static_cast<int>(samples.size());
  const auto order = identity_order(samples.size());
  for (int b0 = 0; b0 < n; b0 += batch) {
    const int b1 = std::min(n, b0 + batch);
    FieldBatch<T> fields = to_batch(samples, order, b0, b1);
    if (rotate_deg != 0.0) {
      for (auto& f : fields) f.u = rotate_image(f.u, rotate_deg);
    }
    auto ptr = std::make_shared<const FieldBatch<T>>(std::move(fields));
    FieldBatch<T> out = model.forward(ptr, Mode::kEval, nullptr);
    for (int i = b0; i < b1; ++i)
      consume(i, out[static_cast<std::size_t>(i - b0)].u);
  }
}

}  // namespace

template <typename T>
EvalReport evaluate_classifier(Model<T>& model,
                               const std::vector<Sample<T>>& samples,
                               int tta_k, int max_samples, int batch) {
  if (tta_k < 1)
    throw std::invalid_argument("evaluate: augmentation count must be >= 1");
  const int n = max_samples > 0
                    ? std::min<int>(max_samples, static_cast<int>(samples.size()))
                    : static_cast<int>(samples.size());
  std::vector<std::vector<double>> scores(static_cast<std::size_t>(n));
  for (int k = 0; k < tta_k; ++k) {
    const double angle = tta_k == 1 ? 0.0 : 90.0 * k / (tta_k - 1);
    for_each_output(model, samples, max_samples, batch, angle,
                    [&](int i, const Tensor<T>& out) {
                      auto& acc = scores[static_cast<std::size_t>(i)];
                      if (acc.empty()) acc.assign(out.size(), 0.0);
                      for (std::size_t c = 0; c < out.size(); ++c)
                        acc[c] += static_cast<double>(out[c]) / tta_k;
                    });
  }
  EvalReport report;
  report.n = n;
  long wrong = 0;
  for (int i = 0; i < n; ++i) {
    const auto& s = scores[static_cast<std::size_t>(i)];
    int best = 0;
    for (std::size_t c = 1; c < s.size(); ++c)
      if (s[c] > s[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
    wrong += best != samples[static_cast<std::size_t>(i)].label;
  }
  report.error_rate = n ? static_cast<double>(wrong) / n : 0.0;
  return report;
}

template <typename T>
EvalReport evaluate_covariant(Model<T>& model,
                              const std::vector<Sample<T>>& samples,
                              int max_samples, int batch) {
  EvalReport report;
  double err_sum = 0.0;
  long below15 = 0, above150 = 0, count = 0;
  for_each_output(model, samples, max_samples, batch, 0.0,
                  [&](int i, const Tensor<T>& out) {
                    const double err = angular_difference(
                        head_angle_deg(out),
                        samples[static_cast<std::size_t>(i)].angle_deg);
                    err_sum += err;
                    below15 += err < 15.0;
                    above150 += err > 150.0;
                    ++count;
                  });
  report.n = static_cast<int>(count);
  if (count) {
    report.mean_angular_error = err_sum / count;
    report.frac_below_15 = static_cast<double>(below15) / count;
    report.frac_above_150 = static_cast<double>(above150) / count;
  }
  return report;
}

template <typename T>
std::vector<int> predict_classes(Model<T>& model,
                                 const std::vector<Sample<T>>& samples,
                                 int tta_k, int max_samples, int batch) {
  if (tta_k < 1)
    throw std::invalid_argument("predict: augmentation count must be >= 1");
  const int n = max_samples > 0
                    ? std::min<int>(max_samples, static_cast<int>(samples.size()))
                    : static_cast<int>(samples.size());
  std::vector<std::vector<double>> scores(static_cast<std::size_t>(n));
  for (int k = 0; k < tta_k; ++k) {
    const double angle = tta_k == 1 ? 0.0 : 90.0 * k / (tta_k - 1);
    for_each_output(model, samples, max_samples, batch, angle,
                    [&](int i, const Tensor<T>& out) {
                      auto& acc = scores[static_cast<std::size_t>(i)];
                      if (acc.empty()) acc.assign(out.size(), 0.0);
                      for (std::size_t c = 0; c < out.size(); ++c)
                        acc[c] += static_cast<double>(out[c]) / tta_k;
                    });
  }
  std::vector<int> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto& s = scores[static_cast<std::size_t>(i)];
    int best = 0;
    for (std::size_t c = 1; c < s.size(); ++c)
      if (s[c] > s[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

template <typename T>
double rotation_invariance_rate(Model<T>& model,
                                const std::vector<Sample<T>>& samples,
                                int max_samples, int batch) {
  const int n = max_samples > 0
                    ? std::min<int>(max_samples, static_cast<int>(samples.size()))
                    : static_cast<int>(samples.size());
  std::vector<std::array<int, 4>> preds(static_cast<std::size_t>(n));
  for (int q = 0; q < 4; ++q) {
    for_each_output(model, samples, max_samples, batch, 90.0 * q,
                    [&](int i, const Tensor<T>& out) {
                      preds[static_cast<std::size_t>(i)]
                           [static_cast<std::size_t>(q)] = argmax_class(out);
                    });
  }
  long stable = 0;
  for (const auto& p : preds)
    stable += (p[0] == p[1] && p[0] == p[2] && p[0] == p[3]);
  return n ? static_cast<double>(stable) / n : 0.0;
}

template <typename T>
Tensor<T> predict_scores(Model<T>& model, const Tensor<T>& image) {
  return test_time_augment(model, image, 1);
}

template <typename T>
Tensor<T> test_time_augment(Model<T>& model, const Tensor<T>& image, int k) {
  if (k < 1)
    throw std::invalid_argument(
        "test_time_augment: need at least one evaluation angle");
  Tensor<T> acc;
  for (int i = 0; i < k; ++i) {
    const double angle = k == 1 ? 0.0 : 90.0 * i / (k - 1);
    Tensor<T> rotated = angle == 0.0 ? image : rotate_image(image, angle);
    Tensor<T> img({rotated.extent(0), rotated.extent(1), 1});
    std::copy(rotated.begin(), rotated.end(), img.begin());
    FieldBatch<T> batch(1);
    batch[0].u = std::move(img);
    auto ptr = std::make_shared<const FieldBatch<T>>(std::move(batch));
    FieldBatch<T> out = model.forward(ptr, Mode::kEval, nullptr);
    if (acc.empty())
      acc = Tensor<T>(out[0].u.shape());
    for (std::size_t c = 0; c < acc.size(); ++c)
      acc[c] += out[0].u[c] / static_cast<T>(k);
  }
  return acc;
}

template <typename T>
double predict_angle(Model<T>& model, const Tensor<T>& image) {
  Tensor<T> out = predict_scores(model, image);
  if (out.size() != 2)
    throw std::invalid_argument("predict_angle: model head is not covariant");
  return head_angle_deg(out);
}

#define ROTEQNET_INSTANTIATE_RUNNER(T)                                          \
  template TrainResult train_model<T>(Model<T>&, const DatasetSplit<T>&,        \
                                      const TrainConfig&, const std::string&,   \
                                      std::uint64_t);                           \
  template EvalReport evaluate_classifier<T>(                                   \
      Model<T>&, const std::vector<Sample<T>>&, int, int, int);                 \
  template EvalReport evaluate_covariant<T>(                                    \
      Model<T>&, const std::vector<Sample<T>>&, int, int);                      \
  template std::vector<int> predict_classes<T>(                                 \
      Model<T>&, const std::vector<Sample<T>>&, int, int, int);                 \
  template double rotation_invariance_rate<T>(                                  \
      Model<T>&, const std::vector<Sample<T>>&, int, int);                      \
  template Tensor<T> test_time_augment<T>(Model<T>&, const Tensor<T>&, int);    \
  template Tensor<T> predict_scores<T>(Model<T>&, const Tensor<T>&);            \
  template double predict_angle<T>(Model<T>&, const Tensor<T>&);

ROTEQNET_INSTANTIATE_RUNNER(float)
ROTEQNET_INSTANTIATE_RUNNER(double)
#undef ROTEQNET_INSTANTIATE_RUNNER

}  // namespace roteqnet
