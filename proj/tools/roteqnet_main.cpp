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

// Command-line front end: dataset preparation, training, evaluation,
// property self-checks and single-image prediction.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "roteqnet/checks.hpp"
#include "roteqnet/runner.hpp"

namespace {

using namespace roteqnet;

struct PrepareArgs {
  std::string out;
  std::string mnist_dir;
  std::string amat_trainvalid, amat_test;
  std::vector<std::string> shape_kv;  // k=v tokens after --synthetic-shapes
  bool synthetic = false;
  std::uint64_t seed = 7;
};

struct TrainArgs {
  std::string data, out, resume;
  std::string preset = "mnist-table2";
  int r = 0;  // 0: preset default
  std::uint64_t seed = 1;
  int epochs = -1;
  double lr_start = -1, lr_end = -1, weight_decay = -1, momentum = 0;
  int batch = -1;
  int avg_last = -1;
  double filters_multiplier = 1.0;
  int precision = 32;
};

struct EvalArgs {
  std::string checkpoint, data, out;
  std::string split = "test";
  int tta = 1;
  int max_samples = 0;
  int r = 0;
  int batch = 256;
};

struct CheckArgs {
  std::uint64_t seed = 0x20e9a5eedULL;
  int precision = 64;
  bool skip_gradients = false;
  bool break_realign_sign = false;
};

struct PredictArgs {
  std::string checkpoint, image;
  double rotate = 0.0;
  int tta = 1;
};

void echo_config(CLI::App& app, const std::string& out_dir) {
  if (out_dir.empty()) return;
  std::filesystem::create_directories(out_dir);
  std::ofstream cfg(out_dir + "/config.txt", std::ios::trunc);
  cfg << app.config_to_str(true, true);
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

int checkpoint_precision(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[8];
  std::uint32_t bits = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&bits), 4);
  if (!in) throw std::runtime_error("checkpoint " + path + " is truncated");
  return static_cast<int>(bits);
}

// ---- prepare --------------------------------------------------------------

int cmd_prepare(CLI::App& app, const PrepareArgs& args) {
  echo_config(app, args.out);

  DatasetSplit<float> split;
  if (args.synthetic) {
    int n = 1000, test = 0, val = 0, size = 48;
    double noise = 0.05;
    std::uint64_t seed = args.seed;
    for (const std::string& kv : args.shape_kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos)
        throw CLI::ValidationError("--synthetic-shapes",
                                   "expected key=value, got '" + kv + "'");
      const std::string key = kv.substr(0, eq);
      const std::string val_s = kv.substr(eq + 1);
      if (key == "n") n = std::stoi(val_s);
      else if (key == "test") test = std::stoi(val_s);
      else if (key == "val") val = std::stoi(val_s);
      else if (key == "size") size = std::stoi(val_s);
      else if (key == "noise") noise = std::stod(val_s);
      else if (key == "seed") seed = std::stoull(val_s);
      else
        throw CLI::ValidationError("--synthetic-shapes",
                                   "unknown key '" + key + "'");
    }
    split = make_oriented_shapes<float>(n, test, seed, size, noise, val);
  } else if (!args.amat_trainvalid.empty()) {
    if (args.amat_test.empty())
      throw CLI::ValidationError("--amat-test", "required with --amat-trainvalid");
    auto trainvalid = read_amat<float>(args.amat_trainvalid);
    auto test = read_amat<float>(args.amat_test);
    if (trainvalid.size() < 12000)
      throw std::runtime_error("amat: expected at least 12000 train+val rows");
    split.train.assign(trainvalid.begin(), trainvalid.begin() + 10000);
    split.val.assign(trainvalid.begin() + 10000, trainvalid.begin() + 12000);
    split.test = std::move(test);
    std::ostringstream prov;
    prov << "kind mnist-rot-amat\n"
         << "trainvalid-digest " << hex64(file_digest(args.amat_trainvalid))
         << "\n"
         << "test-digest " << hex64(file_digest(args.amat_test)) << "\n";
    split.provenance = prov.str();
  } else {
    if (args.mnist_dir.empty())
      throw CLI::ValidationError(
          "--mnist", "one of --mnist, --amat-trainvalid or --synthetic-shapes "
                     "must be given");
    const std::string d = args.mnist_dir;
    const std::string files[4] = {
        d + "/train-images-idx3-ubyte", d + "/train-labels-idx1-ubyte",
        d + "/t10k-images-idx3-ubyte", d + "/t10k-labels-idx1-ubyte"};
    for (const auto& f : files)
      if (!std::filesystem::exists(f))
        throw std::runtime_error("missing source file: " + f);
    auto train = load_mnist_pair<float>(files[0], files[1]);
    auto test = load_mnist_pair<float>(files[2], files[3]);
    const int h = train.front().image.extent(0);
    const int w = train.front().image.extent(1);
    Tensor<float> pool({static_cast<int>(train.size() + test.size()), h, w});
    std::vector<int> labels;
    labels.reserve(train.size() + test.size());
    std::size_t off = 0;
    for (const auto* part : {&train, &test}) {
      for (const auto& s : *part) {
        std::copy(s.image.begin(), s.image.end(), pool.data() + off);
        off += s.image.size();
        labels.push_back(s.label);
      }
    }
    split = make_mnist_rot(pool, labels, args.seed);
    std::ostringstream extra;
    for (const auto& f : files)
      extra << "source-digest " << hex64(file_digest(f)) << "\n";
    split.provenance += extra.str();
  }

  if (write_dataset_cache(args.out, split)) {
    std::cout << "prepared " << split.train.size() << "/" << split.val.size()
              << "/" << split.test.size() << " train/val/test samples in "
              << args.out << "\n";
  } else {
    std::cout << "dataset in " << args.out
              << " already matches this provenance, nothing to do\n";
  }
  return 0;
}

// ---- train ----------------------------------------------------------------

template <typename T>
int run_train(CLI::App& app, const TrainArgs& args) {
  const bool covariant = args.preset == "covariant-48";
  TrainConfig cfg;
  cfg.epochs = args.epochs > 0 ? args.epochs : (covariant ? 80 : 90);
  cfg.lr_start = args.lr_start > 0 ? args.lr_start : (covariant ? 5e-3 : 0.1);
  cfg.lr_end = args.lr_end > 0 ? args.lr_end : (covariant ? 5e-3 : 0.001);
  cfg.weight_decay = args.weight_decay >= 0 ? args.weight_decay : 0.01;
  cfg.batch = args.batch > 0 ? args.batch : 128;
  cfg.momentum = args.momentum;
  cfg.average_last = args.avg_last >= 0 ? args.avg_last : (covariant ? 30 : 0);

  const int r = args.r > 0 ? args.r : (covariant ? 21 : 17);
  echo_config(app, args.out);

  DatasetSplit<T> data = load_dataset_cache<T>(args.data);
  Model<T> model = args.resume.empty()
                       ? Model<T>::build(preset_by_name(
                             args.preset, r, args.filters_multiplier, args.seed))
                       : Model<T>::load(args.resume);
  std::cout << "model parameters: " << model.parameter_count() << "\n";

  TrainResult result = train_model(model, data, cfg, args.out, args.seed);
  for (const EpochMetrics& m : result.metrics)
    std::printf("epoch %d lr %.5g train_loss %.4f train_err %.4f val_err %.4f (%.1fs)\n",
                m.epoch, m.lr, m.train_loss, m.train_err, m.val_err,
                m.wall_seconds);
  std::printf("best val_err %.4f at epoch %d\n", result.best_val_err,
              result.best_epoch);
  return 0;
}

// ---- eval -----------------------------------------------------------------

template <typename T>
int run_eval(CLI::App& app, const EvalArgs& args) {
  echo_config(app, args.out);
  Model<T> model = Model<T>::load(args.checkpoint);
  if (args.r > 0) model.override_orientations(args.r);
  DatasetSplit<T> data = load_dataset_cache<T>(args.data);
  const std::vector<Sample<T>>& samples =
      args.split == "train" ? data.train
      : args.split == "val" ? data.val
                            : data.test;
  if (samples.empty())
    throw std::runtime_error("eval: split '" + args.split + "' is empty");

  std::ostringstream report;
  if (model.spec().loss == LossKind::kCrossEntropy) {
    EvalReport r = evaluate_classifier(model, samples, args.tta,
                                       args.max_samples, args.batch);
    report << "n " << r.n << "\n"
           << "tta " << args.tta << "\n"
           << "error_rate " << r.error_rate << "\n";
  } else {
    EvalReport r =
        evaluate_covariant(model, samples, args.max_samples, args.batch);
    report << "n " << r.n << "\n"
           << "mean_angular_error_deg " << r.mean_angular_error << "\n"
           << "frac_below_15deg " << r.frac_below_15 << "\n"
           << "frac_above_150deg " << r.frac_above_150 << "\n";
  }
  std::cout << report.str();
  if (!args.out.empty()) {
    std::ofstream f(args.out + "/report.txt", std::ios::trunc);
    f << report.str();
  }
  return 0;
}

// ---- check ----------------------------------------------------------------

template <typename T>
int run_check(const CheckArgs& args) {
  CheckConfig cfg;
  cfg.seed = args.seed;
  cfg.sabotage_realign = args.break_realign_sign;
  cfg.include_gradients = !args.skip_gradients;
  const auto results = run_property_checks<T>(cfg);
  std::cout << format_property_report(results);
  return all_passed(results) ? 0 : 2;
}

// ---- predict ----------------------------------------------------------------

template <typename T>
int run_predict(const PredictArgs& args) {
  Model<T> model = Model<T>::load(args.checkpoint);
  Tensor<T> image = read_pgm<T>(args.image);
  if (args.rotate != 0.0) image = rotate_image(image, args.rotate);
  if (model.spec().loss == LossKind::kCrossEntropy) {
    Tensor<T> scores = test_time_augment(model, image, args.tta);
    int best = 0;
    for (std::size_t c = 1; c < scores.size(); ++c)
      if (scores[c] > scores[best]) best = static_cast<int>(c);
    for (std::size_t c = 0; c < scores.size(); ++c)
      std::printf("score %zu %.6f\n", c, static_cast<double>(scores[c]));
    std::printf("class %d\n", best);
  } else {
    std::printf("angle_deg %.4f\n", predict_angle(model, image));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rotation-equivariant vector field networks"};
  app.require_subcommand(1);
  app.set_config("--config", "", "read options from an INI file");

  PrepareArgs prepare;
  auto* prep = app.add_subcommand("prepare", "materialise a dataset on disk");
  prep->add_option("--out", prepare.out, "output directory")->required();
  prep->add_option("--mnist", prepare.mnist_dir,
                   "directory with the four standard MNIST idx files");
  prep->add_option("--amat-trainvalid", prepare.amat_trainvalid,
                   "official rotated-digit train+val text file");
  prep->add_option("--amat-test", prepare.amat_test,
                   "official rotated-digit test text file");
  prep->add_option("--seed", prepare.seed, "generation seed");
  prep->add_flag("--synthetic-shapes", prepare.synthetic,
                 "generate the oriented-shape regression set");
  prep->add_option("args", prepare.shape_kv,
                   "k=v parameters for --synthetic-shapes "
                   "(n=, test=, val=, size=, noise=, seed=)");

  TrainArgs train;
  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--data", train.data, "prepared dataset directory")->required();
  tr->add_option("--out", train.out, "run output directory")->required();
  tr->add_option("--preset", train.preset,
                 "architecture preset (mnist-table2 | covariant-48)");
  tr->add_option("--r", train.r, "orientation count");
  tr->add_option("--seed", train.seed, "run seed");
  tr->add_option("--epochs", train.epochs, "training epochs");
  tr->add_option("--lr-start", train.lr_start, "initial learning rate");
  tr->add_option("--lr-end", train.lr_end, "final learning rate");
  tr->add_option("--weight-decay", train.weight_decay, "weight decay");
  tr->add_option("--batch", train.batch, "batch size");
  tr->add_option("--momentum", train.momentum, "SGD momentum (default 0)");
  tr->add_option("--avg-last", train.avg_last,
                 "average the last k epoch snapshots into the final model");
  tr->add_option("--filters-multiplier", train.filters_multiplier,
                 "scales per-layer filter counts for size sweeps");
  tr->add_option("--precision", train.precision, "32 or 64 bit elements")
      ->check(CLI::IsMember({32, 64}));
  tr->add_option("--resume", train.resume, "checkpoint to continue from");

  EvalArgs eval;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--checkpoint", eval.checkpoint, "model checkpoint")->required();
  ev->add_option("--data", eval.data, "prepared dataset directory")->required();
  ev->add_option("--split", eval.split, "train | val | test");
  ev->add_option("--tta", eval.tta,
                 "average scores over this many input rotations in [0, 90]");
  ev->add_option("--max-samples", eval.max_samples, "evaluate only the first N");
  ev->add_option("--r", eval.r, "override the orientation count at eval time");
  ev->add_option("--out", eval.out, "directory for report.txt");

  CheckArgs check;
  auto* ck = app.add_subcommand("check", "run the property self-checks");
  ck->add_option("--seed", check.seed, "instance seed");
  ck->add_option("--precision", check.precision, "32 or 64 bit elements")
      ->check(CLI::IsMember({32, 64}));
  ck->add_flag("--skip-gradients", check.skip_gradients,
               "skip the finite-difference family");
  ck->add_flag("--break-realign-sign", check.break_realign_sign,
               "negative control: flip the rotation-adjoint sign, the "
               "adjoint check must then fail")
      ->group("");  // hidden

  PredictArgs predict;
  auto* pr = app.add_subcommand("predict", "run a checkpoint on one image");
  pr->add_option("--checkpoint", predict.checkpoint, "model checkpoint")
      ->required();
  pr->add_option("image", predict.image, "PGM image (P2 or P5)")->required();
  pr->add_option("--rotate", predict.rotate,
                 "rotate the input by this many degrees first");
  pr->add_option("--tta", predict.tta, "score averaging over input rotations");

  CLI11_PARSE(app, argc, argv);

  try {
    if (prep->parsed()) return cmd_prepare(app, prepare);
    if (tr->parsed())
      return train.precision == 64 ? run_train<double>(app, train)
                                   : run_train<float>(app, train);
    if (ev->parsed())
      return checkpoint_precision(eval.checkpoint) == 64
                 ? run_eval<double>(app, eval)
                 : run_eval<float>(app, eval);
    if (ck->parsed())
      return check.precision == 64 ? run_check<double>(check)
                                   : run_check<float>(check);
    if (pr->parsed())
      return checkpoint_precision(predict.checkpoint) == 64
                 ? run_predict<double>(predict)
                 : run_predict<float>(predict);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
