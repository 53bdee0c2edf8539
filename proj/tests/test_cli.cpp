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

// End-to-end runs of the command-line binary.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "roteqnet/data.hpp"
#include "roteqnet/runner.hpp"

using namespace roteqnet;

namespace {

std::string temp_dir(const char* tag) {
  auto dir = std::filesystem::temp_directory_path() /
             (std::string("roteqnet-cli-") + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

struct RunResult {
  int exit_code;
  std::string output;
};

RunResult run_cli(const std::string& args) {
  const std::string out_file =
      (std::filesystem::temp_directory_path() / "roteqnet-cli-out.txt").string();
  const std::string cmd =
      std::string(ROTEQNET_CLI_PATH) + " " + args + " > " + out_file + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(out_file);
  std::ostringstream buf;
  buf << in.rdbuf();
  return {WEXITSTATUS(status), buf.str()};
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// metrics.csv with the wall-clock column stripped (it is the one
// legitimately nondeterministic field).
std::string metrics_without_wall(const std::string& path) {
  std::ifstream in(path);
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line)) {
    const auto cut = line.rfind(',');
    out << line.substr(0, cut) << "\n";
  }
  return out.str();
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("prepare generates the synthetic shape set and is idempotent") {
  const std::string dir = temp_dir("prep");
  RunResult r = run_cli("prepare --out " + dir +
                        " --synthetic-shapes n=20 test=5 val=4 seed=7 size=32");
  CHECK(r.exit_code == 0);
  DatasetSplit<float> split = load_dataset_cache<float>(dir);
  CHECK(split.train.size() == 20);
  CHECK(split.val.size() == 4);
  CHECK(split.test.size() == 5);
  CHECK(std::filesystem::exists(dir + "/config.txt"));

  RunResult again = run_cli("prepare --out " + dir +
                            " --synthetic-shapes n=20 test=5 val=4 seed=7 size=32");
  CHECK(again.exit_code == 0);
  CHECK(again.output.find("nothing to do") != std::string::npos);
}

TEST_CASE("prepare names the missing source path") {
  const std::string dir = temp_dir("prep-missing");
  RunResult r = run_cli("prepare --out " + dir + " --mnist /nonexistent-dir");
  CHECK(r.exit_code != 0);
  CHECK(r.output.find("/nonexistent-dir/train-images-idx3-ubyte") !=
        std::string::npos);
}

TEST_CASE("train, resume, determinism, eval and predict on a small regression run") {
  const std::string data = temp_dir("flow-data");
  REQUIRE(run_cli("prepare --out " + data +
                  " --synthetic-shapes n=48 test=16 val=8 seed=5")
              .exit_code == 0);

  // One epoch: metrics.csv has a header plus exactly one data row.
  const std::string run1 = temp_dir("flow-run1");
  RunResult t1 = run_cli("train --data " + data + " --out " + run1 +
                         " --preset covariant-48 --r 8 --epochs 1 --batch 16" +
                         " --seed 3 --avg-last 0");
  CHECK(t1.exit_code == 0);
  {
    std::ifstream csv(run1 + "/metrics.csv");
    std::string line;
    int rows = 0;
    std::getline(csv, line);
    CHECK(line == "epoch,lr,train_loss,train_err,val_err,wall_seconds");
    while (std::getline(csv, line))
      if (!line.empty()) ++rows;
    CHECK(rows == 1);
  }
  CHECK(std::filesystem::exists(run1 + "/config.txt"));
  CHECK(std::filesystem::exists(run1 + "/checkpoint-final.ckpt"));

  // Resuming continues the epoch numbering in the same metrics file.
  RunResult t2 = run_cli("train --data " + data + " --out " + run1 +
                         " --resume " + run1 + "/checkpoint-final.ckpt" +
                         " --epochs 1 --batch 16 --seed 3 --avg-last 0");
  CHECK(t2.exit_code == 0);
  {
    std::ifstream csv(run1 + "/metrics.csv");
    std::string line;
    std::getline(csv, line);
    std::getline(csv, line);
    CHECK(line.substr(0, 2) == "0,");
    std::getline(csv, line);
    CHECK(line.substr(0, 2) == "1,");
  }

  // Same config and seed: identical metrics (wall clock aside) and
  // bit-identical checkpoints.
  const std::string runa = temp_dir("flow-runa");
  const std::string runb = temp_dir("flow-runb");
  const std::string common = "train --data " + data +
                             " --preset covariant-48 --r 8 --epochs 2" +
                             " --batch 16 --seed 11 --avg-last 0 --out ";
  CHECK(run_cli(common + runa).exit_code == 0);
  CHECK(run_cli(common + runb).exit_code == 0);
  CHECK(metrics_without_wall(runa + "/metrics.csv") ==
        metrics_without_wall(runb + "/metrics.csv"));
  CHECK(read_file(runa + "/checkpoint-final.ckpt") ==
        read_file(runb + "/checkpoint-final.ckpt"));

  // Eval prints the angular-error report and writes report.txt.
  const std::string evdir = temp_dir("flow-eval");
  RunResult ev = run_cli("eval --checkpoint " + runa +
                         "/checkpoint-final.ckpt --data " + data +
                         " --split test --out " + evdir);
  CHECK(ev.exit_code == 0);
  CHECK(ev.output.find("mean_angular_error_deg") != std::string::npos);
  CHECK(read_file(evdir + "/report.txt") == ev.output);

  // Predict on a rendered bar; a quarter-turn rotation of the input shifts
  // the predicted angle by 90 degrees (R = 8 is quarter-turn exact).
  const std::string pgm = temp_dir("flow-img") + "/bar.pgm";
  write_pgm(pgm, render_oriented_bar<float>(40.0, 48));
  RunResult p0 = run_cli("predict --checkpoint " + runa +
                         "/checkpoint-final.ckpt " + pgm);
  CHECK(p0.exit_code == 0);
  double a0 = -1;
  std::sscanf(p0.output.c_str(), "angle_deg %lf", &a0);
  RunResult p90 = run_cli("predict --checkpoint " + runa +
                          "/checkpoint-final.ckpt " + pgm + " --rotate 90");
  double a90 = -1;
  std::sscanf(p90.output.c_str(), "angle_deg %lf", &a90);
  CHECK(angular_difference(a90, a0 + 90.0) < 1e-4);

  // Malformed image header.
  const std::string bad = temp_dir("flow-img2") + "/bad.pgm";
  {
    std::ofstream f(bad);
    f << "P7 this is not a greyscale image\n";
  }
  RunResult pb = run_cli("predict --checkpoint " + runa +
                         "/checkpoint-final.ckpt " + bad);
  CHECK(pb.exit_code != 0);
}

TEST_CASE("check command reports properties and honours the negative control") {
  RunResult fast = run_cli("check --precision 64 --skip-gradients");
  CHECK(fast.exit_code == 0);
  CHECK(fast.output.find("PASS equivariance.rotconv_op.r4") != std::string::npos);
  CHECK(fast.output.find("FAIL") == std::string::npos);

  RunResult broken =
      run_cli("check --precision 64 --skip-gradients --break-realign-sign");
  CHECK(broken.exit_code != 0);
  CHECK(broken.output.find("FAIL adjoint.rotation") != std::string::npos);
}

}  // TEST_SUITE
