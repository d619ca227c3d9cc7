// Copyright (c) 2026 the dynreg authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dynreg/controller.hpp"
#include "dynreg/data.hpp"
#include "dynreg/nets.hpp"

namespace dynreg {

// Training harness: SGD with momentum and decoupled-from-the-controller
// weight decay, cosine-annealed learning rate, per-iteration metrics rows,
// and schedule sweeps. The controller only ever sees the raw cross-entropy.

struct DatasetSpec {
  enum class Kind { gaussians, spirals, idx };
  Kind kind = Kind::spirals;
  // synthetic
  int per_class = 100;
  int classes = 2;
  double noise = 0.1;
  int test_per_class = -1;  // -1: same as per_class
  // idx
  std::string images, labels, test_images, test_labels;

  // Grammar: "spirals:per_class=200,classes=3,noise=0.08[,test_per_class=100]"
  //          "gaussians:per_class=100,classes=4,noise=0.3"
  //          "idx:images=p,labels=p,test_images=p,test_labels=p"
  static DatasetSpec parse(const std::string& text);
  std::string str() const;
};

struct RunConfig {
  NetSpec net;                     // key: net=<topology:...>
  DatasetSpec dataset;             // key: dataset=<kind:...>
  int epochs = 10;
  int batch_size = 32;
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double delta_s = 3e-4;
  int filter_length = 501;         // Gaussian filter taps (N + 1)
  double sigma = 0.4;
  double amplitude = 0.5;          // A
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  ScheduleSpec schedule;           // key: schedule=dynamic|none|fix:x|linear:x
  Granularity granularity = Granularity::per_batch;
};

// Flat key=value parser ('#' comments and blank lines allowed). Unknown
// keys and malformed values are rejected with the offending line.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);

// Topology grammar for the net= key:
//   "res2:depth=6,base=8,widen=16,reg=dynamic[,widening=pyramid|constant]"
//   "res3:..." | "dense:depth=6,base=8,growth=8,reg=dynamic[,pL=0.5]"
// Classes, input shape, batch size, amplitude, granularity and seed are
// filled in from the run config and dataset at run time.
NetSpec parse_net_spec(const std::string& text);

struct MetricsRow {
  long iter = 0;
  int epoch = 0;
  double raw_loss = 0.0;
  double filtered_loss = 0.0;
  std::optional<double> grad_diff;  // empty on the first row only
  double s = 0.0;                   // strength for the next iteration
  double lr = 0.0;
  std::optional<double> train_err;  // filled on epoch-final rows only
  std::optional<double> test_err;
};

// Exact header line (no trailing newline).
std::string csv_header();
std::string format_row(const MetricsRow& row);
std::string format_double(double v);

// Cosine annealing lr(t) = lr0/2 (1 + cos(pi t / T)) for 0 <= t <= T.
double cosine_lr(double lr0, long t, long T);

// v <- momentum v + grad + weight_decay param; param <- param - lr v.
void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr,
              double momentum, double weight_decay);

struct TrainContext {
  Network net;
  ControllerState controller;
  ScheduleSpec schedule;     // resolved: total_iterations filled in
  std::unordered_map<int, Tensor> velocity;
  long total_iterations = 0;
  long iters_per_epoch = 0;
  double last_s_used = 0.0;  // strength that sampled the last iteration
};

// Build the network, controller and resolved schedule for a config whose
// datasets are already loaded.
TrainContext make_train_context(const RunConfig& cfg, const Dataset& train);

// One coupled iteration: sample factors with the current strength, forward,
// raw loss, backward with fresh mu, SGD update, then controller update.
// The updated strength takes effect from the next iteration. Non-finite
// loss raises NumericError naming the iteration.
MetricsRow train_step(TrainContext& ctx, const BatchIterator::Batch& batch,
                      long iteration, const RunConfig& cfg);

// Error percentage in eval mode over the full dataset (any size; the graph
// batch is padded and the padding ignored). Requires eval mode.
double evaluate(Network& net, const Dataset& ds);

struct RunSummary {
  double final_train_err = 0.0;
  double final_test_err = 0.0;
  double final_s = 0.0;
  long params = 0;
  long iterations = 0;
  std::string metrics_path;
};

// Full run: data, net, training loop, epoch-end evaluation, metrics CSV and
// summary.txt under cfg.out_dir.
RunSummary run_experiment(const RunConfig& cfg);

struct SweepRow {
  std::string schedule;
  long params = 0;
  std::vector<double> test_errs;   // one per seed
  std::vector<double> final_s;
  double mean_test_err = 0.0;
  double mean_final_s = 0.0;
};

// Run every schedule num_seeds times from the shared base config (same data
// and topology; seeds vary init, batch order and noise streams together).
std::vector<SweepRow> sweep_schedules(const RunConfig& base,
                                      const std::vector<ScheduleSpec>& schedules,
                                      int num_seeds);

void write_sweep_table(std::ostream& os, const std::vector<SweepRow>& rows);
void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows);

// Load train/test datasets for a spec (synthetic splits or IDX pairs, with
// per-channel normalization fitted on train for IDX data).
void load_datasets(const DatasetSpec& spec, std::uint64_t seed, Dataset& train,
                   Dataset& test);

}  // namespace dynreg
