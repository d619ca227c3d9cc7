// Copyright (c) 2026 the dynreg authors
// SPDX-License-Identifier: Apache-2.0
//
// Command line front end: train | sweep | replay | gradcheck.
// Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dynreg/error.hpp"
#include "dynreg/harness.hpp"

namespace {

using namespace dynreg;

int cmd_train(const std::string& config_path, const std::optional<std::uint64_t>& seed,
              const std::optional<std::string>& out_dir) {
  RunConfig cfg = parse_config_file(config_path);
  if (seed) cfg.seed = *seed;
  if (out_dir) cfg.out_dir = *out_dir;
  const RunSummary s = run_experiment(cfg);
  std::cout << "params=" << s.params << "\n"
            << "iterations=" << s.iterations << "\n"
            << "final_train_err=" << format_double(s.final_train_err) << "\n"
            << "final_test_err=" << format_double(s.final_test_err) << "\n"
            << "final_s=" << format_double(s.final_s) << "\n"
            << "metrics=" << s.metrics_path << "\n";
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& schedules_arg, int seeds,
              const std::optional<std::string>& out_dir) {
  RunConfig cfg = parse_config_file(config_path);
  if (out_dir) cfg.out_dir = *out_dir;
  std::vector<ScheduleSpec> schedules;
  std::istringstream is(schedules_arg);
  std::string tok;
  while (std::getline(is, tok, ','))
    if (!tok.empty()) schedules.push_back(ScheduleSpec::parse(tok));
  const std::vector<SweepRow> rows = sweep_schedules(cfg, schedules, seeds);
  write_sweep_table(std::cout, rows);
  const std::string csv_path = cfg.out_dir + "/sweep.csv";
  write_sweep_csv(csv_path, rows);
  std::cout << "sweep_csv=" << csv_path << "\n";
  return 0;
}

int cmd_replay(const std::string& trace_path, const std::string& out_path, double delta_s,
               int filter_length, double sigma, double s0) {
  const ControllerState proto = make_controller(delta_s, filter_length, sigma, s0);
  replay_trace_file(trace_path, out_path, proto);
  return 0;
}

struct CheckCase {
  std::string name;
  double tolerance;
  GradCheckReport report;
};

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (Eigen::Index i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

CheckCase check_linear(Rng& rng) {
  Graph g;
  const int x = g.add_input(random_tensor({3, 4}, rng));
  const int w1 = g.add_param(random_tensor({4, 5}, rng));
  const int b1 = g.add_param(random_tensor({5}, rng, 0.2));
  const int w2 = g.add_param(random_tensor({5, 2}, rng));
  const int h = g.add(g.matmul(x, w1), b1);
  const int loss = g.reduce_mean(g.matmul(h, w2));
  return {"linear (matmul, add, reduce_mean)", 1e-7, grad_check(g, loss, 1e-4)};
}

CheckCase check_conv(Rng& rng) {
  Graph g;
  const int x = g.add_input(random_tensor({2, 3, 6, 6}, rng));
  const int w1 = g.add_param(random_tensor({4, 3, 3, 3}, rng, 0.4));
  const int w2 = g.add_param(random_tensor({5, 4, 1, 1}, rng, 0.4));
  int h = g.relu(g.conv2d(x, w1, 2));
  h = g.conv2d(h, w2, 1);
  const int pooled = g.global_avg_pool(h);
  const int loss = g.softmax_cross_entropy(pooled, {0, 3});
  return {"conv2d (3x3 s2, 1x1, relu, pool, softmax-ce)", 1e-4, grad_check(g, loss, 1e-5)};
}

CheckCase check_batchnorm(Rng& rng) {
  Graph g;
  const int x = g.add_input(random_tensor({4, 3, 5, 5}, rng));
  const int gamma = g.add_param(random_tensor({3}, rng, 0.5));
  const int beta = g.add_param(random_tensor({3}, rng, 0.5));
  const int w = g.add_param(random_tensor({2, 3, 3, 3}, rng, 0.4));
  const int h = g.conv2d(g.relu(g.batchnorm(x, gamma, beta)), w, 1);
  const int loss = g.reduce_mean(h);
  return {"batchnorm (train statistics)", 1e-4, grad_check(g, loss, 1e-5)};
}

CheckCase check_branches(Rng& rng) {
  Graph g;
  const int x = g.add_input(random_tensor({2, 4, 3, 3}, rng));
  const int w = g.add_param(random_tensor({2, 4, 3, 3}, rng, 0.4));
  const int b = g.conv2d(x, w, 1);
  const Eigen::ArrayXd f = Eigen::ArrayXd::Constant(1, 0.7);
  const int scaled = g.branch_scale(b, f, f);
  const int cat = g.concat(scaled, g.scalar_mul(b, 0.25));
  const int loss = g.reduce_mean(cat);
  return {"branch_scale (frozen), concat, scalar_mul", 1e-4, grad_check(g, loss, 1e-5)};
}

CheckCase check_block(Topology topo, const char* name, std::uint64_t seed) {
  NetSpec spec;
  spec.topology = topo;
  spec.depth = 2;
  spec.base_channels = 3;
  spec.widen = 2;
  spec.growth = 3;
  spec.num_classes = 3;
  spec.input_shape = {2, 4, 4};
  spec.batch_size = 3;
  spec.reg_mode = RegMode::dynamic_reg;
  spec.seed = seed;
  Network net = build_net(spec);
  Rng rng(mix_seed(seed, 0xF00D));
  net.set_batch(random_tensor({3, 2, 4, 4}, rng), {0, 1, 2});
  // Freeze every factor at its deterministic value before checking.
  for (PerturbUnit& u : net.units) fold_unit(net.graph, u);
  net.forward();
  return {std::string("network (") + name + ", frozen factors)", 1e-4,
          grad_check(net.graph, net.loss_node, 1e-5)};
}

int cmd_gradcheck(double step) {
  (void)step;
  Rng rng(20260814);
  std::vector<CheckCase> cases;
  cases.push_back(check_linear(rng));
  cases.push_back(check_conv(rng));
  cases.push_back(check_batchnorm(rng));
  cases.push_back(check_branches(rng));
  cases.push_back(check_block(Topology::res2, "res2", 11));
  cases.push_back(check_block(Topology::res3, "res3", 12));
  cases.push_back(check_block(Topology::dense, "dense", 13));
  bool ok = true;
  for (const CheckCase& c : cases) {
    const bool pass = c.report.max_rel_error < c.tolerance;
    ok = ok && pass;
    std::printf("%-48s max_rel=%.3e tol=%.0e entries=%lld %s\n", c.name.c_str(),
                c.report.max_rel_error, c.tolerance,
                static_cast<long long>(c.report.entries), pass ? "OK" : "FAIL");
  }
  if (!ok) throw NumericError("gradcheck: at least one case exceeded its tolerance");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Training laboratory for multiplicative branch perturbation with a "
               "loss-adaptive strength controller"};
  app.require_subcommand(1);

  std::string config_path, schedules_arg, trace_path;
  std::string replay_out = "/dev/stdout";
  std::optional<std::uint64_t> seed_override;
  std::optional<std::string> out_override;
  int seeds = 5;
  double delta_s = 3e-4, sigma = 0.4, s0 = 0.0, step = 1e-5;
  int filter_length = 501;

  CLI::App* train = app.add_subcommand("train", "Run one training experiment");
  train->add_option("--config", config_path, "key=value config file")->required();
  train->add_option("--seed", seed_override, "override the config seed");
  train->add_option("--out", out_override, "override the output directory");

  CLI::App* sweep = app.add_subcommand("sweep", "Compare strength schedules");
  sweep->add_option("--config", config_path, "key=value config file")->required();
  sweep->add_option("--schedules", schedules_arg,
                    "comma list, e.g. fix:2,linear:3,dynamic,none")->required();
  sweep->add_option("--seeds", seeds, "seeds per schedule (default 5)");
  sweep->add_option("--out", out_override, "override the output directory");

  CLI::App* replay = app.add_subcommand("replay", "Replay a loss trace through the controller");
  replay->add_option("--trace", trace_path, "text file, one loss per line")->required();
  replay->add_option("--out", replay_out, "output file (default stdout), one s per line");
  replay->add_option("--delta-s", delta_s, "strength increment (default 3e-4)");
  replay->add_option("--filter-length", filter_length, "Gaussian filter taps (default 501)");
  replay->add_option("--sigma", sigma, "Gaussian window width (default 0.4)");
  replay->add_option("--s0", s0, "initial strength (default 0)");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient audit");
  gradcheck->add_option("--step", step, "finite-difference step (default 1e-5)");

  try {
    app.parse(argc, argv);
    if (train->parsed()) return cmd_train(config_path, seed_override, out_override);
    if (sweep->parsed()) return cmd_sweep(config_path, schedules_arg, seeds, out_override);
    if (replay->parsed())
      return cmd_replay(trace_path, replay_out, delta_s, filter_length, sigma, s0);
    if (gradcheck->parsed()) return cmd_gradcheck(step);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // bad usage is a config error
  } catch (const dynreg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const dynreg::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const dynreg::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
