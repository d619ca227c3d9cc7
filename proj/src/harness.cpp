// Copyright (c) 2026 the dynreg authors
// SPDX-License-Identifier: Apache-2.0
#include "dynreg/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "dynreg/error.hpp"

namespace dynreg {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& v, const std::string& ctx) {
  try {
    size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::logic_error&) {
    throw ConfigError(ctx + ": expected a number, got '" + v + "'");
  }
}

long to_long(const std::string& v, const std::string& ctx) {
  try {
    size_t used = 0;
    const long x = std::stol(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::logic_error&) {
    throw ConfigError(ctx + ": expected an integer, got '" + v + "'");
  }
}

std::uint64_t to_u64(const std::string& v, const std::string& ctx) {
  try {
    size_t used = 0;
    const unsigned long long x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return static_cast<std::uint64_t>(x);
  } catch (const std::logic_error&) {
    throw ConfigError(ctx + ": expected a non-negative integer, got '" + v + "'");
  }
}

// "a=1,b=2" -> ordered key/value pairs; rejects entries without '='.
std::vector<std::pair<std::string, std::string>> parse_kv_list(const std::string& text,
                                                               const std::string& ctx) {
  std::vector<std::pair<std::string, std::string>> out;
  std::string item;
  std::istringstream is(text);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos)
      throw ConfigError(ctx + ": expected key=value, got '" + item + "'");
    out.emplace_back(trim(item.substr(0, eq)), trim(item.substr(eq + 1)));
  }
  return out;
}

Granularity parse_granularity(const std::string& v, const std::string& ctx) {
  if (v == "per_batch") return Granularity::per_batch;
  if (v == "per_sample") return Granularity::per_sample;
  throw ConfigError(ctx + ": expected per_batch or per_sample, got '" + v + "'");
}

}  // namespace

DatasetSpec DatasetSpec::parse(const std::string& text) {
  DatasetSpec spec;
  const auto colon = text.find(':');
  const std::string head = colon == std::string::npos ? text : text.substr(0, colon);
  const std::string rest = colon == std::string::npos ? "" : text.substr(colon + 1);
  if (head == "gaussians") {
    spec.kind = Kind::gaussians;
  } else if (head == "spirals") {
    spec.kind = Kind::spirals;
  } else if (head == "idx") {
    spec.kind = Kind::idx;
  } else {
    throw ConfigError("dataset: expected gaussians | spirals | idx, got '" + head + "'");
  }
  for (const auto& [k, v] : parse_kv_list(rest, "dataset")) {
    if (k == "per_class") spec.per_class = static_cast<int>(to_long(v, "dataset per_class"));
    else if (k == "classes") spec.classes = static_cast<int>(to_long(v, "dataset classes"));
    else if (k == "noise") spec.noise = to_double(v, "dataset noise");
    else if (k == "test_per_class")
      spec.test_per_class = static_cast<int>(to_long(v, "dataset test_per_class"));
    else if (k == "images") spec.images = v;
    else if (k == "labels") spec.labels = v;
    else if (k == "test_images") spec.test_images = v;
    else if (k == "test_labels") spec.test_labels = v;
    else throw ConfigError("dataset: unknown option '" + k + "'");
  }
  if (spec.kind == Kind::idx) {
    if (spec.images.empty() || spec.labels.empty() || spec.test_images.empty() ||
        spec.test_labels.empty())
      throw ConfigError("dataset: idx needs images, labels, test_images and test_labels paths");
  } else {
    if (spec.per_class < 1) throw ConfigError("dataset: per_class must be >= 1");
    if (spec.classes < 2) throw ConfigError("dataset: classes must be >= 2");
    if (spec.noise < 0.0) throw ConfigError("dataset: noise must be >= 0");
  }
  return spec;
}

std::string DatasetSpec::str() const {
  std::ostringstream os;
  switch (kind) {
    case Kind::gaussians: os << "gaussians"; break;
    case Kind::spirals: os << "spirals"; break;
    case Kind::idx:
      os << "idx:images=" << images << ",labels=" << labels << ",test_images=" << test_images
         << ",test_labels=" << test_labels;
      return os.str();
  }
  os << ":per_class=" << per_class << ",classes=" << classes << ",noise=" << noise;
  if (test_per_class >= 0) os << ",test_per_class=" << test_per_class;
  return os.str();
}

NetSpec parse_net_spec(const std::string& text) {
  NetSpec spec;
  const auto colon = text.find(':');
  const std::string head = colon == std::string::npos ? text : text.substr(0, colon);
  const std::string rest = colon == std::string::npos ? "" : text.substr(colon + 1);
  if (head == "res2") spec.topology = Topology::res2;
  else if (head == "res3") spec.topology = Topology::res3;
  else if (head == "dense") spec.topology = Topology::dense;
  else throw ConfigError("net: expected res2 | res3 | dense, got '" + head + "'");
  for (const auto& [k, v] : parse_kv_list(rest, "net")) {
    if (k == "depth") spec.depth = static_cast<int>(to_long(v, "net depth"));
    else if (k == "base") spec.base_channels = static_cast<int>(to_long(v, "net base"));
    else if (k == "widen") spec.widen = static_cast<int>(to_long(v, "net widen"));
    else if (k == "growth") spec.growth = static_cast<int>(to_long(v, "net growth"));
    else if (k == "pL") spec.shakedrop_p_terminal = to_double(v, "net pL");
    else if (k == "widening") {
      if (v == "pyramid") spec.widening = WideningRule::pyramid;
      else if (v == "constant") spec.widening = WideningRule::constant;
      else throw ConfigError("net: widening must be pyramid or constant, got '" + v + "'");
    } else if (k == "reg") {
      if (v == "none") spec.reg_mode = RegMode::none;
      else if (v == "dynamic") spec.reg_mode = RegMode::dynamic_reg;
      else if (v == "shake_shake") spec.reg_mode = RegMode::shake_shake;
      else if (v == "shakedrop") spec.reg_mode = RegMode::shakedrop;
      else throw ConfigError("net: reg must be none | dynamic | shake_shake | shakedrop, got '" +
                             v + "'");
    } else {
      throw ConfigError("net: unknown option '" + k + "'");
    }
  }
  return spec;
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  long lineno = 0;
  bool have_net = false, have_dataset = false;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" +
                        t + "'");
    const std::string key = trim(t.substr(0, eq));
    const std::string val = trim(t.substr(eq + 1));
    const std::string ctx = "config line " + std::to_string(lineno) + " (" + key + ")";
    if (key == "net") {
      cfg.net = parse_net_spec(val);
      have_net = true;
    } else if (key == "dataset") {
      cfg.dataset = DatasetSpec::parse(val);
      have_dataset = true;
    } else if (key == "epochs") cfg.epochs = static_cast<int>(to_long(val, ctx));
    else if (key == "batch_size") cfg.batch_size = static_cast<int>(to_long(val, ctx));
    else if (key == "lr0") cfg.lr0 = to_double(val, ctx);
    else if (key == "momentum") cfg.momentum = to_double(val, ctx);
    else if (key == "weight_decay") cfg.weight_decay = to_double(val, ctx);
    else if (key == "delta_s") cfg.delta_s = to_double(val, ctx);
    else if (key == "filter_length") cfg.filter_length = static_cast<int>(to_long(val, ctx));
    else if (key == "sigma") cfg.sigma = to_double(val, ctx);
    else if (key == "A") cfg.amplitude = to_double(val, ctx);
    else if (key == "seed") cfg.seed = to_u64(val, ctx);
    else if (key == "out_dir") cfg.out_dir = val;
    else if (key == "schedule") cfg.schedule = ScheduleSpec::parse(val);
    else if (key == "granularity") cfg.granularity = parse_granularity(val, ctx);
    else throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key +
                           "'");
  }
  if (!have_net) throw ConfigError("config: missing required key 'net'");
  if (!have_dataset) throw ConfigError("config: missing required key 'dataset'");
  if (cfg.epochs < 1) throw ConfigError("config: epochs must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
  if (!(cfg.lr0 > 0.0)) throw ConfigError("config: lr0 must be > 0");
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0)
    throw ConfigError("config: momentum must lie in [0, 1)");
  if (cfg.weight_decay < 0.0) throw ConfigError("config: weight_decay must be >= 0");
  if (cfg.delta_s < 0.0) throw ConfigError("config: delta_s must be >= 0");
  if (cfg.filter_length < 1 || (cfg.filter_length != 1 && cfg.filter_length % 2 == 0))
    throw ConfigError("config: filter_length must be 1 or an odd tap count");
  if (!(cfg.sigma > 0.0)) throw ConfigError("config: sigma must be > 0");
  if (!std::isfinite(cfg.amplitude)) throw ConfigError("config: A must be finite");
  return cfg;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string csv_header() {
  return "iter,epoch,raw_loss,filtered_loss,grad_diff,s,lr,train_err,test_err";
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

std::string format_row(const MetricsRow& row) {
  std::ostringstream os;
  os << row.iter << ',' << row.epoch << ',' << format_double(row.raw_loss) << ','
     << format_double(row.filtered_loss) << ',';
  if (row.grad_diff) os << format_double(*row.grad_diff);
  os << ',' << format_double(row.s) << ',' << format_double(row.lr) << ',';
  if (row.train_err) os << format_double(*row.train_err);
  os << ',';
  if (row.test_err) os << format_double(*row.test_err);
  return os.str();
}

double cosine_lr(double lr0, long t, long T) {
  if (T <= 0) throw std::invalid_argument("cosine_lr: horizon T must be > 0");
  if (t < 0 || t > T)
    throw std::invalid_argument("cosine_lr: step " + std::to_string(t) + " outside [0, " +
                                std::to_string(T) + "]");
  constexpr double pi = 3.14159265358979323846;
  return lr0 * 0.5 * (1.0 + std::cos(pi * static_cast<double>(t) / static_cast<double>(T)));
}

void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr, double momentum,
              double weight_decay) {
  if (!param.same_shape(grad) || !param.same_shape(velocity))
    throw std::invalid_argument("sgd_step: param " + shape_str(param.shape()) + ", grad " +
                                shape_str(grad.shape()) + " and velocity " +
                                shape_str(velocity.shape()) + " must share one shape");
  velocity.array() = momentum * velocity.array() + grad.array() + weight_decay * param.array();
  param.array() -= lr * velocity.array();
}

void load_datasets(const DatasetSpec& spec, std::uint64_t seed, Dataset& train, Dataset& test) {
  if (spec.kind == DatasetSpec::Kind::idx) {
    train = load_idx(spec.images, spec.labels);
    test = load_idx(spec.test_images, spec.test_labels);
    const NormStats stats = compute_norm_stats(train);
    normalize(train, stats);
    normalize(test, stats);
    const int classes = std::max(train.num_classes, test.num_classes);
    train.num_classes = classes;
    test.num_classes = classes;
    test.split = Split::test;
    return;
  }
  const SyntheticKind kind = spec.kind == DatasetSpec::Kind::gaussians
                                 ? SyntheticKind::gaussians
                                 : SyntheticKind::spirals;
  const int test_n = spec.test_per_class >= 0 ? spec.test_per_class : spec.per_class;
  train = gen_synthetic(kind, spec.per_class, spec.classes, spec.noise, seed, Split::train);
  test = gen_synthetic(kind, test_n, spec.classes, spec.noise, seed, Split::test);
}

TrainContext make_train_context(const RunConfig& cfg, const Dataset& train) {
  if (train.size() % static_cast<size_t>(cfg.batch_size) != 0)
    throw ConfigError("config: dataset size " + std::to_string(train.size()) +
                      " is not divisible by batch_size " + std::to_string(cfg.batch_size) +
                      "; training uses fixed-shape batches");
  NetSpec spec = cfg.net;
  spec.num_classes = train.num_classes;
  spec.input_shape = train.input_shape();
  spec.batch_size = cfg.batch_size;
  spec.amplitude = cfg.amplitude;
  spec.granularity = cfg.granularity;
  spec.seed = cfg.seed;

  TrainContext ctx;
  ctx.net = build_net(spec);
  ctx.controller = make_controller(cfg.delta_s, cfg.filter_length, cfg.sigma);
  ctx.iters_per_epoch = static_cast<long>(train.size()) / cfg.batch_size;
  ctx.total_iterations = ctx.iters_per_epoch * cfg.epochs;
  ctx.schedule = cfg.schedule;
  ctx.schedule.total_iterations = ctx.total_iterations;
  return ctx;
}

MetricsRow train_step(TrainContext& ctx, const BatchIterator::Batch& batch, long iteration,
                      const RunConfig& cfg) {
  Network& net = ctx.net;
  if (static_cast<int>(batch.labels.size()) != net.spec.batch_size)
    throw std::invalid_argument("train_step: batch of " + std::to_string(batch.labels.size()) +
                                " does not fill the graph batch of " +
                                std::to_string(net.spec.batch_size));
  const double s_used = schedule_value(ctx.schedule, ctx.controller, iteration);
  ctx.last_s_used = s_used;

  sample_forward_scales(net, s_used);
  net.set_batch(batch.input, batch.labels);
  net.forward();
  const double raw_loss = net.loss();  // bare cross-entropy; decay enters the update only
  if (!std::isfinite(raw_loss))
    throw NumericError("train: non-finite loss at iteration " + std::to_string(iteration));

  sample_backward_scales(net, s_used);
  const Gradients grads = backward(net.graph, net.loss_node);

  const double lr = cosine_lr(cfg.lr0, iteration, ctx.total_iterations);
  for (int id : net.graph.parameters()) {
    auto [it, fresh] = ctx.velocity.try_emplace(id, Tensor::zeros(net.graph.value(id).shape()));
    (void)fresh;
    sgd_step(net.graph.node_mut(id).value, grads.at(id), it->second, lr, cfg.momentum,
             cfg.weight_decay);
  }

  const ControllerUpdate upd = controller_step(ctx.controller, raw_loss);

  MetricsRow row;
  row.iter = iteration;
  row.epoch = static_cast<int>(iteration / std::max(1L, ctx.iters_per_epoch));
  row.raw_loss = raw_loss;
  row.filtered_loss = upd.filtered;
  row.grad_diff = upd.grad_diff;
  row.s = schedule_value(ctx.schedule, ctx.controller, iteration + 1);
  row.lr = lr;
  return row;
}

double evaluate(Network& net, const Dataset& ds) {
  if (net.mode != Mode::eval)
    throw std::logic_error("evaluate: switch the network to eval mode first");
  const int B = net.spec.batch_size;
  const size_t n = ds.size();
  if (n == 0) throw std::invalid_argument("evaluate: empty dataset");
  long wrong = 0;
  for (size_t start = 0; start < n; start += static_cast<size_t>(B)) {
    const size_t m = std::min(static_cast<size_t>(B), n - start);
    std::vector<int> idx(static_cast<size_t>(B));
    std::vector<int> labels(static_cast<size_t>(B), 0);
    for (size_t i = 0; i < static_cast<size_t>(B); ++i) {
      // Pad the tail batch with the first example; padded rows are ignored.
      const size_t src = i < m ? start + i : start;
      idx[i] = static_cast<int>(src);
      labels[i] = ds.examples[src].label;
    }
    net.set_batch(gather_batch(ds, idx), labels);
    net.forward();
    const Tensor& logits = net.graph.value(net.logits_node);
    const Eigen::Index K = logits.dim(1);
    for (size_t i = 0; i < m; ++i) {
      Eigen::Index best = 0;
      for (Eigen::Index k2 = 1; k2 < K; ++k2)
        if (logits.at2(static_cast<Eigen::Index>(i), k2) >
            logits.at2(static_cast<Eigen::Index>(i), best))
          best = k2;
      if (static_cast<int>(best) != ds.examples[start + i].label) ++wrong;
    }
  }
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(n);
}

RunSummary run_experiment(const RunConfig& cfg) {
  Dataset train, test;
  load_datasets(cfg.dataset, cfg.seed, train, test);
  TrainContext ctx = make_train_context(cfg, train);

  std::filesystem::path out_dir(cfg.out_dir);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("run: cannot create output directory '" + cfg.out_dir + "'");
  const std::string metrics_path = (out_dir / "metrics.csv").string();
  std::ofstream csv(metrics_path);
  if (!csv) throw IoError("run: cannot open '" + metrics_path + "' for writing");
  csv << csv_header() << "\n";

  BatchIterator it(train, cfg.batch_size, mix_seed(cfg.seed, 0x5A0FF), true);
  RunSummary summary;
  summary.params = count_params(ctx.net);
  long iteration = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    it.start_epoch(epoch);
    for (long k = 0; k < ctx.iters_per_epoch; ++k, ++iteration) {
      const auto batch = it.next();
      MetricsRow row = train_step(ctx, *batch, iteration, cfg);
      if (k + 1 == ctx.iters_per_epoch) {
        set_mode(ctx.net, Mode::eval);
        row.train_err = evaluate(ctx.net, train);
        row.test_err = evaluate(ctx.net, test);
        set_mode(ctx.net, Mode::train);
        summary.final_train_err = *row.train_err;
        summary.final_test_err = *row.test_err;
      }
      summary.final_s = row.s;
      csv << format_row(row) << "\n";
    }
  }
  if (!csv) throw IoError("run: write failed for '" + metrics_path + "'");
  csv.close();

  summary.iterations = iteration;
  summary.metrics_path = metrics_path;
  const std::string summary_path = (out_dir / "summary.txt").string();
  std::ofstream sf(summary_path);
  if (!sf) throw IoError("run: cannot open '" + summary_path + "' for writing");
  sf << "params=" << summary.params << "\n"
     << "iterations=" << summary.iterations << "\n"
     << "final_train_err=" << format_double(summary.final_train_err) << "\n"
     << "final_test_err=" << format_double(summary.final_test_err) << "\n"
     << "final_s=" << format_double(summary.final_s) << "\n";
  if (!sf) throw IoError("run: write failed for '" + summary_path + "'");
  return summary;
}

namespace {

std::string path_token(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (c == ':' || c == '/' || c == ' ') c = '_';
  return out;
}

}  // namespace

std::vector<SweepRow> sweep_schedules(const RunConfig& base,
                                      const std::vector<ScheduleSpec>& schedules, int num_seeds) {
  if (schedules.empty()) throw ConfigError("sweep: no schedules given");
  if (num_seeds < 1) throw ConfigError("sweep: num_seeds must be >= 1");
  std::vector<SweepRow> rows;
  long params = -1;
  for (const ScheduleSpec& schedule : schedules) {
    SweepRow row;
    row.schedule = schedule.str();
    for (int k = 0; k < num_seeds; ++k) {
      RunConfig cfg = base;
      cfg.schedule = schedule;
      cfg.seed = base.seed + static_cast<std::uint64_t>(k);
      cfg.out_dir = base.out_dir + "/" + path_token(row.schedule) + "/seed" + std::to_string(k);
      const RunSummary s = run_experiment(cfg);
      row.params = s.params;
      if (params < 0) params = s.params;
      else if (params != s.params)
        throw std::logic_error("sweep: parameter count changed across rows (" +
                               std::to_string(params) + " vs " + std::to_string(s.params) + ")");
      row.test_errs.push_back(s.final_test_err);
      row.final_s.push_back(s.final_s);
    }
    double sum_err = 0.0, sum_s = 0.0;
    for (double v : row.test_errs) sum_err += v;
    for (double v : row.final_s) sum_s += v;
    row.mean_test_err = sum_err / static_cast<double>(num_seeds);
    row.mean_final_s = sum_s / static_cast<double>(num_seeds);
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_sweep_table(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << std::left << std::setw(14) << "schedule" << std::right << std::setw(10) << "params"
     << std::setw(8) << "seeds" << std::setw(15) << "mean_test_err" << std::setw(14)
     << "mean_final_s" << "\n";
  for (const SweepRow& r : rows) {
    os << std::left << std::setw(14) << r.schedule << std::right << std::setw(10) << r.params
       << std::setw(8) << r.test_errs.size() << std::setw(15) << std::fixed
       << std::setprecision(3) << r.mean_test_err << std::setw(14) << std::setprecision(5)
       << r.mean_final_s << "\n";
    os.unsetf(std::ios::fixed);
  }
}

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("sweep: cannot open '" + path + "' for writing");
  out << "schedule,seed,params,test_err,final_s\n";
  for (const SweepRow& r : rows)
    for (size_t k = 0; k < r.test_errs.size(); ++k)
      out << r.schedule << ',' << k << ',' << r.params << ',' << format_double(r.test_errs[k])
          << ',' << format_double(r.final_s[k]) << "\n";
  if (!out) throw IoError("sweep: write failed for '" + path + "'");
}

}  // namespace dynreg
