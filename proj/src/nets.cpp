// Copyright (c) 2026 the dynreg authors
// SPDX-License-Identifier: Apache-2.0
#include "dynreg/nets.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace dynreg {

const char* topology_name(Topology t) {
  switch (t) {
    case Topology::res2: return "res2";
    case Topology::res3: return "res3";
    case Topology::dense: return "dense";
  }
  return "unknown";
}

const char* reg_mode_name(RegMode m) {
  switch (m) {
    case RegMode::none: return "none";
    case RegMode::dynamic_reg: return "dynamic";
    case RegMode::shake_shake: return "shake_shake";
    case RegMode::shakedrop: return "shakedrop";
    case RegMode::const_scale: return "const_scale";
  }
  return "unknown";
}

void NetSpec::validate() const {
  auto bad = [](const std::string& what) { throw std::invalid_argument("net spec: " + what); };
  if (depth < 1) bad("depth must be >= 1");
  if (base_channels < 1) bad("base_channels must be >= 1");
  if (widen < 0) bad("widen must be >= 0");
  if (growth < 1) bad("growth must be >= 1");
  if (num_classes < 2) bad("num_classes must be >= 2");
  if (batch_size < 1) bad("batch_size must be >= 1");
  if (input_shape.size() != 3) bad("input_shape must be {C, H, W}");
  for (Eigen::Index d : input_shape)
    if (d < 1) bad("input_shape has a non-positive dimension " + shape_str(input_shape));
  if (reg_mode == RegMode::shake_shake && topology != Topology::res3)
    bad("shake_shake needs the three-branch topology (res3), got " +
        std::string(topology_name(topology)));
  if (reg_mode == RegMode::shakedrop && topology == Topology::res3)
    bad("shakedrop applies to single-branch blocks (res2 or dense), not res3");
  if (shakedrop_p_terminal < 0.0 || shakedrop_p_terminal > 1.0)
    bad("shakedrop_p_terminal must lie in [0, 1]");
  if (!std::isfinite(amplitude)) bad("amplitude must be finite");
}

namespace {

struct Builder {
  const NetSpec& spec;
  Graph g;
  Rng init;
  std::vector<PerturbUnit> units;
  std::vector<BaselineUnit> baselines;

  explicit Builder(const NetSpec& s) : spec(s), init(mix_seed(s.seed, 0xAA11)) {}

  Tensor he_normal(Shape shape, Eigen::Index fan_in, double gain) {
    Tensor t(std::move(shape));
    const double stddev = std::sqrt(gain / static_cast<double>(fan_in));
    for (Eigen::Index i = 0; i < t.numel(); ++i) t[i] = init.normal(0.0, stddev);
    return t;
  }

  int conv(int x, Eigen::Index cin, Eigen::Index cout, Eigen::Index k, int stride) {
    const int w = g.add_param(he_normal({cout, cin, k, k}, cin * k * k, 2.0));
    return g.conv2d(x, w, stride);
  }

  int bn(int x, Eigen::Index c) {
    const int gamma = g.add_param(Tensor::full({c}, 1.0));
    const int beta = g.add_param(Tensor::zeros({c}));
    return g.batchnorm(x, gamma, beta);
  }

  // Identity path: 1x1 projection for stride-2 blocks, zero channel padding
  // for same-resolution widening, plain identity otherwise.
  int shortcut(int x, Eigen::Index cin, Eigen::Index cout, int stride) {
    if (stride != 1) return conv(x, cin, cout, 1, stride);
    if (cout > cin) {
      const Shape xs = g.value(x).shape();
      const int zeros = g.add_constant(Tensor::zeros({xs[0], cout - cin, xs[2], xs[3]}));
      return g.concat(x, zeros);
    }
    return x;
  }

  PerturbUnit make_unit(int l) {
    PerturbUnit u;
    u.amplitude = spec.amplitude;
    u.noise_range = noise_range(l, spec.depth);
    u.block_index = l;
    u.granularity = spec.granularity;
    u.num_samples = spec.batch_size;
    u.theta = Eigen::ArrayXd::Constant(1, spec.amplitude);
    u.mu = u.theta;
    u.rng = Rng(mix_seed(spec.seed, 0xB000 + static_cast<std::uint64_t>(l)));
    return u;
  }

  BaselineUnit make_baseline(int l) {
    BaselineUnit u;
    u.mode = spec.reg_mode;
    u.block_index = l;
    u.total_blocks = spec.depth;
    u.p_terminal = spec.shakedrop_p_terminal;
    u.rng = Rng(mix_seed(spec.seed, 0xB000 + static_cast<std::uint64_t>(l)));
    return u;
  }

  // Combine an identity path with one transformed branch.
  int combine2(int sc, int branch, int l) {
    switch (spec.reg_mode) {
      case RegMode::none:
        return g.add(sc, branch);
      case RegMode::const_scale:
        return g.add(sc, g.scalar_mul(branch, spec.amplitude));
      case RegMode::dynamic_reg: {
        PerturbUnit u = make_unit(l);
        const ScaleHandles h = res2_forward(g, sc, branch, u.theta, u.mu);
        u.scale_node = h.scale_node;
        units.push_back(std::move(u));
        return h.out;
      }
      case RegMode::shakedrop: {
        BaselineUnit u = make_baseline(l);
        const double p = shakedrop_eval_scale(l, spec.depth, spec.shakedrop_p_terminal);
        const int scaled = g.branch_scale(branch, Eigen::ArrayXd::Constant(1, p),
                                          Eigen::ArrayXd::Constant(1, p));
        u.scale_node = scaled;
        baselines.push_back(std::move(u));
        return g.add(sc, scaled);
      }
      case RegMode::shake_shake:
        break;
    }
    throw std::invalid_argument("net spec: unsupported reg mode for a two-branch block");
  }

  int combine3(int sc, int b1, int b2, int l) {
    switch (spec.reg_mode) {
      case RegMode::none:
        return g.add(g.add(sc, b1), b2);
      case RegMode::const_scale:
        return g.add(g.add(sc, g.scalar_mul(b1, spec.amplitude)),
                     g.scalar_mul(b2, 1.0 - spec.amplitude));
      case RegMode::dynamic_reg: {
        PerturbUnit u = make_unit(l);
        const Res3Handles h = res3_forward(g, sc, b1, b2, u.theta, u.mu);
        u.scale_node = h.scale1;
        u.complement_node = h.scale2;
        units.push_back(std::move(u));
        return h.out;
      }
      case RegMode::shake_shake: {
        BaselineUnit u = make_baseline(l);
        const Eigen::ArrayXd half = Eigen::ArrayXd::Constant(1, 0.5);
        const int p1 = g.branch_scale(b1, half, half);
        const int p2 = g.branch_scale(b2, half, half);
        u.scale_node = p1;
        u.complement_node = p2;
        baselines.push_back(std::move(u));
        return g.add(g.add(sc, p1), p2);
      }
      case RegMode::shakedrop:
        break;
    }
    throw std::invalid_argument("net spec: unsupported reg mode for a three-branch block");
  }

  int res_branch(int x, Eigen::Index cin, Eigen::Index cout, int stride) {
    int h = conv(x, cin, cout, 3, stride);
    h = bn(h, cout);
    h = g.relu(h);
    h = conv(h, cout, cout, 3, 1);
    h = bn(h, cout);
    return h;
  }

  int dense_branch(int x, Eigen::Index cin) {
    int h = bn(x, cin);
    h = g.relu(h);
    h = conv(h, cin, spec.growth, 3, 1);
    return h;
  }

  // Dense combine: new features are factor-scaled, then concatenated.
  int combine_dense(int x, int branch, int l) {
    switch (spec.reg_mode) {
      case RegMode::none:
        return g.concat(x, branch);
      case RegMode::const_scale:
        return g.concat(x, g.scalar_mul(branch, spec.amplitude));
      case RegMode::dynamic_reg: {
        PerturbUnit u = make_unit(l);
        const ScaleHandles h = dense_forward(g, x, branch, u.theta, u.mu);
        u.scale_node = h.scale_node;
        units.push_back(std::move(u));
        return h.out;
      }
      case RegMode::shakedrop: {
        BaselineUnit u = make_baseline(l);
        const double p = shakedrop_eval_scale(l, spec.depth, spec.shakedrop_p_terminal);
        const int scaled = g.branch_scale(branch, Eigen::ArrayXd::Constant(1, p),
                                          Eigen::ArrayXd::Constant(1, p));
        u.scale_node = scaled;
        baselines.push_back(std::move(u));
        return g.concat(x, scaled);
      }
      case RegMode::shake_shake:
        break;
    }
    throw std::invalid_argument("net spec: unsupported reg mode for a dense block");
  }
};

}  // namespace

Network build_net(const NetSpec& spec) {
  spec.validate();
  Builder b(spec);
  // Build under eval semantics so the probe forward cannot touch batchnorm
  // running statistics; training mode is restored at the end.
  b.g.set_training(false);

  const Eigen::Index B = spec.batch_size;
  const Eigen::Index Cin = spec.input_shape[0];
  const int input = b.g.add_input(Tensor::zeros({B, Cin, spec.input_shape[1],
                                                 spec.input_shape[2]}));

  Network net;
  net.spec = spec;

  const int L = spec.depth;
  // Stride-2 stages at thirds of the depth, only while the map is large
  // enough to halve.
  const int s1 = L >= 3 ? L / 3 + 1 : -1;
  int s2 = L >= 3 ? (2 * L) / 3 + 1 : -1;
  if (s2 == s1) s2 = -1;

  int x = 0;
  Eigen::Index c = spec.base_channels;
  if (spec.topology == Topology::dense) {
    x = b.conv(input, Cin, c, 3, 1);
  } else {
    x = b.conv(input, Cin, c, 3, 1);
    x = b.bn(x, c);
    x = b.g.relu(x);
  }

  for (int l = 1; l <= L; ++l) {
    BlockSpec bs;
    bs.l = l;
    bs.L = L;
    bs.in_channels = static_cast<int>(c);
    if (spec.topology == Topology::dense) {
      bs.out_channels = static_cast<int>(c) + spec.growth;
      bs.stride = 1;
      const int branch = b.dense_branch(x, c);
      x = b.combine_dense(x, branch, l);
      c += spec.growth;
    } else {
      Eigen::Index cout = spec.base_channels;
      if (spec.widening == WideningRule::pyramid)
        cout += static_cast<Eigen::Index>(
            std::llround(static_cast<double>(spec.widen) * l / static_cast<double>(L)));
      const Shape xs = b.g.value(x).shape();
      const bool can_halve = xs[2] >= 8 && xs[3] >= 8;
      bs.stride = (can_halve && (l == s1 || l == s2)) ? 2 : 1;
      bs.out_channels = static_cast<int>(cout);
      const int sc = b.shortcut(x, c, cout, bs.stride);
      if (spec.topology == Topology::res2) {
        const int branch = b.res_branch(x, c, cout, bs.stride);
        x = b.combine2(sc, branch, l);
      } else {
        const int b1 = b.res_branch(x, c, cout, bs.stride);
        const int b2 = b.res_branch(x, c, cout, bs.stride);
        x = b.combine3(sc, b1, b2, l);
      }
      c = cout;
    }
    net.blocks.push_back(bs);
  }

  x = b.bn(x, c);
  x = b.g.relu(x);
  x = b.g.global_avg_pool(x);
  const int fc_w = b.g.add_param(b.he_normal({c, spec.num_classes}, c, 1.0));
  const int fc_b = b.g.add_param(Tensor::zeros({spec.num_classes}));
  const int logits = b.g.add(b.g.matmul(x, fc_w), fc_b);
  const int loss = b.g.softmax_cross_entropy(logits, std::vector<int>(static_cast<size_t>(B), 0));

  b.g.set_training(true);
  net.graph = std::move(b.g);
  net.input_node = input;
  net.logits_node = logits;
  net.loss_node = loss;
  net.units = std::move(b.units);
  net.baseline_units = std::move(b.baselines);
  net.mode = Mode::train;
  return net;
}

void Network::set_batch(const Tensor& input, const std::vector<int>& labels) {
  graph.set_value(input_node, input);
  graph.set_labels(loss_node, labels);
}

void Network::forward() { graph.refresh(); }

void set_mode(Network& net, Mode mode) {
  net.mode = mode;
  net.graph.set_training(mode == Mode::train);
  const bool training = mode == Mode::train;
  for (PerturbUnit& u : net.units) {
    u.training = training;
    if (!training) fold_unit(net.graph, u);
  }
  if (!training) {
    for (BaselineUnit& u : net.baseline_units) {
      double scale = 0.5;  // shake_shake: E[alpha]
      if (u.mode == RegMode::shakedrop)
        scale = shakedrop_eval_scale(u.block_index, u.total_blocks, u.p_terminal);
      const Eigen::ArrayXd v = Eigen::ArrayXd::Constant(1, scale);
      net.graph.set_branch_forward(u.scale_node, v);
      net.graph.set_branch_backward(u.scale_node, v);
      if (u.complement_node >= 0) {
        const Eigen::ArrayXd w = 1.0 - v;
        net.graph.set_branch_forward(u.complement_node, w);
        net.graph.set_branch_backward(u.complement_node, w);
      }
    }
  }
}

void sample_forward_scales(Network& net, double s) {
  if (net.mode != Mode::train)
    throw std::logic_error("net: stochastic factors cannot be sampled in eval mode");
  for (PerturbUnit& u : net.units) apply_forward_scales(net.graph, u, s);
  for (BaselineUnit& u : net.baseline_units) {
    if (u.mode == RegMode::shake_shake) {
      const ShakeScales sc = shake_shake_scales(u.rng);
      net.graph.set_branch_forward(u.scale_node, Eigen::ArrayXd::Constant(1, sc.forward));
      net.graph.set_branch_backward(u.scale_node, Eigen::ArrayXd::Constant(1, sc.backward));
      net.graph.set_branch_forward(u.complement_node,
                                   Eigen::ArrayXd::Constant(1, 1.0 - sc.forward));
      net.graph.set_branch_backward(u.complement_node,
                                    Eigen::ArrayXd::Constant(1, 1.0 - sc.backward));
    } else {  // shakedrop
      const ShakeDropScales sc =
          shakedrop_scale(u.block_index, u.total_blocks, u.p_terminal, u.rng);
      net.graph.set_branch_forward(u.scale_node, Eigen::ArrayXd::Constant(1, sc.forward));
      net.graph.set_branch_backward(u.scale_node, Eigen::ArrayXd::Constant(1, sc.backward));
    }
  }
}

void sample_backward_scales(Network& net, double s) {
  if (net.mode != Mode::train)
    throw std::logic_error("net: stochastic factors cannot be sampled in eval mode");
  // Baseline units draw forward and backward factors jointly above; only
  // the dynamic units defer the backward draw until after the forward pass.
  for (PerturbUnit& u : net.units) apply_backward_scales(net.graph, u, s);
}

long count_params(const Graph& graph) {
  long n = 0;
  for (int id : graph.parameters()) n += static_cast<long>(graph.value(id).numel());
  return n;
}

long count_params(const Network& net) { return count_params(net.graph); }

void copy_parameters(const Network& src, Network& dst) {
  const std::vector<int> ps = src.graph.parameters();
  const std::vector<int> pd = dst.graph.parameters();
  if (ps.size() != pd.size())
    throw std::invalid_argument("copy_parameters: parameter counts differ (" +
                                std::to_string(ps.size()) + " vs " + std::to_string(pd.size()) +
                                ")");
  for (size_t i = 0; i < ps.size(); ++i) dst.graph.set_value(pd[i], src.graph.value(ps[i]));
}

void copy_state(const Network& src, Network& dst) {
  copy_parameters(src, dst);
  if (src.graph.size() != dst.graph.size())
    throw std::invalid_argument("copy_state: graphs have different node counts");
  for (int id = 0; id < src.graph.size(); ++id) {
    const Node& a = src.graph.node(id);
    if (a.kind != OpKind::batchnorm) continue;
    Node& b = dst.graph.node_mut(id);
    if (b.kind != OpKind::batchnorm)
      throw std::invalid_argument("copy_state: node " + std::to_string(id) +
                                  " is batchnorm in one graph only");
    b.running_mean = a.running_mean;
    b.running_var = a.running_var;
  }
}

}  // namespace dynreg
