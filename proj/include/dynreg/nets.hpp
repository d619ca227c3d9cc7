// Copyright (c) 2026 the dynreg authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dynreg/graph.hpp"
#include "dynreg/perturb.hpp"

namespace dynreg {

// Miniature image classifiers: stem conv -> L blocks -> batchnorm -> relu
// -> global average pool -> fully connected -> softmax cross-entropy.
// Three block families share that frame:
//   res2: x + F(x), F = conv3-bn-relu-conv3-bn (two-branch residual)
//   res3: x + F1(x) + F2(x), two such branches   (three-branch residual)
//   dense: concat(x, g(x)), g = bn-relu-conv3 emitting `growth` channels
// The branch factor per block is chosen by reg_mode; see perturb.hpp.

enum class Topology { res2, res3, dense };

enum class RegMode {
  none,         // branch factor 1, no stochastic nodes
  dynamic_reg,  // theta = A + s*r with per-block noise range l/L
  shake_shake,  // res3 only: alpha / 1-alpha branches
  shakedrop,    // res2 and dense: gated shake factor
  const_scale,  // deterministic literal factor A (reference topology)
};

enum class WideningRule { constant, pyramid };

enum class Mode { train, eval };

const char* topology_name(Topology t);
const char* reg_mode_name(RegMode m);

struct NetSpec {
  Topology topology = Topology::res2;
  int depth = 6;                     // number of blocks L
  int base_channels = 8;             // stem output channels
  WideningRule widening = WideningRule::pyramid;
  int widen = 16;                    // pyramid: total channel increment across depth
  int growth = 8;                    // dense: channels added per block
  int num_classes = 2;
  Shape input_shape;                 // {C, H, W}
  int batch_size = 32;
  RegMode reg_mode = RegMode::none;
  Granularity granularity = Granularity::per_batch;
  double amplitude = 0.5;            // A; also the const_scale literal
  double shakedrop_p_terminal = 0.5; // p_L for shakedrop
  std::uint64_t seed = 1;            // weight init and unit streams

  void validate() const;             // rejects inconsistent combinations
};

// Resolved geometry of one block, exposed for tests.
struct BlockSpec {
  int l = 1;          // 1-based block index
  int L = 1;
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;
};

// Kind-tagged unit for the shake baselines (forward/backward factors are
// drawn per iteration; eval installs the expectation / keep probability).
struct BaselineUnit {
  RegMode mode = RegMode::shake_shake;
  int block_index = 1;
  int total_blocks = 1;
  double p_terminal = 0.5;
  Rng rng;
  int scale_node = -1;       // factor alpha (shake_shake) or gated factor
  int complement_node = -1;  // factor 1-alpha (shake_shake only)
};

struct Network {
  Graph graph;
  NetSpec spec;
  std::vector<BlockSpec> blocks;
  int input_node = -1;
  int logits_node = -1;
  int loss_node = -1;
  std::vector<PerturbUnit> units;          // dynamic_reg only
  std::vector<BaselineUnit> baseline_units;
  Mode mode = Mode::train;

  void set_batch(const Tensor& input, const std::vector<int>& labels);
  void forward();              // refresh(); updates batchnorm stats in train mode
  double loss() const { return graph.value(loss_node).item(); }
};

// Deterministic build: same spec, same node order and initial weights.
// Construction runs a probe forward pass, so shape violations surface here.
Network build_net(const NetSpec& spec);

// Train <-> eval. Eval folds every stochastic factor to its deterministic
// inference value and switches batchnorm to running statistics. Neither
// direction touches parameters; switching is idempotent.
void set_mode(Network& net, Mode mode);

// Draw fresh forward (then backward) factors for every stochastic unit.
// No-ops for reg modes without stochastic nodes.
void sample_forward_scales(Network& net, double s);
void sample_backward_scales(Network& net, double s);

long count_params(const Graph& graph);
long count_params(const Network& net);

// Copy trainable parameters (and with copy_state also batchnorm running
// statistics) between structurally identical networks.
void copy_parameters(const Network& src, Network& dst);
void copy_state(const Network& src, Network& dst);

}  // namespace dynreg
