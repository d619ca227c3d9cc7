// Copyright (c) 2026 the dynreg authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dynreg/tensor.hpp"

namespace dynreg {

// Reverse-mode tape over dense double tensors. Nodes are appended in
// topological order (every input id precedes the node that consumes it),
// so forward execution is a single in-order sweep and backward a single
// reverse sweep.
enum class OpKind {
  input,
  param,
  constant,
  matmul,
  conv2d,
  add,
  scalar_mul,
  relu,
  batchnorm,
  global_avg_pool,
  concat,
  softmax_cross_entropy,
  branch_scale,
  reduce_mean,
};

const char* op_name(OpKind kind);

// Per-node attributes; only the fields relevant to the kind are read.
struct OpAttrs {
  int stride = 1;                  // conv2d
  Scalar scale = 1.0;              // scalar_mul
  Eigen::ArrayXd forward_scale;    // branch_scale: size 1 or batch
  Eigen::ArrayXd backward_scale;   // branch_scale: size 1 or batch
  std::vector<int> labels;         // softmax_cross_entropy
};

struct Node {
  OpKind kind = OpKind::input;
  std::vector<int> inputs;
  Tensor value;
  bool trainable = false;

  OpAttrs attrs;

  // batchnorm state and saved context
  Scalar bn_momentum = 0.9;
  Scalar bn_eps = 1e-5;
  Tensor running_mean;   // [C]
  Tensor running_var;    // [C]
  Tensor saved_xhat;     // normalized activations from the last forward
  Eigen::ArrayXd saved_invstd;
  bool bn_saved_training = true;  // mode the saved context was computed in

  Tensor saved_probs;    // softmax_cross_entropy context
};

class Graph {
 public:
  // Leaves.
  int add_input(Tensor value);
  int add_param(Tensor value);
  int add_constant(Tensor value);

  // Generic op entry: validates shapes, computes the output immediately,
  // appends the node, and returns its id. Unknown kinds and shape
  // mismatches are rejected with a diagnostic naming the op and shapes.
  int forward_op(OpKind kind, const std::vector<int>& inputs, OpAttrs attrs = {});

  // Typed conveniences over forward_op.
  int matmul(int a, int b);
  int conv2d(int x, int w, int stride = 1);
  int add(int a, int b);
  int scalar_mul(int x, Scalar c);
  int relu(int x);
  int batchnorm(int x, int gamma, int beta);
  int global_avg_pool(int x);
  int concat(int a, int b);
  int softmax_cross_entropy(int logits, std::vector<int> labels);
  int branch_scale(int x, Eigen::ArrayXd forward_scale, Eigen::ArrayXd backward_scale);
  int reduce_mean(int x);

  // Mutators used between iterations. set_value only accepts leaves and
  // preserves the stored shape.
  void set_value(int id, const Tensor& value);
  void set_labels(int id, std::vector<int> labels);
  void set_branch_forward(int id, Eigen::ArrayXd scale);
  void set_branch_backward(int id, Eigen::ArrayXd scale);

  // Train mode lets batchnorm consume batch statistics; eval mode uses the
  // running estimates. Running stats are only updated by refresh() in
  // train mode, never by recompute().
  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  // Recompute every non-leaf output in stored order.
  void refresh();     // updates batchnorm running stats when training
  void recompute();   // pure re-execution; never touches running stats

  const Tensor& value(int id) const { return node_at(id).value; }
  const Node& node(int id) const { return node_at(id); }
  Node& node_mut(int id) { return node_at(id); }
  int size() const { return static_cast<int>(nodes_.size()); }
  std::vector<int> parameters() const;

 private:
  Node& node_at(int id);
  const Node& node_at(int id) const;
  void check_input_ids(OpKind kind, const std::vector<int>& inputs) const;
  void compute(Node& node, bool update_stats);

  std::vector<Node> nodes_;
  bool training_ = true;
};

// Gradient tensors keyed by node id. Every parameter node of the graph is
// present with a gradient of identical shape (zero when unreachable from
// the loss).
struct Gradients {
  std::unordered_map<int, Tensor> by_node;
  const Tensor& at(int id) const;
  bool contains(int id) const { return by_node.count(id) > 0; }
};

// Reverse accumulation from a one-element loss node.
Gradients backward(Graph& graph, int loss_node);

struct GradCheckReport {
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  Eigen::Index entries = 0;
};

// Central finite differences over every parameter entry. Requires every
// branch_scale node to carry equal forward and backward scales; rejects
// the graph otherwise, since a decoupled backward is not the gradient of
// the executed forward.
GradCheckReport grad_check(Graph& graph, int loss_node, double step = 1e-5);

}  // namespace dynreg
