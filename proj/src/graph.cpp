// Copyright (c) 2026 the dynreg authors
// SPDX-License-Identifier: Apache-2.0
#include "dynreg/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dynreg {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::input: return "input";
    case OpKind::param: return "param";
    case OpKind::constant: return "constant";
    case OpKind::matmul: return "matmul";
    case OpKind::conv2d: return "conv2d";
    case OpKind::add: return "add";
    case OpKind::scalar_mul: return "scalar_mul";
    case OpKind::relu: return "relu";
    case OpKind::batchnorm: return "batchnorm";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::concat: return "concat";
    case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
    case OpKind::branch_scale: return "branch_scale";
    case OpKind::reduce_mean: return "reduce_mean";
  }
  return "unknown";
}

namespace {

[[noreturn]] void fail(const std::string& op, const std::string& what) {
  throw std::invalid_argument(op + ": " + what);
}

void expect_rank(const std::string& op, const char* role, const Tensor& t, int rank) {
  if (t.rank() != rank)
    fail(op, std::string(role) + " must have rank " + std::to_string(rank) + ", got shape " +
                 shape_str(t.shape()));
}

int conv_padding(Eigen::Index k) { return static_cast<int>((k - 1) / 2); }

Eigen::Index conv_out_dim(Eigen::Index in, Eigen::Index k, int stride) {
  const Eigen::Index p = conv_padding(k);
  return (in + 2 * p - k) / stride + 1;
}

void check_labels(const std::string& op, const std::vector<int>& labels,
                  Eigen::Index rows, Eigen::Index classes) {
  if (static_cast<Eigen::Index>(labels.size()) != rows)
    fail(op, "expected " + std::to_string(rows) + " labels, got " +
                 std::to_string(labels.size()));
  for (int y : labels)
    if (y < 0 || y >= classes)
      fail(op, "label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
}

void check_branch_factors(const std::string& op, const Eigen::ArrayXd& f,
                          const char* role, Eigen::Index batch) {
  if (f.size() != 1 && f.size() != batch)
    fail(op, std::string(role) + " factor size " + std::to_string(f.size()) +
                 " must be 1 or the leading dimension " + std::to_string(batch));
}

// Scatter/gather between [C, H, W] slabs and the [C*k*k, Ho*Wo] patch
// matrix used by the convolution kernels.
void im2col(const Scalar* x, Eigen::Index C, Eigen::Index H, Eigen::Index W,
            Eigen::Index k, int stride, Eigen::Index Ho, Eigen::Index Wo, Scalar* col) {
  const int p = conv_padding(k);
  Eigen::Index row = 0;
  for (Eigen::Index c = 0; c < C; ++c) {
    for (Eigen::Index ki = 0; ki < k; ++ki) {
      for (Eigen::Index kj = 0; kj < k; ++kj, ++row) {
        Scalar* dst = col + row * (Ho * Wo);
        for (Eigen::Index oy = 0; oy < Ho; ++oy) {
          const Eigen::Index sy = oy * stride + ki - p;
          for (Eigen::Index ox = 0; ox < Wo; ++ox) {
            const Eigen::Index sx = ox * stride + kj - p;
            dst[oy * Wo + ox] = (sy >= 0 && sy < H && sx >= 0 && sx < W)
                                    ? x[(c * H + sy) * W + sx]
                                    : 0.0;
          }
        }
      }
    }
  }
}

void col2im_acc(const Scalar* col, Eigen::Index C, Eigen::Index H, Eigen::Index W,
                Eigen::Index k, int stride, Eigen::Index Ho, Eigen::Index Wo, Scalar* x) {
  const int p = conv_padding(k);
  Eigen::Index row = 0;
  for (Eigen::Index c = 0; c < C; ++c) {
    for (Eigen::Index ki = 0; ki < k; ++ki) {
      for (Eigen::Index kj = 0; kj < k; ++kj, ++row) {
        const Scalar* src = col + row * (Ho * Wo);
        for (Eigen::Index oy = 0; oy < Ho; ++oy) {
          const Eigen::Index sy = oy * stride + ki - p;
          if (sy < 0 || sy >= H) continue;
          for (Eigen::Index ox = 0; ox < Wo; ++ox) {
            const Eigen::Index sx = ox * stride + kj - p;
            if (sx < 0 || sx >= W) continue;
            x[(c * H + sy) * W + sx] += src[oy * Wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Node& Graph::node_at(int id) {
  if (id < 0 || id >= size())
    throw std::invalid_argument("graph: node id " + std::to_string(id) + " out of range");
  return nodes_[static_cast<size_t>(id)];
}

const Node& Graph::node_at(int id) const {
  if (id < 0 || id >= size())
    throw std::invalid_argument("graph: node id " + std::to_string(id) + " out of range");
  return nodes_[static_cast<size_t>(id)];
}

int Graph::add_input(Tensor value) {
  Node n;
  n.kind = OpKind::input;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return size() - 1;
}

int Graph::add_param(Tensor value) {
  Node n;
  n.kind = OpKind::param;
  n.value = std::move(value);
  n.trainable = true;
  nodes_.push_back(std::move(n));
  return size() - 1;
}

int Graph::add_constant(Tensor value) {
  Node n;
  n.kind = OpKind::constant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return size() - 1;
}

void Graph::check_input_ids(OpKind kind, const std::vector<int>& inputs) const {
  for (int id : inputs)
    if (id < 0 || id >= size())
      fail(op_name(kind), "input id " + std::to_string(id) +
                              " not yet defined (graph has " + std::to_string(size()) +
                              " nodes); inputs must precede their consumer");
}

int Graph::forward_op(OpKind kind, const std::vector<int>& inputs, OpAttrs attrs) {
  const std::string op = op_name(kind);
  check_input_ids(kind, inputs);
  auto arity = [&](size_t n) {
    if (inputs.size() != n)
      fail(op, "expects " + std::to_string(n) + " inputs, got " + std::to_string(inputs.size()));
  };

  Node node;
  node.kind = kind;
  node.inputs = inputs;
  node.attrs = std::move(attrs);

  switch (kind) {
    case OpKind::input:
    case OpKind::param:
    case OpKind::constant:
      fail(op, "leaf kinds are created with add_input/add_param/add_constant");
    case OpKind::matmul: {
      arity(2);
      const Tensor& a = value(inputs[0]);
      const Tensor& b = value(inputs[1]);
      expect_rank(op, "lhs", a, 2);
      expect_rank(op, "rhs", b, 2);
      if (a.dim(1) != b.dim(0))
        fail(op, "inner dimensions disagree: lhs " + shape_str(a.shape()) + " vs rhs " +
                     shape_str(b.shape()));
      break;
    }
    case OpKind::conv2d: {
      arity(2);
      const Tensor& x = value(inputs[0]);
      const Tensor& w = value(inputs[1]);
      expect_rank(op, "input", x, 4);
      expect_rank(op, "weight", w, 4);
      if (w.dim(2) != w.dim(3) || (w.dim(2) != 1 && w.dim(2) != 3))
        fail(op, "kernel must be 1x1 or 3x3, got weight " + shape_str(w.shape()));
      if (node.attrs.stride != 1 && node.attrs.stride != 2)
        fail(op, "stride must be 1 or 2, got " + std::to_string(node.attrs.stride));
      if (x.dim(1) != w.dim(1))
        fail(op, "input channels " + std::to_string(x.dim(1)) + " do not match weight channels " +
                     std::to_string(w.dim(1)) + " (input " + shape_str(x.shape()) + ", weight " +
                     shape_str(w.shape()) + ")");
      if (conv_out_dim(x.dim(2), w.dim(2), node.attrs.stride) < 1 ||
          conv_out_dim(x.dim(3), w.dim(3), node.attrs.stride) < 1)
        fail(op, "input " + shape_str(x.shape()) + " too small for kernel " +
                     shape_str(w.shape()));
      break;
    }
    case OpKind::add: {
      arity(2);
      const Tensor& a = value(inputs[0]);
      const Tensor& b = value(inputs[1]);
      const bool same = a.same_shape(b);
      const bool bias = a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0);
      if (!same && !bias)
        fail(op, "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " are neither equal nor a [rows, cols] + [cols] broadcast");
      break;
    }
    case OpKind::scalar_mul:
    case OpKind::relu:
    case OpKind::reduce_mean:
      arity(1);
      break;
    case OpKind::batchnorm: {
      arity(3);
      const Tensor& x = value(inputs[0]);
      const Tensor& gamma = value(inputs[1]);
      const Tensor& beta = value(inputs[2]);
      expect_rank(op, "input", x, 4);
      expect_rank(op, "gamma", gamma, 1);
      expect_rank(op, "beta", beta, 1);
      if (gamma.dim(0) != x.dim(1) || beta.dim(0) != x.dim(1))
        fail(op, "gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                     " must match channels of input " + shape_str(x.shape()));
      node.running_mean = Tensor::zeros({x.dim(1)});
      node.running_var = Tensor::full({x.dim(1)}, 1.0);
      break;
    }
    case OpKind::global_avg_pool:
      arity(1);
      expect_rank(op, "input", value(inputs[0]), 4);
      break;
    case OpKind::concat: {
      arity(2);
      const Tensor& a = value(inputs[0]);
      const Tensor& b = value(inputs[1]);
      expect_rank(op, "lhs", a, 4);
      expect_rank(op, "rhs", b, 4);
      if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        fail(op, "all dimensions except channels must match: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
      break;
    }
    case OpKind::softmax_cross_entropy: {
      arity(1);
      const Tensor& logits = value(inputs[0]);
      expect_rank(op, "logits", logits, 2);
      check_labels(op, node.attrs.labels, logits.dim(0), logits.dim(1));
      break;
    }
    case OpKind::branch_scale: {
      arity(1);
      const Tensor& x = value(inputs[0]);
      if (node.attrs.forward_scale.size() == 0) node.attrs.forward_scale = Eigen::ArrayXd::Ones(1);
      if (node.attrs.backward_scale.size() == 0)
        node.attrs.backward_scale = node.attrs.forward_scale;
      check_branch_factors(op, node.attrs.forward_scale, "forward", x.dim(0));
      check_branch_factors(op, node.attrs.backward_scale, "backward", x.dim(0));
      break;
    }
    default:
      fail("graph", "unknown op kind " + std::to_string(static_cast<int>(kind)));
  }

  compute(node, training_);
  nodes_.push_back(std::move(node));
  return size() - 1;
}

int Graph::matmul(int a, int b) { return forward_op(OpKind::matmul, {a, b}); }

int Graph::conv2d(int x, int w, int stride) {
  OpAttrs attrs;
  attrs.stride = stride;
  return forward_op(OpKind::conv2d, {x, w}, std::move(attrs));
}

int Graph::add(int a, int b) { return forward_op(OpKind::add, {a, b}); }

int Graph::scalar_mul(int x, Scalar c) {
  OpAttrs attrs;
  attrs.scale = c;
  return forward_op(OpKind::scalar_mul, {x}, std::move(attrs));
}

int Graph::relu(int x) { return forward_op(OpKind::relu, {x}); }

int Graph::batchnorm(int x, int gamma, int beta) {
  return forward_op(OpKind::batchnorm, {x, gamma, beta});
}

int Graph::global_avg_pool(int x) { return forward_op(OpKind::global_avg_pool, {x}); }

int Graph::concat(int a, int b) { return forward_op(OpKind::concat, {a, b}); }

int Graph::softmax_cross_entropy(int logits, std::vector<int> labels) {
  OpAttrs attrs;
  attrs.labels = std::move(labels);
  return forward_op(OpKind::softmax_cross_entropy, {logits}, std::move(attrs));
}

int Graph::branch_scale(int x, Eigen::ArrayXd forward_scale, Eigen::ArrayXd backward_scale) {
  OpAttrs attrs;
  attrs.forward_scale = std::move(forward_scale);
  attrs.backward_scale = std::move(backward_scale);
  return forward_op(OpKind::branch_scale, {x}, std::move(attrs));
}

int Graph::reduce_mean(int x) { return forward_op(OpKind::reduce_mean, {x}); }

void Graph::set_value(int id, const Tensor& value) {
  Node& n = node_at(id);
  if (n.kind != OpKind::input && n.kind != OpKind::param && n.kind != OpKind::constant)
    fail(op_name(n.kind), "set_value only applies to leaf nodes");
  if (!n.value.same_shape(value))
    fail(op_name(n.kind), "set_value shape " + shape_str(value.shape()) +
                              " does not match stored shape " + shape_str(n.value.shape()));
  n.value = value;
}

void Graph::set_labels(int id, std::vector<int> labels) {
  Node& n = node_at(id);
  if (n.kind != OpKind::softmax_cross_entropy)
    fail(op_name(n.kind), "set_labels only applies to softmax_cross_entropy nodes");
  const Tensor& logits = value(n.inputs[0]);
  check_labels(op_name(n.kind), labels, logits.dim(0), logits.dim(1));
  n.attrs.labels = std::move(labels);
}

void Graph::set_branch_forward(int id, Eigen::ArrayXd scale) {
  Node& n = node_at(id);
  if (n.kind != OpKind::branch_scale)
    fail(op_name(n.kind), "set_branch_forward only applies to branch_scale nodes");
  check_branch_factors("branch_scale", scale, "forward", value(n.inputs[0]).dim(0));
  n.attrs.forward_scale = std::move(scale);
}

void Graph::set_branch_backward(int id, Eigen::ArrayXd scale) {
  Node& n = node_at(id);
  if (n.kind != OpKind::branch_scale)
    fail(op_name(n.kind), "set_branch_backward only applies to branch_scale nodes");
  check_branch_factors("branch_scale", scale, "backward", value(n.inputs[0]).dim(0));
  n.attrs.backward_scale = std::move(scale);
}

void Graph::refresh() {
  for (Node& n : nodes_)
    if (n.kind != OpKind::input && n.kind != OpKind::param && n.kind != OpKind::constant)
      compute(n, training_);
}

void Graph::recompute() {
  for (Node& n : nodes_)
    if (n.kind != OpKind::input && n.kind != OpKind::param && n.kind != OpKind::constant)
      compute(n, false);
}

std::vector<int> Graph::parameters() const {
  std::vector<int> ids;
  for (int i = 0; i < size(); ++i)
    if (nodes_[static_cast<size_t>(i)].trainable) ids.push_back(i);
  return ids;
}

void Graph::compute(Node& node, bool update_stats) {
  switch (node.kind) {
    case OpKind::matmul: {
      const Tensor& a = value(node.inputs[0]);
      const Tensor& b = value(node.inputs[1]);
      const Eigen::Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
      Tensor out({m, n});
      MatMap(out.data(), m, n) = ConstMatMap(a.data(), m, k) * ConstMatMap(b.data(), k, n);
      node.value = std::move(out);
      break;
    }
    case OpKind::conv2d: {
      const Tensor& x = value(node.inputs[0]);
      const Tensor& w = value(node.inputs[1]);
      const Eigen::Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const Eigen::Index F = w.dim(0), k = w.dim(2);
      const int stride = node.attrs.stride;
      const Eigen::Index Ho = conv_out_dim(H, k, stride), Wo = conv_out_dim(W, k, stride);
      Tensor out({N, F, Ho, Wo});
      Eigen::ArrayXd col(C * k * k * Ho * Wo);
      ConstMatMap wmat(w.data(), F, C * k * k);
      for (Eigen::Index n = 0; n < N; ++n) {
        im2col(x.data() + n * C * H * W, C, H, W, k, stride, Ho, Wo, col.data());
        MatMap(out.data() + n * F * Ho * Wo, F, Ho * Wo) =
            wmat * ConstMatMap(col.data(), C * k * k, Ho * Wo);
      }
      node.value = std::move(out);
      break;
    }
    case OpKind::add: {
      const Tensor& a = value(node.inputs[0]);
      const Tensor& b = value(node.inputs[1]);
      if (a.same_shape(b)) {
        node.value = Tensor(a.shape(), a.array() + b.array());
      } else {  // [rows, cols] + [cols]
        Tensor out(a.shape());
        const Eigen::Index rows = a.dim(0), cols = a.dim(1);
        for (Eigen::Index i = 0; i < rows; ++i)
          for (Eigen::Index j = 0; j < cols; ++j) out.at2(i, j) = a.at2(i, j) + b[j];
        node.value = std::move(out);
      }
      break;
    }
    case OpKind::scalar_mul: {
      const Tensor& x = value(node.inputs[0]);
      node.value = Tensor(x.shape(), node.attrs.scale * x.array());
      break;
    }
    case OpKind::relu: {
      const Tensor& x = value(node.inputs[0]);
      node.value = Tensor(x.shape(), x.array().max(0.0));
      break;
    }
    case OpKind::batchnorm: {
      const Tensor& x = value(node.inputs[0]);
      const Tensor& gamma = value(node.inputs[1]);
      const Tensor& beta = value(node.inputs[2]);
      const Eigen::Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const Eigen::Index m = N * H * W;
      Tensor out(x.shape());
      Tensor xhat(x.shape());
      Eigen::ArrayXd invstd(C);
      for (Eigen::Index c = 0; c < C; ++c) {
        Scalar mean, var;
        if (training_) {
          Scalar sum = 0.0;
          for (Eigen::Index n = 0; n < N; ++n)
            for (Eigen::Index h = 0; h < H; ++h)
              for (Eigen::Index w2 = 0; w2 < W; ++w2) sum += x.at4(n, c, h, w2);
          mean = sum / static_cast<Scalar>(m);
          Scalar sq = 0.0;
          for (Eigen::Index n = 0; n < N; ++n)
            for (Eigen::Index h = 0; h < H; ++h)
              for (Eigen::Index w2 = 0; w2 < W; ++w2) {
                const Scalar d = x.at4(n, c, h, w2) - mean;
                sq += d * d;
              }
          var = sq / static_cast<Scalar>(m);
          if (update_stats) {
            // Running variance stores the unbiased estimate.
            const Scalar unbiased = m > 1 ? var * static_cast<Scalar>(m) /
                                                static_cast<Scalar>(m - 1)
                                          : var;
            node.running_mean[c] =
                node.bn_momentum * node.running_mean[c] + (1.0 - node.bn_momentum) * mean;
            node.running_var[c] =
                node.bn_momentum * node.running_var[c] + (1.0 - node.bn_momentum) * unbiased;
          }
        } else {
          mean = node.running_mean[c];
          var = node.running_var[c];
        }
        const Scalar is = 1.0 / std::sqrt(var + node.bn_eps);
        invstd[c] = is;
        for (Eigen::Index n = 0; n < N; ++n)
          for (Eigen::Index h = 0; h < H; ++h)
            for (Eigen::Index w2 = 0; w2 < W; ++w2) {
              const Scalar xh = (x.at4(n, c, h, w2) - mean) * is;
              xhat.at4(n, c, h, w2) = xh;
              out.at4(n, c, h, w2) = gamma[c] * xh + beta[c];
            }
      }
      node.saved_xhat = std::move(xhat);
      node.saved_invstd = std::move(invstd);
      node.bn_saved_training = training_;
      node.value = std::move(out);
      break;
    }
    case OpKind::global_avg_pool: {
      const Tensor& x = value(node.inputs[0]);
      const Eigen::Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      Tensor out({N, C});
      for (Eigen::Index n = 0; n < N; ++n)
        for (Eigen::Index c = 0; c < C; ++c) {
          Scalar sum = 0.0;
          for (Eigen::Index h = 0; h < H; ++h)
            for (Eigen::Index w2 = 0; w2 < W; ++w2) sum += x.at4(n, c, h, w2);
          out.at2(n, c) = sum / static_cast<Scalar>(H * W);
        }
      node.value = std::move(out);
      break;
    }
    case OpKind::concat: {
      const Tensor& a = value(node.inputs[0]);
      const Tensor& b = value(node.inputs[1]);
      const Eigen::Index N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
      Tensor out({N, Ca + Cb, H, W});
      const Eigen::Index slab = H * W;
      for (Eigen::Index n = 0; n < N; ++n) {
        std::copy(a.data() + n * Ca * slab, a.data() + (n + 1) * Ca * slab,
                  out.data() + n * (Ca + Cb) * slab);
        std::copy(b.data() + n * Cb * slab, b.data() + (n + 1) * Cb * slab,
                  out.data() + (n * (Ca + Cb) + Ca) * slab);
      }
      node.value = std::move(out);
      break;
    }
    case OpKind::softmax_cross_entropy: {
      const Tensor& logits = value(node.inputs[0]);
      const Eigen::Index N = logits.dim(0), K = logits.dim(1);
      Tensor probs(logits.shape());
      Scalar loss = 0.0;
      for (Eigen::Index n = 0; n < N; ++n) {
        Scalar mx = logits.at2(n, 0);
        for (Eigen::Index c = 1; c < K; ++c) mx = std::max(mx, logits.at2(n, c));
        Scalar sum = 0.0;
        for (Eigen::Index c = 0; c < K; ++c) {
          const Scalar e = std::exp(logits.at2(n, c) - mx);
          probs.at2(n, c) = e;
          sum += e;
        }
        for (Eigen::Index c = 0; c < K; ++c) probs.at2(n, c) /= sum;
        const int y = node.attrs.labels[static_cast<size_t>(n)];
        loss -= std::log(std::max(probs.at2(n, y), 1e-300));
      }
      node.saved_probs = std::move(probs);
      node.value = Tensor::scalar(loss / static_cast<Scalar>(N));
      break;
    }
    case OpKind::branch_scale: {
      const Tensor& x = value(node.inputs[0]);
      const Eigen::ArrayXd& f = node.attrs.forward_scale;
      Tensor out(x.shape());
      if (f.size() == 1) {
        out.array() = f[0] * x.array();
      } else {
        const Eigen::Index N = x.dim(0), slab = x.numel() / x.dim(0);
        for (Eigen::Index n = 0; n < N; ++n)
          out.array().segment(n * slab, slab) = f[n] * x.array().segment(n * slab, slab);
      }
      node.value = std::move(out);
      break;
    }
    case OpKind::reduce_mean: {
      const Tensor& x = value(node.inputs[0]);
      node.value = Tensor::scalar(x.array().mean());
      break;
    }
    case OpKind::input:
    case OpKind::param:
    case OpKind::constant:
      break;
    default:
      fail("graph", "unknown op kind " + std::to_string(static_cast<int>(node.kind)));
  }
}

const Tensor& Gradients::at(int id) const {
  auto it = by_node.find(id);
  if (it == by_node.end())
    throw std::invalid_argument("gradients: no entry for node " + std::to_string(id));
  return it->second;
}

Gradients backward(Graph& graph, int loss_node) {
  const Tensor& loss = graph.value(loss_node);
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss node must be one element, got shape " +
                                shape_str(loss.shape()));

  std::vector<Tensor> grads(static_cast<size_t>(graph.size()));
  auto has = [&](int id) { return grads[static_cast<size_t>(id)].numel() > 0; };
  auto acc = [&](int id) -> Tensor& {
    Tensor& g = grads[static_cast<size_t>(id)];
    if (g.numel() == 0) g = Tensor::zeros(graph.value(id).shape());
    return g;
  };

  acc(loss_node).array().setConstant(1.0);

  for (int id = loss_node; id >= 0; --id) {
    if (!has(id)) continue;
    const Node& node = graph.node(id);
    const Tensor& g = grads[static_cast<size_t>(id)];
    switch (node.kind) {
      case OpKind::input:
      case OpKind::param:
      case OpKind::constant:
        break;
      case OpKind::matmul: {
        const Tensor& a = graph.value(node.inputs[0]);
        const Tensor& b = graph.value(node.inputs[1]);
        const Eigen::Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
        ConstMatMap gm(g.data(), m, n);
        MatMap(acc(node.inputs[0]).data(), m, k).noalias() +=
            gm * ConstMatMap(b.data(), k, n).transpose();
        MatMap(acc(node.inputs[1]).data(), k, n).noalias() +=
            ConstMatMap(a.data(), m, k).transpose() * gm;
        break;
      }
      case OpKind::conv2d: {
        const Tensor& x = graph.value(node.inputs[0]);
        const Tensor& w = graph.value(node.inputs[1]);
        const Eigen::Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const Eigen::Index F = w.dim(0), k = w.dim(2);
        const int stride = node.attrs.stride;
        const Eigen::Index Ho = conv_out_dim(H, k, stride), Wo = conv_out_dim(W, k, stride);
        Tensor& gx = acc(node.inputs[0]);
        Tensor& gw = acc(node.inputs[1]);
        Eigen::ArrayXd col(C * k * k * Ho * Wo);
        Eigen::ArrayXd gcol(C * k * k * Ho * Wo);
        ConstMatMap wmat(w.data(), F, C * k * k);
        MatMap gwmat(gw.data(), F, C * k * k);
        for (Eigen::Index n = 0; n < N; ++n) {
          im2col(x.data() + n * C * H * W, C, H, W, k, stride, Ho, Wo, col.data());
          ConstMatMap gout(g.data() + n * F * Ho * Wo, F, Ho * Wo);
          gwmat.noalias() += gout * ConstMatMap(col.data(), C * k * k, Ho * Wo).transpose();
          MatMap(gcol.data(), C * k * k, Ho * Wo).noalias() = wmat.transpose() * gout;
          col2im_acc(gcol.data(), C, H, W, k, stride, Ho, Wo, gx.data() + n * C * H * W);
        }
        break;
      }
      case OpKind::add: {
        const Tensor& a = graph.value(node.inputs[0]);
        const Tensor& b = graph.value(node.inputs[1]);
        acc(node.inputs[0]).array() += g.array();
        if (a.same_shape(b)) {
          acc(node.inputs[1]).array() += g.array();
        } else {
          Tensor& gb = acc(node.inputs[1]);
          const Eigen::Index rows = a.dim(0), cols = a.dim(1);
          for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) gb[j] += g.at2(i, j);
        }
        break;
      }
      case OpKind::scalar_mul:
        acc(node.inputs[0]).array() += node.attrs.scale * g.array();
        break;
      case OpKind::relu: {
        const Tensor& x = graph.value(node.inputs[0]);
        acc(node.inputs[0]).array() += g.array() * (x.array() > 0.0).cast<Scalar>();
        break;
      }
      case OpKind::batchnorm: {
        const Tensor& x = graph.value(node.inputs[0]);
        const Tensor& gamma = graph.value(node.inputs[1]);
        const Eigen::Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const Scalar m = static_cast<Scalar>(N * H * W);
        Tensor& gx = acc(node.inputs[0]);
        Tensor& ggamma = acc(node.inputs[1]);
        Tensor& gbeta = acc(node.inputs[2]);
        const Tensor& xhat = node.saved_xhat;
        for (Eigen::Index c = 0; c < C; ++c) {
          Scalar sum_g = 0.0, sum_gx = 0.0;
          for (Eigen::Index n = 0; n < N; ++n)
            for (Eigen::Index h = 0; h < H; ++h)
              for (Eigen::Index w2 = 0; w2 < W; ++w2) {
                const Scalar go = g.at4(n, c, h, w2);
                sum_g += go;
                sum_gx += go * xhat.at4(n, c, h, w2);
              }
          ggamma[c] += sum_gx;
          gbeta[c] += sum_g;
          const Scalar gs = gamma[c] * node.saved_invstd[c];
          if (node.bn_saved_training) {
            for (Eigen::Index n = 0; n < N; ++n)
              for (Eigen::Index h = 0; h < H; ++h)
                for (Eigen::Index w2 = 0; w2 < W; ++w2)
                  gx.at4(n, c, h, w2) +=
                      gs * (g.at4(n, c, h, w2) - sum_g / m -
                            xhat.at4(n, c, h, w2) * sum_gx / m);
          } else {  // running statistics are constants
            for (Eigen::Index n = 0; n < N; ++n)
              for (Eigen::Index h = 0; h < H; ++h)
                for (Eigen::Index w2 = 0; w2 < W; ++w2)
                  gx.at4(n, c, h, w2) += gs * g.at4(n, c, h, w2);
          }
        }
        break;
      }
      case OpKind::global_avg_pool: {
        const Tensor& x = graph.value(node.inputs[0]);
        const Eigen::Index N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const Scalar inv = 1.0 / static_cast<Scalar>(H * W);
        Tensor& gx = acc(node.inputs[0]);
        for (Eigen::Index n = 0; n < N; ++n)
          for (Eigen::Index c = 0; c < C; ++c) {
            const Scalar gv = g.at2(n, c) * inv;
            for (Eigen::Index h = 0; h < H; ++h)
              for (Eigen::Index w2 = 0; w2 < W; ++w2) gx.at4(n, c, h, w2) += gv;
          }
        break;
      }
      case OpKind::concat: {
        const Tensor& a = graph.value(node.inputs[0]);
        const Tensor& b = graph.value(node.inputs[1]);
        const Eigen::Index N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
        const Eigen::Index slab = a.dim(2) * a.dim(3);
        Tensor& ga = acc(node.inputs[0]);
        Tensor& gb = acc(node.inputs[1]);
        for (Eigen::Index n = 0; n < N; ++n) {
          ga.array().segment(n * Ca * slab, Ca * slab) +=
              g.array().segment(n * (Ca + Cb) * slab, Ca * slab);
          gb.array().segment(n * Cb * slab, Cb * slab) +=
              g.array().segment((n * (Ca + Cb) + Ca) * slab, Cb * slab);
        }
        break;
      }
      case OpKind::softmax_cross_entropy: {
        const Tensor& probs = node.saved_probs;
        const Eigen::Index N = probs.dim(0), K = probs.dim(1);
        const Scalar gv = g[0] / static_cast<Scalar>(N);
        Tensor& gl = acc(node.inputs[0]);
        for (Eigen::Index n = 0; n < N; ++n) {
          const int y = node.attrs.labels[static_cast<size_t>(n)];
          for (Eigen::Index c = 0; c < K; ++c)
            gl.at2(n, c) += gv * (probs.at2(n, c) - (c == y ? 1.0 : 0.0));
        }
        break;
      }
      case OpKind::branch_scale: {
        const Tensor& x = graph.value(node.inputs[0]);
        const Eigen::ArrayXd& bscale = node.attrs.backward_scale;
        Tensor& gx = acc(node.inputs[0]);
        if (bscale.size() == 1) {
          gx.array() += bscale[0] * g.array();
        } else {
          const Eigen::Index N = x.dim(0), slab = x.numel() / x.dim(0);
          for (Eigen::Index n = 0; n < N; ++n)
            gx.array().segment(n * slab, slab) += bscale[n] * g.array().segment(n * slab, slab);
        }
        break;
      }
      case OpKind::reduce_mean: {
        const Tensor& x = graph.value(node.inputs[0]);
        acc(node.inputs[0]).array() += g[0] / static_cast<Scalar>(x.numel());
        break;
      }
    }
  }

  Gradients result;
  for (int id = 0; id < graph.size(); ++id) {
    if (has(id)) {
      result.by_node.emplace(id, std::move(grads[static_cast<size_t>(id)]));
    } else if (graph.node(id).trainable) {
      result.by_node.emplace(id, Tensor::zeros(graph.value(id).shape()));
    }
  }
  return result;
}

GradCheckReport grad_check(Graph& graph, int loss_node, double step) {
  if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");
  for (int id = 0; id < graph.size(); ++id) {
    const Node& n = graph.node(id);
    if (n.kind != OpKind::branch_scale) continue;
    const Eigen::ArrayXd& f = n.attrs.forward_scale;
    const Eigen::ArrayXd& b = n.attrs.backward_scale;
    if (f.size() != b.size() || (f != b).any())
      throw std::invalid_argument(
          "grad_check: branch_scale node " + std::to_string(id) +
          " has decoupled forward/backward factors; freeze the backward factor first");
  }

  graph.recompute();
  Gradients analytic = backward(graph, loss_node);

  GradCheckReport report;
  double sum_rel = 0.0;
  for (int id : graph.parameters()) {
    Tensor& p = graph.node_mut(id).value;
    const Tensor& a = analytic.at(id);
    for (Eigen::Index i = 0; i < p.numel(); ++i) {
      const Scalar orig = p[i];
      p[i] = orig + step;
      graph.recompute();
      const Scalar lp = graph.value(loss_node).item();
      p[i] = orig - step;
      graph.recompute();
      const Scalar lm = graph.value(loss_node).item();
      p[i] = orig;
      const Scalar fd = (lp - lm) / (2.0 * step);
      const Scalar rel =
          std::abs(a[i] - fd) / std::max({std::abs(a[i]), std::abs(fd), 1e-6});
      report.max_rel_error = std::max(report.max_rel_error, rel);
      sum_rel += rel;
      ++report.entries;
    }
  }
  graph.recompute();
  if (report.entries > 0) report.mean_rel_error = sum_rel / static_cast<double>(report.entries);
  return report;
}

}  // namespace dynreg
