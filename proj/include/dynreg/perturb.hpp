// Copyright (c) 2026 the dynreg authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "dynreg/graph.hpp"
#include "dynreg/rng.hpp"

namespace dynreg {

enum class Granularity { per_batch, per_sample };

// One multiplicative perturbation site. The forward factor is
// theta = amplitude + s * r with r ~ Uniform[-noise_range, noise_range];
// the backward pass uses an independent draw mu from the same law. Each
// unit owns its own RNG stream so sampling order across units never
// matters. Folding for inference replaces the factor by its expectation,
// which is exactly `amplitude`.
struct PerturbUnit {
  double amplitude = 0.5;      // A
  double noise_range = 1.0;    // R_l
  int block_index = 1;         // l, 1-based
  Granularity granularity = Granularity::per_batch;
  int num_samples = 1;         // batch size used by per_sample draws
  Eigen::ArrayXd theta;        // last forward factors (size 1 or batch)
  Eigen::ArrayXd mu;           // last backward factors
  Rng rng;
  bool training = true;

  // Graph wiring: the branch_scale node carrying theta/mu, and for
  // three-branch blocks the complementary node carrying 1-theta/1-mu.
  int scale_node = -1;
  int complement_node = -1;
};

// Depth-proportional noise range R_l = l / L for 1 <= l <= L.
double noise_range(int l, int L);

// Draw fresh factors with the current strength s >= 0 (train mode only).
const Eigen::ArrayXd& sample_theta(PerturbUnit& unit, double s);
const Eigen::ArrayXd& sample_mu(PerturbUnit& unit, double s);

// Deterministic factor used at inference.
double fold_inference(const PerturbUnit& unit);

// Two-branch residual combine: x + theta * branch. The identity path
// gradient is unscaled; the branch gradient is scaled by mu.
struct ScaleHandles {
  int scale_node = -1;
  int out = -1;
};
ScaleHandles res2_forward(Graph& g, int x, int branch_out,
                          const Eigen::ArrayXd& theta, const Eigen::ArrayXd& mu);

// Three-branch combine: x + theta * b1 + (1 - theta) * b2, with backward
// factors mu and 1 - mu on the respective branches.
struct Res3Handles {
  int scale1 = -1;
  int scale2 = -1;
  int out = -1;
};
Res3Handles res3_forward(Graph& g, int x, int branch1, int branch2,
                         const Eigen::ArrayXd& theta, const Eigen::ArrayXd& mu);

// Densely connected combine: concat(prev, theta * conv_out) on the channel
// axis. Only the new-feature gradient is scaled (by mu).
ScaleHandles dense_forward(Graph& g, int prev, int conv_out,
                           const Eigen::ArrayXd& theta, const Eigen::ArrayXd& mu);

// Sample theta for the unit and install it on the wired nodes (and the
// complement node when present). apply_backward_scales does the same for mu.
void apply_forward_scales(Graph& g, PerturbUnit& unit, double s);
void apply_backward_scales(Graph& g, PerturbUnit& unit, double s);

// Install the folded deterministic factor on the wired nodes (eval mode).
void fold_unit(Graph& g, PerturbUnit& unit);

// Shake-style baselines. Forward and backward factors are decoupled and
// independently drawn; evaluation uses the expectation of the forward law.
struct ShakeScales {
  double forward = 0.5;   // alpha ~ U[0,1]
  double backward = 0.5;  // beta  ~ U[0,1]
};
ShakeScales shake_shake_scales(Rng& rng);

// Gated shake factor: gate b ~ Bernoulli(p_l) with the depth-decaying keep
// probability p_l = 1 - (l/L) (1 - p_terminal); forward factor
// b + alpha - b*alpha with alpha ~ U[-1,1]; backward replaces alpha by
// beta ~ U[0,1] while keeping the same gate.
struct ShakeDropScales {
  double forward = 1.0;
  double backward = 1.0;
  int gate = 1;
};
double shakedrop_keep_prob(int l, int L, double p_terminal);
ShakeDropScales shakedrop_scale(int l, int L, double p_terminal, Rng& rng);
double shakedrop_eval_scale(int l, int L, double p_terminal);

}  // namespace dynreg
