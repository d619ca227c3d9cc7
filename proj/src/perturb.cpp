// Copyright (c) 2026 the dynreg authors
// SPDX-License-Identifier: Apache-2.0
#include "dynreg/perturb.hpp"

#include <stdexcept>
#include <string>

namespace dynreg {

double noise_range(int l, int L) {
  if (L < 1) throw std::invalid_argument("noise_range: total depth L must be >= 1");
  if (l < 1 || l > L)
    throw std::invalid_argument("noise_range: block index " + std::to_string(l) +
                                " outside [1, " + std::to_string(L) + "]");
  return static_cast<double>(l) / static_cast<double>(L);
}

namespace {

Eigen::ArrayXd draw_factors(PerturbUnit& unit, double s, const char* what) {
  if (!unit.training)
    throw std::logic_error(std::string("perturb: ") + what +
                           " sampled in eval mode; fold to the deterministic factor instead");
  if (s < 0.0)
    throw std::invalid_argument(std::string("perturb: ") + what + " strength s must be >= 0");
  const Eigen::Index n = unit.granularity == Granularity::per_sample
                             ? static_cast<Eigen::Index>(unit.num_samples)
                             : 1;
  Eigen::ArrayXd out(n);
  for (Eigen::Index i = 0; i < n; ++i)
    out[i] = unit.amplitude + s * unit.rng.uniform(-unit.noise_range, unit.noise_range);
  return out;
}

}  // namespace

const Eigen::ArrayXd& sample_theta(PerturbUnit& unit, double s) {
  unit.theta = draw_factors(unit, s, "theta");
  return unit.theta;
}

const Eigen::ArrayXd& sample_mu(PerturbUnit& unit, double s) {
  if (unit.theta.size() == 0)
    throw std::logic_error("perturb: mu requested before any theta draw this iteration");
  unit.mu = draw_factors(unit, s, "mu");
  return unit.mu;
}

double fold_inference(const PerturbUnit& unit) {
  // E[theta] = A: the noise is symmetric around zero.
  return unit.amplitude;
}

ScaleHandles res2_forward(Graph& g, int x, int branch_out, const Eigen::ArrayXd& theta,
                          const Eigen::ArrayXd& mu) {
  ScaleHandles h;
  h.scale_node = g.branch_scale(branch_out, theta, mu);
  h.out = g.add(x, h.scale_node);
  return h;
}

Res3Handles res3_forward(Graph& g, int x, int branch1, int branch2,
                         const Eigen::ArrayXd& theta, const Eigen::ArrayXd& mu) {
  Res3Handles h;
  h.scale1 = g.branch_scale(branch1, theta, mu);
  h.scale2 = g.branch_scale(branch2, 1.0 - theta, 1.0 - mu);
  h.out = g.add(g.add(x, h.scale1), h.scale2);
  return h;
}

ScaleHandles dense_forward(Graph& g, int prev, int conv_out, const Eigen::ArrayXd& theta,
                           const Eigen::ArrayXd& mu) {
  ScaleHandles h;
  h.scale_node = g.branch_scale(conv_out, theta, mu);
  h.out = g.concat(prev, h.scale_node);
  return h;
}

void apply_forward_scales(Graph& g, PerturbUnit& unit, double s) {
  const Eigen::ArrayXd& theta = sample_theta(unit, s);
  g.set_branch_forward(unit.scale_node, theta);
  if (unit.complement_node >= 0) g.set_branch_forward(unit.complement_node, 1.0 - theta);
}

void apply_backward_scales(Graph& g, PerturbUnit& unit, double s) {
  const Eigen::ArrayXd& mu = sample_mu(unit, s);
  g.set_branch_backward(unit.scale_node, mu);
  if (unit.complement_node >= 0) g.set_branch_backward(unit.complement_node, 1.0 - mu);
}

void fold_unit(Graph& g, PerturbUnit& unit) {
  const Eigen::ArrayXd folded = Eigen::ArrayXd::Constant(1, fold_inference(unit));
  g.set_branch_forward(unit.scale_node, folded);
  g.set_branch_backward(unit.scale_node, folded);
  if (unit.complement_node >= 0) {
    const Eigen::ArrayXd rest = 1.0 - folded;
    g.set_branch_forward(unit.complement_node, rest);
    g.set_branch_backward(unit.complement_node, rest);
  }
}

ShakeScales shake_shake_scales(Rng& rng) {
  ShakeScales s;
  s.forward = rng.uniform();
  s.backward = rng.uniform();
  return s;
}

double shakedrop_keep_prob(int l, int L, double p_terminal) {
  if (L < 1) throw std::invalid_argument("shakedrop: total depth L must be >= 1");
  if (l < 1 || l > L)
    throw std::invalid_argument("shakedrop: block index " + std::to_string(l) +
                                " outside [1, " + std::to_string(L) + "]");
  if (p_terminal < 0.0 || p_terminal > 1.0)
    throw std::invalid_argument("shakedrop: terminal keep probability must lie in [0, 1]");
  return 1.0 - (static_cast<double>(l) / static_cast<double>(L)) * (1.0 - p_terminal);
}

ShakeDropScales shakedrop_scale(int l, int L, double p_terminal, Rng& rng) {
  const double p_l = shakedrop_keep_prob(l, L, p_terminal);
  ShakeDropScales s;
  s.gate = rng.uniform() < p_l ? 1 : 0;
  const double b = static_cast<double>(s.gate);
  const double alpha = rng.uniform(-1.0, 1.0);
  const double beta = rng.uniform(0.0, 1.0);
  s.forward = b + alpha - b * alpha;
  s.backward = b + beta - b * beta;
  return s;
}

double shakedrop_eval_scale(int l, int L, double p_terminal) {
  // E[b + alpha - b*alpha] = p_l since E[alpha] = 0.
  return shakedrop_keep_prob(l, L, p_terminal);
}

}  // namespace dynreg
