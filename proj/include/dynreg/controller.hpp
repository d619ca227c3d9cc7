// Copyright (c) 2026 the dynreg authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <deque>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace dynreg {

// Online strength controller. Each training iteration feeds the raw loss;
// the controller low-pass filters the loss history with a Gaussian window
// and moves s by +delta_s when the filtered backward difference is <= 0
// and by -delta_s otherwise, clamping at 0.

// Gaussian window of length N+1 (N even, >= 2): w[n] proportional to
// exp(-((n - N/2)^2) / (2 (sigma N / 2)^2)), renormalized to sum exactly 1.
// Index n counts backwards in time: w[0] weights the newest loss.
Eigen::ArrayXd gaussian_window(int N, double sigma);

// Weighted history average. `buffer` holds losses newest-first and may be
// shorter than the window during warm-up; the window is then truncated to
// the available history and renormalized.
double filtered_loss(const std::deque<double>& buffer, const Eigen::ArrayXd& window);

struct ControllerState {
  double s = 0.0;
  double delta_s = 3e-4;
  double sigma = 0.4;
  Eigen::ArrayXd window;           // normalized weights, newest-first
  std::deque<double> buffer;       // at most window.size() losses, newest-first
  std::optional<double> prev_filtered;
  long iteration = 0;              // completed controller steps
};

// window length = filter_length taps; filter_length == 1 selects the
// degenerate identity window, otherwise filter_length must be odd so that
// N = filter_length - 1 is even.
ControllerState make_controller(double delta_s, int filter_length, double sigma,
                                double s0 = 0.0);

struct ControllerUpdate {
  bool accepted = true;            // false: non-finite loss, state untouched
  double filtered = 0.0;
  std::optional<double> grad_diff; // empty on the very first step
  double s_after = 0.0;
};

// Ingest one loss and update s. The first call only primes the filter; the
// first s update happens on the second call. A non-finite loss is flagged
// and leaves the state unchanged.
ControllerUpdate controller_step(ControllerState& state, double loss);

enum class ScheduleKind { dynamic_s, fixed_s, linear_s, none };

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::dynamic_s;
  double target = 0.0;          // fixed: the constant; linear: the endpoint
  long total_iterations = 0;    // linear ramp length

  // Grammar: "dynamic" | "none" | "fix:<x>" | "fixed:<x>" | "linear:<x>".
  static ScheduleSpec parse(const std::string& text);
  std::string str() const;
};

// Strength for the given iteration: the controller's live s for dynamic,
// the constant for fixed, target * iteration / total_iterations for linear
// (0 <= iteration <= total_iterations), and 0 for none.
double schedule_value(const ScheduleSpec& spec, const ControllerState& state,
                      long iteration);

// Feed a recorded loss trace through a fresh copy of `proto` and return the
// s value after each step. Pure in (losses, proto).
std::vector<double> replay_trace(const std::vector<double>& losses,
                                 const ControllerState& proto);

// File variant: one loss per line in, one s per line out.
void replay_trace_file(const std::string& trace_path, const std::string& out_path,
                       const ControllerState& proto);

}  // namespace dynreg
