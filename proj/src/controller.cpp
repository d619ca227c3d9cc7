// Copyright (c) 2026 the dynreg authors
// SPDX-License-Identifier: Apache-2.0
#include "dynreg/controller.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "dynreg/error.hpp"

namespace dynreg {

Eigen::ArrayXd gaussian_window(int N, double sigma) {
  if (N < 2 || N % 2 != 0)
    throw std::invalid_argument("gaussian_window: N must be even and >= 2, got " +
                                std::to_string(N));
  if (!(sigma > 0.0))
    throw std::invalid_argument("gaussian_window: sigma must be positive");
  const double center = static_cast<double>(N) / 2.0;
  const double width = sigma * center;
  Eigen::ArrayXd w(N + 1);
  for (int n = 0; n <= N; ++n) {
    const double z = (static_cast<double>(n) - center) / width;
    w[n] = std::exp(-0.5 * z * z);
  }
  // The density prefactor cancels under renormalization; the weights sum
  // to exactly 1 so that filtering constants is the identity.
  return w / w.sum();
}

double filtered_loss(const std::deque<double>& buffer, const Eigen::ArrayXd& window) {
  if (buffer.empty()) throw std::invalid_argument("filtered_loss: empty history");
  if (window.size() == 0) throw std::invalid_argument("filtered_loss: empty window");
  const size_t m = std::min(buffer.size(), static_cast<size_t>(window.size()));
  double acc = 0.0, wsum = 0.0;
  for (size_t n = 0; n < m; ++n) {
    acc += window[static_cast<Eigen::Index>(n)] * buffer[n];
    wsum += window[static_cast<Eigen::Index>(n)];
  }
  return acc / wsum;
}

ControllerState make_controller(double delta_s, int filter_length, double sigma, double s0) {
  if (delta_s < 0.0) throw std::invalid_argument("controller: delta_s must be >= 0");
  if (s0 < 0.0) throw std::invalid_argument("controller: s0 must be >= 0");
  if (filter_length < 1)
    throw std::invalid_argument("controller: filter_length must be >= 1");
  ControllerState st;
  st.s = s0;
  st.delta_s = delta_s;
  st.sigma = sigma;
  if (filter_length == 1) {
    st.window = Eigen::ArrayXd::Ones(1);  // degenerate identity window
  } else {
    if (filter_length % 2 == 0)
      throw std::invalid_argument(
          "controller: filter_length must be odd (a Gaussian window has an even tap "
          "count N plus its center), got " + std::to_string(filter_length));
    st.window = gaussian_window(filter_length - 1, sigma);
  }
  return st;
}

ControllerUpdate controller_step(ControllerState& state, double loss) {
  ControllerUpdate upd;
  if (!std::isfinite(loss)) {
    upd.accepted = false;
    upd.filtered = state.prev_filtered.value_or(0.0);
    upd.s_after = state.s;
    return upd;
  }
  state.buffer.push_front(loss);
  while (state.buffer.size() > static_cast<size_t>(state.window.size()))
    state.buffer.pop_back();
  upd.filtered = filtered_loss(state.buffer, state.window);
  if (state.prev_filtered.has_value()) {
    const double diff = upd.filtered - *state.prev_filtered;
    upd.grad_diff = diff;
    // Non-positive filtered slope: the loss is still falling, push harder.
    state.s = diff <= 0.0 ? state.s + state.delta_s
                          : std::max(0.0, state.s - state.delta_s);
  }
  state.prev_filtered = upd.filtered;
  state.iteration += 1;
  upd.s_after = state.s;
  return upd;
}

ScheduleSpec ScheduleSpec::parse(const std::string& text) {
  ScheduleSpec spec;
  if (text == "dynamic") {
    spec.kind = ScheduleKind::dynamic_s;
    return spec;
  }
  if (text == "none") {
    spec.kind = ScheduleKind::none;
    return spec;
  }
  const auto colon = text.find(':');
  if (colon != std::string::npos) {
    const std::string head = text.substr(0, colon);
    const std::string arg = text.substr(colon + 1);
    try {
      size_t used = 0;
      const double v = std::stod(arg, &used);
      if (used != arg.size()) throw std::invalid_argument(arg);
      if (head == "fix" || head == "fixed") {
        if (v < 0.0) throw ConfigError("schedule: fixed strength must be >= 0 in '" + text + "'");
        spec.kind = ScheduleKind::fixed_s;
        spec.target = v;
        return spec;
      }
      if (head == "linear") {
        if (v < 0.0) throw ConfigError("schedule: linear endpoint must be >= 0 in '" + text + "'");
        spec.kind = ScheduleKind::linear_s;
        spec.target = v;
        return spec;
      }
    } catch (const std::logic_error&) {
      throw ConfigError("schedule: bad numeric argument in '" + text + "'");
    }
  }
  throw ConfigError("schedule: expected dynamic | none | fix:<x> | linear:<x>, got '" +
                    text + "'");
}

std::string ScheduleSpec::str() const {
  std::ostringstream os;
  switch (kind) {
    case ScheduleKind::dynamic_s: return "dynamic";
    case ScheduleKind::none: return "none";
    case ScheduleKind::fixed_s:
      os << "fix:" << target;
      return os.str();
    case ScheduleKind::linear_s:
      os << "linear:" << target;
      return os.str();
  }
  throw std::invalid_argument("schedule: unknown kind");
}

double schedule_value(const ScheduleSpec& spec, const ControllerState& state, long iteration) {
  switch (spec.kind) {
    case ScheduleKind::dynamic_s:
      return state.s;
    case ScheduleKind::fixed_s:
      return spec.target;
    case ScheduleKind::linear_s: {
      if (spec.total_iterations <= 0)
        throw std::invalid_argument("schedule: linear ramp needs total_iterations > 0");
      if (iteration < 0 || iteration > spec.total_iterations)
        throw std::invalid_argument("schedule: iteration " + std::to_string(iteration) +
                                    " outside [0, " + std::to_string(spec.total_iterations) +
                                    "]");
      return spec.target * static_cast<double>(iteration) /
             static_cast<double>(spec.total_iterations);
    }
    case ScheduleKind::none:
      return 0.0;
  }
  throw std::invalid_argument("schedule: unknown kind");
}

std::vector<double> replay_trace(const std::vector<double>& losses,
                                 const ControllerState& proto) {
  ControllerState state = proto;
  state.buffer.clear();
  state.prev_filtered.reset();
  state.iteration = 0;
  std::vector<double> out;
  out.reserve(losses.size());
  for (double loss : losses) {
    const ControllerUpdate upd = controller_step(state, loss);
    if (!upd.accepted)
      throw NumericError("replay: non-finite loss at line " + std::to_string(out.size() + 1));
    out.push_back(upd.s_after);
  }
  return out;
}

void replay_trace_file(const std::string& trace_path, const std::string& out_path,
                       const ControllerState& proto) {
  std::ifstream in(trace_path);
  if (!in) throw IoError("replay: cannot open trace file '" + trace_path + "'");
  std::vector<double> losses;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    // Trim whitespace; skip blank lines.
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    const std::string tok = line.substr(b, e - b + 1);
    try {
      size_t used = 0;
      const double v = std::stod(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      losses.push_back(v);
    } catch (const std::logic_error&) {
      throw ConfigError("replay: line " + std::to_string(lineno) + " of '" + trace_path +
                        "' is not a number: '" + tok + "'");
    }
  }
  const std::vector<double> s = replay_trace(losses, proto);
  std::ofstream out(out_path);
  if (!out) throw IoError("replay: cannot open output file '" + out_path + "'");
  out.precision(12);
  for (double v : s) out << v << "\n";
  if (!out) throw IoError("replay: write failed for '" + out_path + "'");
}

}  // namespace dynreg
