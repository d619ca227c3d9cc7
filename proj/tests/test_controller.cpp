// Copyright (c) 2026 the dynreg authors
// SPDX-License-Identifier: Apache-2.0
//
// Strength controller: Gaussian window values frozen from an independent
// computation, direct-summation filter oracle, hand-simulated update
// sequences and replay identities.

#include <cmath>
#include <deque>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <vector>

#include <doctest.h>

#include "dynreg/controller.hpp"
#include "dynreg/error.hpp"
#include "dynreg/rng.hpp"
#include "support.hpp"

using namespace dynreg;

TEST_CASE("gaussian window: frozen values, symmetry, normalization") {
  const Eigen::ArrayXd w = gaussian_window(4, 0.4);
  REQUIRE(w.size() == 5);
  CHECK(std::abs(w[0] - 0.0219296449) < 1e-9);
  CHECK(std::abs(w[1] - 0.2285121469) < 1e-9);
  CHECK(std::abs(w[2] - 0.4991164165) < 1e-9);
  CHECK(std::abs(w[3] - 0.2285121469) < 1e-9);
  CHECK(std::abs(w[4] - 0.0219296449) < 1e-9);
  CHECK(std::abs(w.sum() - 1.0) < 1e-12);

  const Eigen::ArrayXd w2 = gaussian_window(2, 0.4);
  REQUIRE(w2.size() == 3);
  CHECK(std::abs(w2[0] - 0.0403878933) < 1e-9);
  CHECK(std::abs(w2[1] - 0.9192242135) < 1e-9);

  const Eigen::ArrayXd w6 = gaussian_window(6, 1.0);
  REQUIRE(w6.size() == 7);
  CHECK(std::abs(w6[0] - 0.1062885194) < 1e-9);
  CHECK(std::abs(w6[3] - 0.1752401428) < 1e-9);

  for (int n = 0; n < 7; ++n) CHECK(w6[n] == doctest::Approx(w6[6 - n]));
  CHECK(w6.maxCoeff() == doctest::Approx(w6[3]));

  CHECK_THROWS_AS(gaussian_window(3, 0.4), std::invalid_argument);
  CHECK_THROWS_AS(gaussian_window(0, 0.4), std::invalid_argument);
  CHECK_THROWS_AS(gaussian_window(4, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(gaussian_window(4, -1.0), std::invalid_argument);
}

TEST_CASE("filtered loss matches a direct summation oracle") {
  const Eigen::ArrayXd w = gaussian_window(6, 0.4);
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const int m = 1 + trial % 9;  // covers warm-up (m < 7) and saturation
    std::deque<double> buf;
    for (int i = 0; i < m; ++i) buf.push_back(rng.uniform(-3.0, 3.0));
    double acc = 0.0, wsum = 0.0;
    const int taps = std::min<int>(m, static_cast<int>(w.size()));
    for (int i = 0; i < taps; ++i) {
      acc += w[i] * buf[static_cast<size_t>(i)];
      wsum += w[i];
    }
    CHECK(filtered_loss(buf, w) == doctest::Approx(acc / wsum).epsilon(1e-12));
  }
}

TEST_CASE("filtered loss warm-up: frozen truncation value and invariances") {
  const Eigen::ArrayXd w = gaussian_window(4, 0.4);
  // Two-entry buffer, newest first: truncate to [w0, w1], renormalize.
  std::deque<double> buf{2.0, 1.0};
  CHECK(filtered_loss(buf, w) == doctest::Approx(1.087563839523).epsilon(1e-10));

  // A constant history filters to the constant at every warm-up length.
  for (int m = 1; m <= 5; ++m) {
    std::deque<double> c(static_cast<size_t>(m), 3.7);
    CHECK(filtered_loss(c, w) == doctest::Approx(3.7).epsilon(1e-12));
  }

  // Translation: filtering commutes with adding a constant.
  std::deque<double> base{0.3, -1.2, 2.2, 0.9};
  std::deque<double> shifted = base;
  for (double& v : shifted) v += 5.0;
  CHECK(filtered_loss(shifted, w) == doctest::Approx(filtered_loss(base, w) + 5.0));

  const std::deque<double> empty;
  CHECK_THROWS_AS(filtered_loss(empty, w), std::invalid_argument);
}

TEST_CASE("controller hand simulation with the identity window") {
  ControllerState st = make_controller(0.1, 1, 0.4);
  REQUIRE(st.window.size() == 1);
  CHECK(st.window[0] == doctest::Approx(1.0));

  ControllerUpdate u1 = controller_step(st, 1.0);
  CHECK(u1.accepted);
  CHECK(!u1.grad_diff.has_value());  // priming step
  CHECK(u1.s_after == doctest::Approx(0.0));

  ControllerUpdate u2 = controller_step(st, 0.9);
  REQUIRE(u2.grad_diff.has_value());
  CHECK(*u2.grad_diff == doctest::Approx(-0.1));
  CHECK(u2.s_after == doctest::Approx(0.1));

  ControllerUpdate u3 = controller_step(st, 0.8);
  CHECK(u3.s_after == doctest::Approx(0.2));
  CHECK(st.s == doctest::Approx(0.2));
  CHECK(st.iteration == 3);

  // A rise moves s down; the floor is 0.
  ControllerUpdate u4 = controller_step(st, 5.0);
  CHECK(u4.s_after == doctest::Approx(0.1));
  controller_step(st, 6.0);
  ControllerUpdate u6 = controller_step(st, 7.0);
  CHECK(u6.s_after == doctest::Approx(0.0));
  ControllerUpdate u7 = controller_step(st, 8.0);
  CHECK(u7.s_after == doctest::Approx(0.0));  // clamped, never negative
}

TEST_CASE("controller: zero difference counts as non-increasing") {
  ControllerState st = make_controller(0.25, 1, 0.4);
  controller_step(st, 1.0);
  ControllerUpdate u = controller_step(st, 1.0);
  REQUIRE(u.grad_diff.has_value());
  CHECK(*u.grad_diff == doctest::Approx(0.0));
  CHECK(u.s_after == doctest::Approx(0.25));
}

TEST_CASE("controller default increment moves s by 3e-4") {
  ControllerState st = make_controller(3e-4, 1, 0.4, 0.5);
  controller_step(st, 2.0);
  ControllerUpdate u = controller_step(st, 1.0);
  CHECK(u.s_after == doctest::Approx(0.5003));
}

TEST_CASE("controller ignores a non-finite loss without moving state") {
  ControllerState st = make_controller(0.1, 5, 0.4, 0.3);
  controller_step(st, 1.0);
  controller_step(st, 0.9);
  const double s_before = st.s;
  const size_t buf_before = st.buffer.size();
  const long it_before = st.iteration;

  ControllerUpdate bad = controller_step(st, std::nan(""));
  CHECK(!bad.accepted);
  CHECK(st.s == s_before);
  CHECK(st.buffer.size() == buf_before);
  CHECK(st.iteration == it_before);

  ControllerUpdate inf = controller_step(st, std::numeric_limits<double>::infinity());
  CHECK(!inf.accepted);
  CHECK(st.s == s_before);
}

TEST_CASE("controller constructor validation") {
  CHECK_NOTHROW(make_controller(3e-4, 1, 0.4));
  CHECK_NOTHROW(make_controller(3e-4, 501, 0.4));
  CHECK_THROWS_AS(make_controller(3e-4, 2, 0.4), std::invalid_argument);  // even > 1
  CHECK_THROWS_AS(make_controller(3e-4, 0, 0.4), std::invalid_argument);
  CHECK_THROWS_AS(make_controller(3e-4, -3, 0.4), std::invalid_argument);
  CHECK_THROWS_AS(make_controller(-1e-4, 5, 0.4), std::invalid_argument);
  CHECK_THROWS_AS(make_controller(3e-4, 5, 0.4, -0.1), std::invalid_argument);
  CHECK(make_controller(3e-4, 7, 0.4).window.size() == 7);
}

TEST_CASE("buffer never outgrows the window") {
  ControllerState st = make_controller(0.01, 5, 0.4);
  for (int i = 0; i < 20; ++i) controller_step(st, 1.0 + i);
  CHECK(st.buffer.size() == 5);
  CHECK(st.buffer.front() == doctest::Approx(20.0));  // newest first
  CHECK(st.buffer.back() == doctest::Approx(16.0));
}

TEST_CASE("replay: strictly decreasing trace accumulates every increment") {
  std::vector<double> losses(1000);
  for (int i = 0; i < 1000; ++i) losses[static_cast<size_t>(i)] = 10.0 - 0.005 * i;
  const ControllerState proto = make_controller(3e-4, 501, 0.4);
  const std::vector<double> s = replay_trace(losses, proto);
  REQUIRE(s.size() == 1000);
  CHECK(s[0] == doctest::Approx(0.0));
  // 999 updates, each a decrease: s = 999 * 3e-4 = 0.2997 exactly.
  CHECK(s.back() == doctest::Approx(0.2997).epsilon(1e-12));
  for (size_t i = 1; i < s.size(); ++i) CHECK(s[i] >= s[i - 1]);
}

TEST_CASE("replay: sign-counting identity with the identity window") {
  Rng rng(424242);
  std::vector<double> losses;
  for (int i = 0; i < 400; ++i) losses.push_back(rng.uniform(0.0, 2.0));
  const double ds = 0.001, s0 = 10.0;  // s0 large enough to never clamp
  const ControllerState proto = make_controller(ds, 1, 0.4, s0);
  const std::vector<double> s = replay_trace(losses, proto);

  double expected = s0;
  for (size_t i = 1; i < losses.size(); ++i)
    expected += (losses[i] - losses[i - 1] <= 0.0) ? ds : -ds;
  CHECK(s.back() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("replay is invariant under a constant loss shift") {
  Rng rng(77);
  std::vector<double> losses, shifted;
  for (int i = 0; i < 300; ++i) {
    const double v = rng.uniform(0.0, 1.0);
    losses.push_back(v);
    shifted.push_back(v + 9.0);
  }
  const ControllerState proto = make_controller(2e-3, 21, 0.4, 0.05);
  const std::vector<double> a = replay_trace(losses, proto);
  const std::vector<double> b = replay_trace(shifted, proto);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("replay flags a non-finite loss in the trace") {
  const ControllerState proto = make_controller(1e-3, 1, 0.4);
  CHECK_THROWS_AS(replay_trace({1.0, std::nan(""), 0.5}, proto), NumericError);
}

TEST_CASE("replay file round trip") {
  testsup::TempDir tmp("replay");
  const std::string trace = tmp.file("trace.txt");
  const std::string out = tmp.file("s.txt");
  testsup::write_text(trace, "1.0\n0.9\n\n0.8\n  0.85 \n");

  const ControllerState proto = make_controller(0.1, 1, 0.4);
  replay_trace_file(trace, out, proto);

  const std::vector<double> expect = replay_trace({1.0, 0.9, 0.8, 0.85}, proto);
  std::istringstream is(testsup::read_text(out));
  std::vector<double> got;
  double v;
  while (is >> v) got.push_back(v);
  REQUIRE(got.size() == expect.size());
  for (size_t i = 0; i < got.size(); ++i)
    CHECK(got[i] == doctest::Approx(expect[i]).epsilon(1e-10));

  testsup::write_text(trace, "1.0\npotato\n");
  CHECK_THROWS_AS(replay_trace_file(trace, out, proto), ConfigError);
  CHECK_THROWS_AS(replay_trace_file(tmp.file("missing.txt"), out, proto), IoError);
}

TEST_CASE("schedule grammar: parse, render, validate") {
  CHECK(ScheduleSpec::parse("dynamic").kind == ScheduleKind::dynamic_s);
  CHECK(ScheduleSpec::parse("none").kind == ScheduleKind::none);

  ScheduleSpec f = ScheduleSpec::parse("fix:0.5");
  CHECK(f.kind == ScheduleKind::fixed_s);
  CHECK(f.target == doctest::Approx(0.5));
  CHECK(ScheduleSpec::parse("fixed:0.25").target == doctest::Approx(0.25));

  ScheduleSpec l = ScheduleSpec::parse("linear:2");
  CHECK(l.kind == ScheduleKind::linear_s);
  CHECK(l.target == doctest::Approx(2.0));

  CHECK(ScheduleSpec::parse("dynamic").str() == "dynamic");
  CHECK(ScheduleSpec::parse("none").str() == "none");
  CHECK(ScheduleSpec::parse(ScheduleSpec::parse("fix:0.5").str()).target ==
        doctest::Approx(0.5));

  CHECK_THROWS_AS(ScheduleSpec::parse(""), ConfigError);
  CHECK_THROWS_AS(ScheduleSpec::parse("linear"), ConfigError);
  CHECK_THROWS_AS(ScheduleSpec::parse("fix:"), ConfigError);
  CHECK_THROWS_AS(ScheduleSpec::parse("fix:-1"), ConfigError);
  CHECK_THROWS_AS(ScheduleSpec::parse("linear:-2"), ConfigError);
  CHECK_THROWS_AS(ScheduleSpec::parse("quadratic:1"), ConfigError);
  CHECK_THROWS_AS(ScheduleSpec::parse("fix:1x"), ConfigError);
}

TEST_CASE("schedule values over a run") {
  ControllerState st = make_controller(0.1, 1, 0.4, 0.42);

  ScheduleSpec dyn;  // dynamic by default
  CHECK(schedule_value(dyn, st, 5) == doctest::Approx(0.42));

  ScheduleSpec none = ScheduleSpec::parse("none");
  CHECK(schedule_value(none, st, 5) == doctest::Approx(0.0));

  ScheduleSpec fix = ScheduleSpec::parse("fix:1.5");
  CHECK(schedule_value(fix, st, 0) == doctest::Approx(1.5));
  CHECK(schedule_value(fix, st, 999) == doctest::Approx(1.5));

  ScheduleSpec lin = ScheduleSpec::parse("linear:2");
  lin.total_iterations = 10;
  CHECK(schedule_value(lin, st, 0) == doctest::Approx(0.0));
  CHECK(schedule_value(lin, st, 5) == doctest::Approx(1.0));
  CHECK(schedule_value(lin, st, 10) == doctest::Approx(2.0));
  CHECK_THROWS_AS(schedule_value(lin, st, 11), std::invalid_argument);
  CHECK_THROWS_AS(schedule_value(lin, st, -1), std::invalid_argument);
  ScheduleSpec lin0 = ScheduleSpec::parse("linear:2");
  CHECK_THROWS_AS(schedule_value(lin0, st, 0), std::invalid_argument);  // no ramp length
}

TEST_CASE("warm-up keeps filtered differences negative on decreasing traces") {
  // The filtered mean of a strictly decreasing history must itself strictly
  // decrease even while the window is still truncated.
  const ControllerState proto = make_controller(1e-3, 9, 0.4);
  std::deque<double> buf;
  double prev = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 15; ++i) {
    buf.push_front(5.0 - 0.3 * i);
    const double f = filtered_loss(buf, proto.window);
    CHECK(f < prev);
    prev = f;
  }
}
