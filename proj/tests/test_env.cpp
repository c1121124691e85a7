#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dcqfa/env.hpp"

using namespace dcqfa;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

void dump(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST(PushBox, ZeroActionLeavesStateUnchanged) {
  const PushBoxParams p;
  Rng rng(1);
  const PushBoxState s = reset(p, rng);
  PushBoxState n = step(p, s, {0.0f, 0.0f});
  EXPECT_EQ(n.agent, s.agent);
  EXPECT_EQ(n.box, s.box);
  EXPECT_EQ(n.goal, s.goal);
  EXPECT_EQ(n.step, s.step + 1);
}

TEST(PushBox, FreeMotionMovesOnlyTheAgent) {
  const PushBoxParams p;
  PushBoxState s{{0.3, 0.3}, {0.7, 0.7}, {0.5, 0.8}, 0};
  const PushBoxState n = step(p, s, {0.5f, -0.25f});
  EXPECT_NEAR(n.agent.x, 0.3 + 0.05 * 0.5, 1e-12);
  EXPECT_NEAR(n.agent.y, 0.3 - 0.05 * 0.25, 1e-12);
  EXPECT_EQ(n.box, s.box);
  // Actions saturate at unit magnitude per axis.
  EXPECT_NEAR(step(p, s, {4.0f, 0.0f}).agent.x, 0.35, 1e-12);
}

TEST(PushBox, StraightPushClosesOnGoal) {
  const PushBoxParams p;
  PushBoxState s{{0.17, 0.5}, {0.3, 0.5}, {0.7, 0.5}, 0};
  double prev = (s.box - s.goal).norm();
  bool reached = false;
  for (int k = 0; k < 100 && !reached; ++k) {
    s = step(p, s, {1.0f, 0.0f});
    const double d = (s.box - s.goal).norm();
    EXPECT_LE(d, prev + 1e-12);
    EXPECT_NEAR(s.box.y, 0.5, 1e-12);
    prev = d;
    reached = is_success(p, s);
  }
  EXPECT_TRUE(reached);
}

TEST(PushBox, ExpertIsIdleAtGoal) {
  const PushBoxParams p;
  const PushBoxState s{{0.2, 0.2}, {0.6, 0.6}, {0.6, 0.6}, 0};
  const Action a = scripted_expert(p, s);
  EXPECT_LT(std::hypot(a[0], a[1]), 1e-6);
}

TEST(PushBox, ExpertClearsSuccessBar) {
  const PushBoxParams p;
  const PushPolicy expert = [&](const Observation& o) { return scripted_expert(p, state_from_observation(o)); };
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) wins += rollout(expert, p, p.max_steps, seed).success ? 1 : 0;
  EXPECT_GE(wins, 190);
  // Demos with clean execution report the same statistics as rollouts.
  int demo_wins = 0;
  for (const auto& t : generate_demos(p, 200, 5)) demo_wins += t.success ? 1 : 0;
  EXPECT_GE(demo_wins, 190);
}

TEST(PushBox, StateStaysPhysical) {
  const PushBoxParams p;
  Rng rng(3);
  PushBoxState s = reset(p, rng);
  const double contact = p.agent_radius + p.box_radius;
  for (int k = 0; k < 20000; ++k) {
    // Biased random walk toward the box so contacts are frequent.
    const Vec2 to_box = s.box - s.agent;
    const Action a{static_cast<float>(std::clamp(3.0 * to_box.x + 0.6 * rng.normal(), -1.0, 1.0)),
                   static_cast<float>(std::clamp(3.0 * to_box.y + 0.6 * rng.normal(), -1.0, 1.0))};
    s = step(p, s, a);
    ASSERT_GE(s.box.x, p.box_radius - 1e-12);
    ASSERT_LE(s.box.x, 1.0 - p.box_radius + 1e-12);
    ASSERT_GE(s.box.y, p.box_radius - 1e-12);
    ASSERT_LE(s.box.y, 1.0 - p.box_radius + 1e-12);
    ASSERT_GE(s.agent.x, 0.0);
    ASSERT_LE(s.agent.x, 1.0);
    ASSERT_GE((s.box - s.agent).norm(), contact - std::sqrt(2.0) * p.dt - 1e-12);
    if (k % 500 == 0) s = reset(p, rng);
  }
}

TEST(PushBox, DemosAreReproducible) {
  const PushBoxParams p;
  const auto a = generate_demos(p, 50, 42, 0.3);
  const auto b = generate_demos(p, 50, 42, 0.3);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, generate_demos(p, 50, 43, 0.3));
  for (const auto& t : a) {
    EXPECT_GE(t.length(), 1u);
    EXPECT_EQ(t.actions.size(), t.length() * 2);
  }
}

TEST(PushBox, DemoFileRoundTrip) {
  const PushBoxParams p;
  const auto demos = generate_demos(p, 7, 9, 0.3);
  const std::string path = temp_path("dcqfa_demos_roundtrip.bin");
  write_demos(demos, path);
  EXPECT_EQ(read_demos(path), demos);

  const std::vector<char> bytes = slurp(path);
  std::vector<char> bad = bytes;
  bad[0] = 'X';
  dump(path, bad);
  EXPECT_THROW(read_demos(path), UserError);
  dump(path, std::vector<char>(bytes.begin(), bytes.end() - 3));
  EXPECT_THROW(read_demos(path), UserError);
  std::vector<char> trailing = bytes;
  trailing.push_back('\0');
  dump(path, trailing);
  EXPECT_THROW(read_demos(path), UserError);
  std::filesystem::remove(path);
  EXPECT_THROW(read_demos(path), UserError);
}

TEST(PushBox, RolloutBasics) {
  const PushBoxParams p;
  const PushPolicy still = [](const Observation&) { return Action{0.1f, -0.2f}; };
  const Trajectory one = rollout(still, p, 1, 7);
  EXPECT_EQ(one.length(), 1u);
  EXPECT_EQ(one.actions, (std::vector<float>{0.1f, -0.2f}));
  EXPECT_EQ(rollout(still, p, 50, 7), rollout(still, p, 50, 7));
  EXPECT_THROW(rollout(still, p, 0, 7), UserError);
  const PushPolicy broken = [](const Observation&) { return Action{NAN, 0.0f}; };
  EXPECT_THROW(rollout(broken, p, 5, 7), NumericError);
}

TEST(LinearSystemGap, IdenticalPoliciesHaveNoGap) {
  const LinearSystem sys = LinearSystem::make(Mat(2, 2, {1.1, 0.2, 0.0, 0.9}), Mat(2, 1, {1.0, 0.5}), Mat(1, 2, {0.8, 0.3}));
  const LinearPolicy teacher = [&](const std::vector<double>& x) { return sys.teacher_action(x); };
  EXPECT_EQ(accumulation_gap(sys, teacher, teacher, {1.0, -1.0}, 50), 0.0);
}

TEST(LinearSystemGap, ConstantErrorTelescopes) {
  // x_{t+1} = x_t + a_t; the integrator itself is not stable under G = 0, so built directly.
  const LinearSystem sys{Mat(1, 1, {1.0}), Mat(1, 1, {1.0}), Mat(1, 1, {0.0})};
  const double eps = 0.01;
  const LinearPolicy teacher = [&](const std::vector<double>& x) { return sys.teacher_action(x); };
  const LinearPolicy student = [&](const std::vector<double>& x) { return std::vector<double>{sys.teacher_action(x)[0] + eps}; };
  for (std::size_t T : {1, 10, 37}) EXPECT_NEAR(accumulation_gap(sys, teacher, student, {0.3}, T), T * eps, 1e-12);
  EXPECT_THROW(LinearSystem::make(Mat(1, 1, {1.0}), Mat(1, 1, {1.0}), Mat(1, 1, {0.0})), UserError);
}

TEST(LinearSystemGap, MatchesStepByStepSimulation) {
  Rng rng(11);
  const Mat A(3, 3, {1.05, 0.1, 0.0, -0.1, 0.95, 0.2, 0.0, 0.1, 0.9});
  const Mat B(3, 2, {1.0, 0.0, 0.0, 1.0, 0.5, 0.5});
  const Mat G(2, 3, {0.6, 0.1, 0.1, -0.1, 0.5, 0.4});
  const LinearSystem sys = LinearSystem::make(A, B, G);
  Mat W = G;
  for (double& v : W.v) v += 0.1 * rng.normal();
  auto q = [](double v) { return std::nearbyint(v / 0.05) * 0.05; };
  const LinearPolicy teacher = [&](const std::vector<double>& x) { return sys.teacher_action(x); };
  const LinearPolicy student = [&](const std::vector<double>& x) {
    std::vector<double> a(2, 0.0);
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t j = 0; j < 3; ++j) a[i] -= q(W(i, j)) * q(x[j]);
    }
    return a;
  };
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> x0{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    double xt[3] = {x0[0], x0[1], x0[2]}, xs[3] = {x0[0], x0[1], x0[2]};
    for (int t = 0; t < 40; ++t) {
      double at[2] = {0, 0}, as[2] = {0, 0};
      for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 3; ++j) {
          at[i] -= G(i, j) * xt[j];
          as[i] -= q(W(i, j)) * q(xs[j]);
        }
      }
      double nt[3], ns[3];
      for (int i = 0; i < 3; ++i) {
        nt[i] = ns[i] = 0.0;
        for (int j = 0; j < 3; ++j) {
          nt[i] += A(i, j) * xt[j];
          ns[i] += A(i, j) * xs[j];
        }
        for (int j = 0; j < 2; ++j) {
          nt[i] += B(i, j) * at[j];
          ns[i] += B(i, j) * as[j];
        }
      }
      std::copy(nt, nt + 3, xt);
      std::copy(ns, ns + 3, xs);
    }
    const double want = std::sqrt((xs[0] - xt[0]) * (xs[0] - xt[0]) + (xs[1] - xt[1]) * (xs[1] - xt[1]) +
                                  (xs[2] - xt[2]) * (xs[2] - xt[2]));
    EXPECT_NEAR(accumulation_gap(sys, teacher, student, x0, 40), want, 1e-9 * std::max(1.0, want));
  }
}

TEST(LinearSystemGap, DivergenceIsInfinite) {
  const LinearSystem sys = LinearSystem::make(Mat(1, 1, {1.5}), Mat(1, 1, {1.0}), Mat(1, 1, {1.0}));
  const LinearPolicy teacher = [&](const std::vector<double>& x) { return sys.teacher_action(x); };
  const LinearPolicy lazy = [](const std::vector<double>&) { return std::vector<double>{0.0}; };
  EXPECT_TRUE(std::isinf(accumulation_gap(sys, teacher, lazy, {1.0}, 200)));
}

TEST(LinearSystemGap, StableTeacherStaysBounded) {
  const LinearSystem sys = LinearSystem::make(Mat(2, 2, {1.2, 0.5, -0.3, 1.1}), Mat(2, 2, {1.0, 0.0, 0.0, 1.0}),
                                              Mat(2, 2, {0.5, 0.5, -0.3, 0.4}));
  EXPECT_LT(spectral_radius(sys.closed_loop()), 1.0);
  std::vector<double> x{3.0, -2.0};
  double peak = 0.0;
  for (int t = 0; t < 1000; ++t) {
    x = sys.step(x, sys.teacher_action(x));
    peak = std::max(peak, vec_norm(x));
  }
  EXPECT_LT(peak, 100.0);
  EXPECT_LT(vec_norm(x), 1e-6);
}

TEST(LinearSystemGap, SpectralRadiusOfRotation) {
  const double c = 0.9 * std::cos(0.7), s = 0.9 * std::sin(0.7);
  EXPECT_NEAR(spectral_radius(Mat(2, 2, {c, -s, s, c})), 0.9, 1e-6);
  EXPECT_NEAR(spectral_radius(Mat(2, 2, {0.5, 0.0, 0.0, -0.8})), 0.8, 1e-6);
}
