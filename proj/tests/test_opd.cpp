#include <gtest/gtest.h>

#include <cmath>

#include "dcqfa/opd.hpp"
#include "test_util.hpp"

using namespace dcqfa;

namespace {

// State t observes t + 1; the student acts w * obs, the teacher slope * obs.
struct ScalarEnv {
  float slope = 0.8f;
  int limit = 1000;
  Var w;

  Tensor observe(const std::vector<int>& s) const {
    Tensor o({s.size(), 1});
    for (std::size_t i = 0; i < s.size(); ++i) o[i] = static_cast<float>(s[i] + 1);
    return o;
  }
  Var student(Tape& tape, Var obs) const { return matmul(tape, obs, w); }
  Tensor teacher(const Tensor& obs) const {
    Tensor a = obs;
    for (auto& v : a.storage()) v *= slope;
    return a;
  }
  int advance(int s, std::span<const float>) const { return s + 1; }
  bool done(int s) const { return s >= limit; }
};

}  // namespace

TEST(Opd, TwoStepExample) {
  Tape t;
  ScalarEnv env;
  env.w = t.leaf(Tensor::matrix(1, 1, {1.0f}));
  const std::vector<double> w{1.0, 1.0};
  const OpdRollout r = opd_loss(t, std::vector<int>{0}, 2, w, env);
  EXPECT_NEAR(r.value, 0.10, 1e-6);
  ASSERT_EQ(r.step_errors.size(), 2u);
  EXPECT_NEAR(r.step_errors[0], 0.04, 1e-6);
  EXPECT_NEAR(r.step_errors[1], 0.16, 1e-6);
  t.backward(r.loss);
  // d/dw of (1/2) sum_t (w - 0.8)^2 o_t^2 at w = 1, o = 1, 2.
  EXPECT_NEAR(t.grad(env.w)[0], 1.0, 1e-5);
}

TEST(Opd, MatchingStudentHasZeroLoss) {
  for (std::size_t k = 1; k <= 6; ++k) {
    Tape t;
    ScalarEnv env;
    env.w = t.leaf(Tensor::matrix(1, 1, {0.8f}));
    const std::vector<double> w(k, 1.0);
    EXPECT_EQ(opd_loss(t, std::vector<int>{0, 3, 5}, k, w, env).value, 0.0);
  }
}

TEST(Opd, SingleStepIsInitialStateDistillation) {
  Tape t;
  ScalarEnv env;
  env.w = t.leaf(Tensor::matrix(1, 1, {0.5f}));
  const std::vector<double> w{1.0};
  const OpdRollout r = opd_loss(t, std::vector<int>{2}, 1, w, env);
  EXPECT_NEAR(r.value, (0.5 * 3 - 0.8 * 3) * (0.5 * 3 - 0.8 * 3), 1e-5);
  EXPECT_EQ(r.steps, 1u);
}

TEST(Opd, FinishedRolloutsDropOut) {
  Tape t;
  ScalarEnv env;
  env.limit = 1;
  env.w = t.leaf(Tensor::matrix(1, 1, {1.0f}));
  const std::vector<double> w(3, 1.0);
  const OpdRollout r = opd_loss(t, std::vector<int>{0}, 3, w, env);
  EXPECT_EQ(r.steps, 1u);
  EXPECT_NEAR(r.value, 0.04 / 3.0, 1e-7);
}

TEST(Opd, RejectsZeroHorizon) {
  Tape t;
  ScalarEnv env;
  env.w = t.leaf(Tensor::matrix(1, 1, {1.0f}));
  const std::vector<double> w{1.0};
  EXPECT_THROW(opd_loss(t, std::vector<int>{0}, 0, w, env), UserError);
  OpdConfig c;
  c.k_min = 0;
  EXPECT_THROW(c.validate(), UserError);
  c = OpdConfig{};
  c.k_min = 5;
  c.k_max = 3;
  EXPECT_THROW(c.validate(), UserError);
}

TEST(Opd, HorizonSchedule) {
  OpdConfig c;
  c.k_min = 1;
  c.k_max = 9;
  EXPECT_EQ(horizon(c, 0.0), 1u);
  EXPECT_EQ(horizon(c, 1.0), 9u);
  EXPECT_EQ(horizon(c, 0.5), 5u);
  std::size_t prev = 0;
  for (int i = 0; i <= 1000; ++i) {
    const std::size_t k = horizon(c, i / 1000.0);
    EXPECT_GE(k, prev);
    prev = k;
  }
}

TEST(Opd, TotalLossAndWeights) {
  EXPECT_EQ(total_loss(0.3, 0.7, 0.0), 0.3);
  EXPECT_NEAR(total_loss(0.3, 0.1, 1.0), 0.4, 1e-12);
  EXPECT_NEAR(total_loss(0.0, 0.05, 2.0), 0.1, 1e-12);
  OpdConfig c;
  EXPECT_EQ(step_weights(c, 3), (std::vector<double>{1.0, 1.0, 1.0}));
  c.weighting = StepWeighting::kDiscount;
  c.discount = 0.5;
  EXPECT_EQ(step_weights(c, 3), (std::vector<double>{1.0, 0.5, 0.25}));
}

TEST(Opd, TeacherPathCarriesNoGradient) {
  const SearchSpace space;
  Supernet net(Architecture::for_space(space), space, 3);
  const PushBoxParams p;
  const auto demos = generate_demos(p, 4, 2);
  calibrate_all(net, Dataset(demos).all().first);
  net.freeze_act_quantizers();
  SubnetConfig student = largest_config(space);
  student.layers[0] = LayerChoice{true, 1.0, 0.5, 4, 8};
  student.layers[3].keep = false;
  student = canonicalize(space, student);
  const auto starts = start_states(demos);
  std::vector<PushBoxRollout> s;
  for (std::size_t i = 0; i < 8; ++i) s.push_back(PushBoxRollout{starts[i * 7 % starts.size()], 0});
  const std::vector<double> w(4, 1.0);

  auto run = [&](const Supernet& n, std::vector<Tensor>* grads) {
    Tape t;
    const auto bound = n.bind(t, true);
    PushBoxDistillEnv env{n, bound, student, teacher_config(space), p};
    const OpdRollout r = opd_loss(t, s, 4, w, env);
    t.backward(r.loss);
    if (grads) {
      for (Var v : bound) grads->push_back(t.grad(v));
    }
    return r.value;
  };
  std::vector<Tensor> grads;
  const double base = run(net, &grads);
  EXPECT_GT(base, 0.0);
  for (std::size_t i = 0; i < kBlockParamCount; ++i) {
    for (float g : grads[net.block_index(3, static_cast<BlockParam>(i))].data()) ASSERT_EQ(g, 0.0f);
  }
  const Tensor& g1 = grads[net.block_index(0, kW1)];
  for (std::size_t r = 0; r < 32; ++r) {
    for (std::size_t c = 32; c < 128; ++c) ASSERT_EQ(g1[r * 128 + c], 0.0f);
  }
  // Layer 3 is read only by the teacher: changing it moves the loss.
  Supernet moved = net;
  for (float& v : moved.params()[moved.block_index(3, kW2)].storage()) v += 0.05f;
  EXPECT_NE(run(moved, nullptr), base);
}

TEST(Opd, SignTest) {
  EXPECT_NEAR(sign_test_p(10, 10), 1.0 / 1024.0, 1e-12);
  EXPECT_NEAR(sign_test_p(0, 10), 1.0, 1e-12);
  EXPECT_LT(sign_test_p(37, 60), 0.05);
  EXPECT_GE(sign_test_p(36, 60), 0.05);
}

TEST(Opd, RandomLinearSystemShape) {
  Rng rng(4);
  for (int i = 0; i < 5; ++i) {
    const LinearSystem sys = random_linear_system(4, 2, rng);
    EXPECT_NEAR(spectral_radius(sys.closed_loop()), 0.97, 1e-3);
    const double open = spectral_radius(sys.A);
    EXPECT_GE(open, 1.02);
    EXPECT_LE(open, 1.3);
  }
}

TEST(Opd, FullPrecisionLinearStudentCopiesTeacher) {
  Rng rng(5);
  const LinearSystem sys = random_linear_system(4, 2, rng);
  const LinearStudent st = LinearStudent::from_teacher(sys, 16, 16, {});
  const std::vector<double> x{0.3, -0.2, 0.5, 0.1};
  const auto a = st.act(x);
  const auto b = sys.teacher_action(x);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
}

TEST(Opd, LinearTrialIsDeterministic) {
  LinearTrendConfig tc;
  tc.steps = 40;
  tc.eval_starts = 8;
  OpdConfig oc;
  const LinearTrendResult a = linear_opd_trial(tc, oc, 7);
  const LinearTrendResult b = linear_opd_trial(tc, oc, 7);
  EXPECT_EQ(a.gap_multi, b.gap_multi);
  EXPECT_EQ(a.gap_single, b.gap_single);
  EXPECT_TRUE(std::isfinite(a.gap_multi));
  EXPECT_TRUE(std::isfinite(a.gap_single));
}
