#pragma once

// Multi-step on-policy distillation from the full-precision largest config.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dcqfa/common.hpp"
#include "dcqfa/configspace.hpp"
#include "dcqfa/env.hpp"
#include "dcqfa/numerics.hpp"
#include "dcqfa/quant.hpp"
#include "dcqfa/supernet.hpp"
#include "dcqfa/trainer.hpp"

namespace dcqfa {

enum class StepWeighting { kUniform, kDiscount };

struct OpdConfig {
  double gamma = 1.0;
  std::size_t k_min = 1;
  std::size_t k_max = 8;
  StepWeighting weighting = StepWeighting::kUniform;
  /// lambda in w_t = lambda^(t-1) when weighting is kDiscount.
  double discount = 0.9;
  /// Distillation optimizer steps.
  std::size_t steps = 500;
  /// Parallel rollouts per config per step.
  std::size_t envs = 16;

  void validate() const {
    if (k_min < 1 || k_max < k_min) throw UserError("opd horizon bounds need 1 <= k_min <= k_max");
    if (!(gamma >= 0.0)) throw UserError("opd gamma must be nonnegative");
    if (weighting == StepWeighting::kDiscount && !(discount > 0.0)) throw UserError("opd discount must be positive");
    if (envs == 0) throw UserError("opd needs at least one rollout");
  }
};

/// K = round(K_min + progress * (K_max - K_min)).
inline std::size_t horizon(const OpdConfig& c, double progress) {
  const double p = std::clamp(progress, 0.0, 1.0);
  const double k = static_cast<double>(c.k_min) + p * static_cast<double>(c.k_max - c.k_min);
  return static_cast<std::size_t>(std::llround(k));
}

inline std::vector<double> step_weights(const OpdConfig& c, std::size_t k) {
  std::vector<double> w(k, 1.0);
  if (c.weighting == StepWeighting::kDiscount) {
    for (std::size_t t = 1; t < k; ++t) w[t] = w[t - 1] * c.discount;
  }
  return w;
}

inline double total_loss(double base, double opd, double gamma) { return base + gamma * opd; }

struct OpdRollout {
  Var loss;
  double value = 0.0;
  /// Steps with at least one live rollout.
  std::size_t steps = 0;
  std::vector<double> step_errors;
};

/// (1/K) * sum_t w_t * D_t along student-driven rollouts from `starts`.
///
/// `env` provides:
///   Tensor observe(const std::vector<State>&)             -> [n, obs_dim]
///   Var student(Tape&, Var obs)                            -> [n, act_dim]
///   Tensor teacher(const Tensor& obs)                      -> [n, act_dim]
///   State advance(const State&, std::span<const float> a)
///   bool done(const State&)
/// Transitions use detached action values. Rollouts that finish drop out of later terms.
template <typename State, typename Env>
OpdRollout opd_loss(Tape& tape, std::vector<State> states, std::size_t k, std::span<const double> weights, Env& env) {
  if (k == 0) throw UserError("opd_loss: horizon K must be at least 1");
  if (weights.size() < k) throw std::invalid_argument("opd_loss: fewer weights than steps");
  if (states.empty()) throw std::invalid_argument("opd_loss: no start states");
  OpdRollout out;
  std::optional<Var> acc;
  for (std::size_t t = 0; t < k; ++t) {
    std::erase_if(states, [&](const State& s) { return env.done(s); });
    if (states.empty()) break;
    const Tensor obs = env.observe(states);
    if (!obs.all_finite()) throw NumericError("opd_loss: environment diverged at step " + std::to_string(t));
    const Var a = env.student(tape, tape.constant(obs));
    const Tensor target = env.teacher(obs);
    const Var d = mse_loss(tape, a, tape.constant(target));
    out.step_errors.push_back(tape.value(d)[0]);
    const Var term = scale(tape, d, weights[t]);
    acc = acc ? add(tape, *acc, term) : term;
    ++out.steps;
    const Tensor& av = tape.value(a);
    const std::size_t m = av.cols();
    for (std::size_t i = 0; i < states.size(); ++i) {
      states[i] = env.advance(states[i], std::span<const float>(&av[i * m], m));
    }
  }
  if (!acc) throw std::invalid_argument("opd_loss: every rollout finished before the first step");
  out.loss = scale(tape, *acc, 1.0 / static_cast<double>(k));
  out.value = tape.value(out.loss)[0];
  return out;
}

// ---- PushBox with the supernet ------------------------------------------------------

struct PushBoxRollout {
  PushBoxState state;
  std::size_t steps = 0;
};

/// Student is the supernet under `config`; teacher is the same weights under the
/// full-precision largest config, evaluated without gradient.
struct PushBoxDistillEnv {
  const Supernet& net;
  const std::vector<Var>& bound;
  const SubnetConfig& config;
  SubnetConfig teacher_cfg;
  PushBoxParams params;

  Tensor observe(const std::vector<PushBoxRollout>& s) const {
    Tensor o({s.size(), kPushObsDim});
    for (std::size_t i = 0; i < s.size(); ++i) {
      const Observation v = observe_state(s[i].state);
      std::copy(v.begin(), v.end(), &o[i * kPushObsDim]);
    }
    return o;
  }
  Var student(Tape& tape, Var obs) const { return net.forward(tape, bound, config, obs); }
  Tensor teacher(const Tensor& obs) const { return net.predict(teacher_cfg, obs); }
  PushBoxRollout advance(const PushBoxRollout& r, std::span<const float> a) const {
    return PushBoxRollout{step(params, r.state, Action{a[0], a[1]}), r.steps + 1};
  }
  bool done(const PushBoxRollout& r) const { return r.steps >= params.max_steps || is_success(params, r.state); }

 private:
  static Observation observe_state(const PushBoxState& s) { return dcqfa::observe(s); }
};

/// Distillation stage: the sandwich base loss plus gamma * OPD for every
/// sampled config except the largest (the teacher's own architecture).
/// Rollouts start from demonstration states.
class Distiller {
 public:
  Distiller(Trainer& trainer, OpdConfig config, PushBoxParams params, std::vector<PushBoxState> starts)
      : trainer_(trainer), config_(config), params_(params), starts_(std::move(starts)) {
    config_.validate();
    params_.validate();
    if (starts_.empty()) throw UserError("distillation needs start states");
  }

  const OpdConfig& config() const { return config_; }
  std::size_t steps_done() const { return done_; }
  void set_steps_done(std::size_t s) { done_ = s; }

  std::vector<MetricRow> step() {
    const double progress =
        config_.steps <= 1 ? 1.0 : static_cast<double>(done_) / static_cast<double>(config_.steps - 1);
    const std::size_t k = horizon(config_, progress);
    const std::vector<double> w = step_weights(config_, k);
    Rng& rng = trainer_.rng();
    const SubnetConfig teacher = teacher_config(trainer_.net().space());
    const Supernet& net = trainer_.net();
    const ExtraLossFn extra = [&](Tape& tape, const std::vector<Var>& bound, const SubnetConfig& c,
                                  bool is_largest) -> std::optional<ExtraLoss> {
      if (is_largest || config_.gamma == 0.0) return std::nullopt;
      std::vector<PushBoxRollout> s;
      for (std::size_t i = 0; i < config_.envs; ++i) s.push_back(PushBoxRollout{starts_[rng.index(starts_.size())], 0});
      PushBoxDistillEnv env{net, bound, c, teacher, params_};
      OpdRollout r = opd_loss(tape, std::move(s), k, w, env);
      return ExtraLoss{scale(tape, r.loss, config_.gamma), r.value, k};
    };
    auto rows = trainer_.step(extra);
    ++done_;
    return rows;
  }

 private:
  Trainer& trainer_;
  OpdConfig config_;
  PushBoxParams params_;
  std::vector<PushBoxState> starts_;
  std::size_t done_ = 0;
};

/// Fine-tunes one student config of `net` on L_BC + gamma * L_OPD, with the
/// teacher taken from the same (changing) weights.
inline void finetune_student(Supernet& net, const SubnetConfig& student, const Dataset& data,
                             const std::vector<PushBoxState>& starts, const PushBoxParams& params,
                             const OpdConfig& oc, std::size_t steps, std::size_t batch, double lr, std::uint64_t seed) {
  oc.validate();
  if (starts.empty()) throw UserError("finetune_student: no start states");
  Rng rng(seed);
  Adam adam(AdamConfig{lr, 0.9, 0.999, 1e-8});
  const SubnetConfig teacher = teacher_config(net.space());
  for (std::size_t step = 0; step < steps; ++step) {
    const double progress = steps <= 1 ? 1.0 : static_cast<double>(step) / static_cast<double>(steps - 1);
    const std::size_t k = horizon(oc, progress);
    const std::vector<double> w = step_weights(oc, k);
    auto [obs, act] = data.sample(batch, rng);
    Tape tape;
    const auto bound = net.bind(tape, true);
    Var loss = policy_loss(tape, net.forward(tape, bound, student, tape.constant(obs)), act);
    std::vector<PushBoxRollout> s;
    for (std::size_t i = 0; i < oc.envs; ++i) s.push_back(PushBoxRollout{starts[rng.index(starts.size())], 0});
    PushBoxDistillEnv env{net, bound, student, teacher, params};
    const OpdRollout r = opd_loss(tape, std::move(s), k, w, env);
    loss = add(tape, loss, scale(tape, r.loss, oc.gamma));
    tape.backward(loss);
    std::vector<Tensor> grads;
    for (const Var& v : bound) grads.push_back(tape.grad(v));
    adam.step(net.params(), grads);
  }
}

inline std::vector<PushBoxState> start_states(const std::vector<Trajectory>& demos) {
  std::vector<PushBoxState> out;
  for (const auto& t : demos) {
    for (std::size_t i = 0; i < t.length(); ++i) {
      Observation o;
      std::copy_n(&t.obs[i * t.obs_dim], kPushObsDim, o.begin());
      out.push_back(state_from_observation(o, 0));
    }
  }
  return out;
}

// ---- LinearSystem oracle -------------------------------------------------------------

/// a = Q_w(W)^T-applied to Q_a(x): a quantized linear controller, W is [state, action].
class LinearStudent {
 public:
  LinearStudent(Tensor w, int weight_bits, QuantizerSpec act) : w_(std::move(w)), wbits_(weight_bits), act_(std::move(act)) {
    QuantizerSpec::check_bits(weight_bits);
    if (!act_.calibrated()) throw UserError("linear student: activation quantizer is not calibrated");
  }

  /// Starts from the teacher's gain and calibrates the activation scale on teacher-visited states.
  static LinearStudent from_teacher(const LinearSystem& sys, int weight_bits, int act_bits,
                                    const std::vector<std::vector<double>>& visited) {
    const std::size_t n = sys.state_dim(), m = sys.action_dim();
    Tensor w({n, m});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) w.at(i, j) = static_cast<float>(-sys.G(j, i));
    }
    QuantizerSpec a = QuantizerSpec::activation(act_bits);
    if (act_bits != kPassThroughBits) {
      Tensor x({visited.size(), n});
      for (std::size_t r = 0; r < visited.size(); ++r) {
        for (std::size_t i = 0; i < n; ++i) x.at(r, i) = static_cast<float>(visited[r][i]);
      }
      a = calibrate(a, x);
    }
    a.frozen = true;
    return LinearStudent(std::move(w), weight_bits, std::move(a));
  }

  Tensor& weight() { return w_; }
  const Tensor& weight() const { return w_; }

  Var forward(Tape& tape, Var w, Var x) const {
    Var xq = fake_quant(tape, x, act_, nullptr);
    Var wq = w;
    if (wbits_ != kPassThroughBits) {
      const QuantizerSpec ws = calibrate(QuantizerSpec::weight(wbits_), tape.value(w));
      wq = fake_quant(tape, w, ws, nullptr);
    }
    return matmul(tape, xq, wq);
  }

  std::vector<double> act(const std::vector<double>& x) const {
    Tape tape;
    Tensor xt({1, x.size()});
    for (std::size_t i = 0; i < x.size(); ++i) xt[i] = static_cast<float>(x[i]);
    const Tensor a = tape.value(forward(tape, tape.constant(w_), tape.constant(xt)));
    return std::vector<double>(a.data().begin(), a.data().end());
  }

 private:
  Tensor w_;
  int wbits_;
  QuantizerSpec act_;
};

struct LinearDistillEnv {
  const LinearSystem& sys;
  const LinearStudent& student_net;
  Var w;
  double bound = 1e6;

  Tensor observe(const std::vector<std::vector<double>>& s) const {
    Tensor o({s.size(), sys.state_dim()});
    for (std::size_t r = 0; r < s.size(); ++r) {
      for (std::size_t i = 0; i < sys.state_dim(); ++i) o.at(r, i) = static_cast<float>(s[r][i]);
    }
    return o;
  }
  Var student(Tape& tape, Var obs) const { return student_net.forward(tape, w, obs); }
  Tensor teacher(const Tensor& obs) const {
    Tensor a({obs.rows(), sys.action_dim()});
    for (std::size_t r = 0; r < obs.rows(); ++r) {
      for (std::size_t j = 0; j < sys.action_dim(); ++j) {
        double v = 0.0;
        for (std::size_t i = 0; i < sys.state_dim(); ++i) v -= sys.G(j, i) * obs.at(r, i);
        a.at(r, j) = static_cast<float>(v);
      }
    }
    return a;
  }
  std::vector<double> advance(const std::vector<double>& x, std::span<const float> a) const {
    std::vector<double> y = sys.step(x, std::vector<double>(a.begin(), a.end()));
    if (!(vec_norm(y) < bound)) throw NumericError("opd_loss: linear system diverged");
    return y;
  }
  bool done(const std::vector<double>&) const { return false; }
};

struct LinearTrendConfig {
  std::size_t state_dim = 4;
  std::size_t action_dim = 2;
  int weight_bits = 4;
  int act_bits = 4;
  std::size_t steps = 1000;
  std::size_t batch = 16;
  double lr = 3e-3;
  std::size_t gap_horizon = 50;
  std::size_t eval_starts = 64;
  /// Half-width of the box around the home state that episodes start from.
  double start_noise = 0.1;
  /// Student weights start at the teacher gain plus this much Gaussian noise, relative to max |gain|.
  double init_noise = 0.3;
  /// Teacher closed-loop eigenvalues.
  std::vector<double> poles{0.97, 0.9, 0.7, 0.5};
};

/// A random system A = M + B G whose teacher closed loop is M = Q diag(poles) Q^T
/// for a random rotation Q, and whose open loop A is mildly unstable.
inline LinearSystem random_linear_system(std::size_t n, std::size_t m, Rng& rng,
                                         const std::vector<double>& poles = {0.97, 0.9, 0.7, 0.5}) {
  if (poles.size() != n) throw std::invalid_argument("random_linear_system: need one pole per state");
  for (;;) {
    Mat q(n, n);
    for (auto& v : q.v) v = rng.normal();
    // Gram-Schmidt on the columns.
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < j; ++k) {
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += q(i, j) * q(i, k);
        for (std::size_t i = 0; i < n; ++i) q(i, j) -= dot * q(i, k);
      }
      double norm = 0.0;
      for (std::size_t i = 0; i < n; ++i) norm += q(i, j) * q(i, j);
      norm = std::sqrt(norm);
      for (std::size_t i = 0; i < n; ++i) q(i, j) /= norm;
    }
    Mat closed(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = 0; k < n; ++k) closed(i, j) += q(i, k) * poles[k] * q(j, k);
      }
    }
    Mat B(n, m), G(m, n);
    for (auto& v : B.v) v = rng.normal();
    for (auto& v : G.v) v = 0.2 * rng.normal();
    Mat A = closed;
    const Mat bg = B * G;
    for (std::size_t i = 0; i < A.v.size(); ++i) A.v[i] += bg.v[i];
    const double rho = spectral_radius(A);
    if (rho < 1.02 || rho > 1.3) continue;
    return LinearSystem::make(A, B, G);
  }
}

struct LinearTrendResult {
  double gap_multi = 0.0;
  double gap_single = 0.0;
};

/// Fine-tunes two copies of the same quantized student, one with the growing
/// horizon schedule and one with K=1, for the same number of gradient steps, and
/// reports the mean terminal deviation from the teacher over shared eval starts.
inline LinearTrendResult linear_opd_trial(const LinearTrendConfig& tc, const OpdConfig& multi, std::uint64_t seed) {
  Rng rng(seed);
  const LinearSystem sys = random_linear_system(tc.state_dim, tc.action_dim, rng, tc.poles);
  // Episodes start near a fixed home state.
  std::vector<double> home(tc.state_dim);
  for (double& v : home) v = rng.normal();
  const double hn = vec_norm(home);
  for (double& v : home) v /= hn;
  auto draw = [&](Rng& r) {
    std::vector<double> x = home;
    for (double& v : x) v += tc.start_noise * r.uniform(-1.0, 1.0);
    return x;
  };
  std::vector<std::vector<double>> visited;
  for (int e = 0; e < 32; ++e) {
    std::vector<double> x = draw(rng);
    for (std::size_t t = 0; t < tc.gap_horizon; ++t) {
      visited.push_back(x);
      x = sys.step(x, sys.teacher_action(x));
    }
  }
  LinearStudent init = LinearStudent::from_teacher(sys, tc.weight_bits, tc.act_bits, visited);
  double wmax = 0.0;
  for (float v : init.weight().data()) wmax = std::max(wmax, std::abs(static_cast<double>(v)));
  for (float& v : init.weight().storage()) v = static_cast<float>(v + tc.init_noise * wmax * rng.normal());
  std::vector<std::vector<double>> eval_starts;
  for (std::size_t i = 0; i < tc.eval_starts; ++i) eval_starts.push_back(draw(rng));

  OpdConfig single = multi;
  single.k_min = single.k_max = 1;
  auto finetune = [&](const OpdConfig& oc, std::uint64_t s) {
    LinearStudent st = init;
    Rng r(s);
    Adam adam(AdamConfig{tc.lr, 0.9, 0.999, 1e-8});
    for (std::size_t step = 0; step < tc.steps; ++step) {
      const double p = tc.steps <= 1 ? 1.0 : static_cast<double>(step) / static_cast<double>(tc.steps - 1);
      const std::size_t k = horizon(oc, p);
      const std::vector<double> w = step_weights(oc, k);
      std::vector<std::vector<double>> starts;
      for (std::size_t b = 0; b < tc.batch; ++b) starts.push_back(draw(r));
      Tape tape;
      const Var wv = tape.leaf(st.weight());
      LinearDistillEnv env{sys, st, wv};
      const OpdRollout out = opd_loss(tape, std::move(starts), k, w, env);
      tape.backward(out.loss);
      std::vector<Tensor> g{tape.grad(wv)};
      std::vector<Tensor> params{st.weight()};
      adam.step(params, g);
      st.weight() = params[0];
    }
    return st;
  };
  const std::uint64_t train_seed = rng.next();
  const LinearStudent a = finetune(multi, train_seed);
  const LinearStudent b = finetune(single, train_seed);
  const LinearPolicy teacher = [&](const std::vector<double>& x) { return sys.teacher_action(x); };
  auto mean_gap = [&](const LinearStudent& st) {
    const LinearPolicy pol = [&](const std::vector<double>& x) { return st.act(x); };
    double total = 0.0;
    for (const auto& x0 : eval_starts) total += accumulation_gap(sys, teacher, pol, x0, tc.gap_horizon);
    return total / static_cast<double>(eval_starts.size());
  };
  return LinearTrendResult{mean_gap(a), mean_gap(b)};
}

/// P(X >= wins) for X ~ Binomial(n, 1/2).
inline double sign_test_p(std::size_t wins, std::size_t n) {
  double p = 0.0;
  for (std::size_t k = wins; k <= n; ++k) {
    p += std::exp(std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(k) + 1) -
                  std::lgamma(static_cast<double>(n - k) + 1) - static_cast<double>(n) * std::log(2.0));
  }
  return std::min(1.0, p);
}

}  // namespace dcqfa
