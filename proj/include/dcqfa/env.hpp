#pragma once

// Closed-loop environments: a planar disk-pushing task with a scripted expert,
// and a linear system used to measure closed-loop error accumulation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "dcqfa/common.hpp"
#include "dcqfa/numerics.hpp"

namespace dcqfa {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double norm() const { return std::hypot(x, y); }
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

struct PushBoxParams {
  double dt = 0.05;
  double agent_radius = 0.05;
  double box_radius = 0.07;
  double success_threshold = 0.05;
  std::size_t max_steps = 200;
  /// Initial positions are drawn from [spawn_margin, 1 - spawn_margin]^2.
  double spawn_margin = 0.2;
  /// Minimum initial box-goal distance.
  double min_goal_distance = 0.15;

  void validate() const {
    if (!(dt > 0.0) || !(agent_radius > 0.0) || !(box_radius > 0.0) || !(success_threshold > 0.0)) {
      throw UserError("push-box parameters must be positive");
    }
    if (max_steps == 0) throw UserError("push-box max_steps must be positive");
    if (!(spawn_margin >= box_radius && spawn_margin < 0.5)) throw UserError("spawn_margin out of range");
  }
};

struct PushBoxState {
  Vec2 agent;
  Vec2 box;
  Vec2 goal;
  std::size_t step = 0;
  friend bool operator==(const PushBoxState&, const PushBoxState&) = default;
};

inline constexpr std::size_t kPushObsDim = 6;
inline constexpr std::size_t kPushActDim = 2;

using Observation = std::array<float, kPushObsDim>;
using Action = std::array<float, kPushActDim>;

inline Observation observe(const PushBoxState& s) {
  return {static_cast<float>(s.agent.x), static_cast<float>(s.agent.y), static_cast<float>(s.box.x),
          static_cast<float>(s.box.y),   static_cast<float>(s.goal.x),  static_cast<float>(s.goal.y)};
}

inline bool is_success(const PushBoxParams& p, const PushBoxState& s) {
  return (s.box - s.goal).norm() < p.success_threshold;
}

inline PushBoxState reset(const PushBoxParams& p, Rng& rng) {
  const double lo = p.spawn_margin, hi = 1.0 - p.spawn_margin;
  const double contact = p.agent_radius + p.box_radius;
  PushBoxState s;
  do {
    s.box = {rng.uniform(lo, hi), rng.uniform(lo, hi)};
    s.goal = {rng.uniform(lo, hi), rng.uniform(lo, hi)};
  } while ((s.box - s.goal).norm() < p.min_goal_distance);
  do {
    s.agent = {rng.uniform(lo, hi), rng.uniform(lo, hi)};
  } while ((s.agent - s.box).norm() < contact + 0.02);
  return s;
}

namespace detail {

inline Vec2 clamp_to(Vec2 v, double margin) {
  return {std::clamp(v.x, margin, 1.0 - margin), std::clamp(v.y, margin, 1.0 - margin)};
}

}  // namespace detail

/// Kinematic step: the agent moves by dt * action; on overlap the box is moved
/// along the contact normal to touching distance.
inline PushBoxState step(const PushBoxParams& p, PushBoxState s, Action action) {
  const double ax = std::clamp(static_cast<double>(action[0]), -1.0, 1.0);
  const double ay = std::clamp(static_cast<double>(action[1]), -1.0, 1.0);
  const double contact = p.agent_radius + p.box_radius;
  s.agent = detail::clamp_to(s.agent + Vec2{ax, ay} * p.dt, p.agent_radius);
  Vec2 delta = s.box - s.agent;
  double dist = delta.norm();
  if (dist < contact) {
    Vec2 n = dist > 1e-12 ? delta * (1.0 / dist) : Vec2{ax, ay} * (1.0 / std::max(1e-12, std::hypot(ax, ay)));
    if (!(n.norm() > 0.5)) n = {1.0, 0.0};
    s.box = detail::clamp_to(s.agent + n * contact, p.box_radius);
    delta = s.box - s.agent;
    dist = delta.norm();
    if (dist < contact) {
      // Box pinned against a wall: the agent is pushed back instead.
      const Vec2 m = dist > 1e-12 ? delta * (1.0 / dist) : n;
      s.agent = detail::clamp_to(s.box - m * contact, p.agent_radius);
    }
  }
  ++s.step;
  return s;
}

/// Two-phase controller: reach the point behind the box on the box->goal line,
/// then push along that line. Circles around the box when approaching from the front.
inline Action scripted_expert(const PushBoxParams& p, const PushBoxState& s) {
  const Vec2 to_goal = s.goal - s.box;
  const double dist = to_goal.norm();
  if (dist < 0.5 * p.success_threshold) return {0.0f, 0.0f};
  const Vec2 u = to_goal * (1.0 / dist);
  const double contact = p.agent_radius + p.box_radius;
  const Vec2 rel = s.agent - s.box;
  const double along = rel.dot(u);
  const Vec2 lateral = rel - u * along;
  const double lat = lateral.norm();

  Vec2 v;
  if (along < -0.6 * contact && lat < 0.25 * contact) {
    // Push: drive toward the goal while steering onto the line through the box centre.
    const double speed = std::clamp(4.0 * dist, 0.3, 1.0);
    const Vec2 target = s.box - u * (contact * 0.9);
    v = u * speed + (target - s.agent) * 6.0;
  } else if (rel.norm() < contact + 0.05 && along > -0.8 * contact) {
    // Orbit around the box toward its back side, keeping a small clearance.
    const Vec2 radial = rel * (1.0 / std::max(rel.norm(), 1e-9));
    Vec2 tangent{-radial.y, radial.x};
    // Choose the orbit direction that rotates rel toward -u.
    const double cross = rel.x * (-u.y) - rel.y * (-u.x);
    if (cross < 0.0) tangent = tangent * -1.0;
    const double clearance = (contact + 0.03) - rel.norm();
    v = tangent * 1.0 + radial * (8.0 * clearance);
  } else {
    const Vec2 behind = s.box - u * (contact + 0.02);
    v = (behind - s.agent) * 8.0;
  }
  const double n = v.norm();
  if (n > 1.0) v = v * (1.0 / n);
  return {static_cast<float>(std::clamp(v.x, -1.0, 1.0)), static_cast<float>(std::clamp(v.y, -1.0, 1.0))};
}

struct Trajectory {
  std::size_t obs_dim = kPushObsDim;
  std::size_t act_dim = kPushActDim;
  std::vector<float> obs;
  std::vector<float> actions;
  bool success = false;

  std::size_t length() const { return obs_dim ? obs.size() / obs_dim : 0; }

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

using PushPolicy = std::function<Action(const Observation&)>;

/// Closed-loop rollout from the initial state drawn with `seed`; stops after
/// `horizon` steps or on success.
inline Trajectory rollout(const PushPolicy& policy, const PushBoxParams& p, std::size_t horizon, std::uint64_t seed) {
  if (horizon == 0) throw UserError("rollout horizon must be at least 1");
  Rng rng(seed);
  PushBoxState s = reset(p, rng);
  Trajectory t;
  for (std::size_t k = 0; k < horizon; ++k) {
    const Observation o = observe(s);
    const Action a = policy(o);
    if (!std::isfinite(a[0]) || !std::isfinite(a[1])) throw NumericError("rollout: policy produced a non-finite action");
    t.obs.insert(t.obs.end(), o.begin(), o.end());
    t.actions.insert(t.actions.end(), a.begin(), a.end());
    s = step(p, s, a);
    if (is_success(p, s)) {
      t.success = true;
      break;
    }
  }
  return t;
}

inline PushBoxState state_from_observation(const Observation& o, std::size_t step_index = 0) {
  return PushBoxState{{o[0], o[1]}, {o[2], o[3]}, {o[4], o[5]}, step_index};
}

/// Expert demonstrations. With action_noise > 0 the executed action is perturbed
/// by Gaussian noise while the recorded label stays the clean expert action.
inline std::vector<Trajectory> generate_demos(const PushBoxParams& p, std::size_t episodes, std::uint64_t seed,
                                              double action_noise = 0.0) {
  p.validate();
  Rng master(seed);
  std::vector<Trajectory> demos;
  for (std::size_t e = 0; e < episodes; ++e) {
    Rng rng = master.fork();
    PushBoxState s = reset(p, rng);
    Trajectory t;
    for (std::size_t k = 0; k < p.max_steps; ++k) {
      const Observation o = observe(s);
      const Action a = scripted_expert(p, s);
      t.obs.insert(t.obs.end(), o.begin(), o.end());
      t.actions.insert(t.actions.end(), a.begin(), a.end());
      Action executed = a;
      if (action_noise > 0.0) {
        for (auto& v : executed) v = static_cast<float>(std::clamp(v + action_noise * rng.normal(), -1.0, 1.0));
      }
      s = step(p, s, executed);
      if (is_success(p, s)) {
        t.success = true;
        break;
      }
    }
    demos.push_back(std::move(t));
  }
  return demos;
}

// ---- Demo dataset file ---------------------------------------------------------
//
// Little-endian: "DCQD" | u32 version | u32 n_traj | u32 obs_dim | u32 act_dim |
// u32 length[n_traj] | u8 success[n_traj] | per trajectory, per step: obs_dim f32 then act_dim f32.

inline constexpr std::uint32_t kDemoFormatVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw UserError("truncated file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(os, bits);
}

inline float get_f32(std::istream& is) {
  const std::uint32_t bits = get_u32(is);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace detail

inline void write_demos(const std::vector<Trajectory>& demos, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw UserError("cannot write " + path);
  const std::size_t obs_dim = demos.empty() ? kPushObsDim : demos.front().obs_dim;
  const std::size_t act_dim = demos.empty() ? kPushActDim : demos.front().act_dim;
  os.write("DCQD", 4);
  detail::put_u32(os, kDemoFormatVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(demos.size()));
  detail::put_u32(os, static_cast<std::uint32_t>(obs_dim));
  detail::put_u32(os, static_cast<std::uint32_t>(act_dim));
  for (const auto& t : demos) {
    if (t.obs_dim != obs_dim || t.act_dim != act_dim) throw UserError("demo trajectories disagree on dimensions");
    detail::put_u32(os, static_cast<std::uint32_t>(t.length()));
  }
  for (const auto& t : demos) os.put(t.success ? 1 : 0);
  for (const auto& t : demos) {
    for (std::size_t k = 0; k < t.length(); ++k) {
      for (std::size_t i = 0; i < obs_dim; ++i) detail::put_f32(os, t.obs[k * obs_dim + i]);
      for (std::size_t i = 0; i < act_dim; ++i) detail::put_f32(os, t.actions[k * act_dim + i]);
    }
  }
  if (!os) throw UserError("write failed: " + path);
}

inline std::vector<Trajectory> read_demos(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UserError("cannot open demo file " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "DCQD") throw UserError(path + ": not a demo file");
  const std::uint32_t version = detail::get_u32(is);
  if (version != kDemoFormatVersion) throw UserError(path + ": unsupported demo format version " + std::to_string(version));
  const std::uint32_t n = detail::get_u32(is);
  const std::uint32_t obs_dim = detail::get_u32(is);
  const std::uint32_t act_dim = detail::get_u32(is);
  if (obs_dim == 0 || act_dim == 0) throw UserError(path + ": zero dimension");
  std::vector<Trajectory> demos(n);
  for (auto& t : demos) {
    t.obs_dim = obs_dim;
    t.act_dim = act_dim;
    const std::uint32_t len = detail::get_u32(is);
    if (len == 0) throw UserError(path + ": empty trajectory");
    t.obs.resize(std::size_t{len} * obs_dim);
    t.actions.resize(std::size_t{len} * act_dim);
  }
  for (auto& t : demos) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw UserError(path + ": truncated");
    t.success = c != 0;
  }
  for (auto& t : demos) {
    for (std::size_t k = 0; k < t.length(); ++k) {
      for (std::size_t i = 0; i < obs_dim; ++i) t.obs[k * obs_dim + i] = detail::get_f32(is);
      for (std::size_t i = 0; i < act_dim; ++i) t.actions[k * act_dim + i] = detail::get_f32(is);
    }
  }
  if (is.peek() != std::char_traits<char>::eof()) throw UserError(path + ": trailing bytes");
  return demos;
}

// ---- Linear tracking system --------------------------------------------------------

/// Row-major dense matrix helpers for small systems.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, std::vector<double> values = {}) : rows(r), cols(c), v(std::move(values)) {
    if (v.empty()) v.assign(r * c, 0.0);
    if (v.size() != r * c) throw std::invalid_argument("Mat: data size mismatch");
  }
  double& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }

  std::vector<double> apply(const std::vector<double>& x) const {
    if (x.size() != cols) throw std::invalid_argument("Mat::apply: dimension mismatch");
    std::vector<double> y(rows, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) y[i] += v[i * cols + j] * x[j];
    }
    return y;
  }

  Mat operator*(const Mat& o) const {
    if (cols != o.rows) throw std::invalid_argument("Mat: product dimension mismatch");
    Mat r(rows, o.cols);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t k = 0; k < cols; ++k) {
        for (std::size_t j = 0; j < o.cols; ++j) r(i, j) += (*this)(i, k) * o(k, j);
      }
    }
    return r;
  }

  Mat operator-(const Mat& o) const {
    Mat r = *this;
    for (std::size_t i = 0; i < v.size(); ++i) r.v[i] -= o.v[i];
    return r;
  }
};

inline double vec_norm(const std::vector<double>& x) {
  double s = 0.0;
  for (double e : x) s += e * e;
  return std::sqrt(s);
}

/// Spectral radius by power iteration, averaging the log growth over the tail
/// of the iteration so complex-conjugate dominant pairs are handled.
inline double spectral_radius(const Mat& m, std::size_t iterations = 2000) {
  if (m.rows != m.cols) throw std::invalid_argument("spectral_radius: matrix must be square");
  std::vector<double> x(m.rows);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 1.0 + 0.37 * static_cast<double>(i);
  double log_growth = 0.0;
  const std::size_t burn = iterations / 2;
  for (std::size_t k = 0; k < iterations; ++k) {
    x = m.apply(x);
    const double n = vec_norm(x);
    if (n == 0.0) return 0.0;
    if (k >= burn) log_growth += std::log(n);
    for (double& e : x) e /= n;
  }
  return std::exp(log_growth / static_cast<double>(iterations - burn));
}

/// x_{t+1} = A x_t + B a_t, with teacher a_t = -G x_t.
struct LinearSystem {
  Mat A;
  Mat B;
  Mat G;

  static LinearSystem make(Mat A, Mat B, Mat G) {
    if (A.rows != A.cols || B.rows != A.rows || G.rows != B.cols || G.cols != A.rows) {
      throw UserError("linear system: inconsistent dimensions");
    }
    LinearSystem s{std::move(A), std::move(B), std::move(G)};
    const double rho = spectral_radius(s.closed_loop());
    if (!(rho < 1.0)) throw UserError("linear system: teacher closed loop is not stable (rho=" + format_double(rho) + ")");
    return s;
  }

  std::size_t state_dim() const { return A.rows; }
  std::size_t action_dim() const { return B.cols; }

  Mat closed_loop() const { return A - B * G; }

  std::vector<double> step(const std::vector<double>& x, const std::vector<double>& a) const {
    std::vector<double> y = A.apply(x);
    const std::vector<double> b = B.apply(a);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
    return y;
  }

  std::vector<double> teacher_action(const std::vector<double>& x) const {
    std::vector<double> a = G.apply(x);
    for (double& e : a) e = -e;
    return a;
  }
};

using LinearPolicy = std::function<std::vector<double>(const std::vector<double>&)>;

/// ||x_T(student) - x_T(teacher)|| from a shared start; infinity if either run
/// leaves a ball of radius `bound`.
inline double accumulation_gap(const LinearSystem& sys, const LinearPolicy& teacher, const LinearPolicy& student,
                               const std::vector<double>& x0, std::size_t horizon, double bound = 1e6) {
  std::vector<double> xt = x0, xs = x0;
  for (std::size_t t = 0; t < horizon; ++t) {
    xt = sys.step(xt, teacher(xt));
    xs = sys.step(xs, student(xs));
    if (!(vec_norm(xt) < bound) || !(vec_norm(xs) < bound)) return std::numeric_limits<double>::infinity();
  }
  std::vector<double> d(xt.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = xs[i] - xt[i];
  return vec_norm(d);
}

}  // namespace dcqfa
