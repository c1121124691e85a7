#pragma once

// Device-conditioned quantization-aware supernet training and closed-loop evaluation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dcqfa/common.hpp"
#include "dcqfa/configspace.hpp"
#include "dcqfa/costmodel.hpp"
#include "dcqfa/env.hpp"
#include "dcqfa/numerics.hpp"
#include "dcqfa/supernet.hpp"

namespace dcqfa {

/// Flattened (observation, action) pairs.
class Dataset {
 public:
  Dataset() = default;

  explicit Dataset(const std::vector<Trajectory>& demos) {
    if (demos.empty()) throw UserError("dataset: no trajectories");
    obs_dim_ = demos.front().obs_dim;
    act_dim_ = demos.front().act_dim;
    for (const auto& t : demos) {
      if (t.obs_dim != obs_dim_ || t.act_dim != act_dim_) throw UserError("dataset: inconsistent dimensions");
      obs_.insert(obs_.end(), t.obs.begin(), t.obs.end());
      act_.insert(act_.end(), t.actions.begin(), t.actions.end());
    }
  }

  std::size_t size() const { return obs_dim_ ? obs_.size() / obs_dim_ : 0; }
  std::size_t obs_dim() const { return obs_dim_; }
  std::size_t act_dim() const { return act_dim_; }

  /// Rows `idx`, as ([n, obs_dim], [n, act_dim]).
  std::pair<Tensor, Tensor> gather(const std::vector<std::size_t>& idx) const {
    Tensor o({idx.size(), obs_dim_});
    Tensor a({idx.size(), act_dim_});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(&obs_[idx[i] * obs_dim_], obs_dim_, &o[i * obs_dim_]);
      std::copy_n(&act_[idx[i] * act_dim_], act_dim_, &a[i * act_dim_]);
    }
    return {std::move(o), std::move(a)};
  }

  std::pair<Tensor, Tensor> sample(std::size_t batch, Rng& rng) const {
    std::vector<std::size_t> idx(batch);
    for (auto& i : idx) i = rng.index(size());
    return gather(idx);
  }

  /// Every row, in order.
  std::pair<Tensor, Tensor> all() const {
    std::vector<std::size_t> idx(size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return gather(idx);
  }

 private:
  std::size_t obs_dim_ = 0;
  std::size_t act_dim_ = 0;
  std::vector<float> obs_;
  std::vector<float> act_;
};

/// Per-sample squared error summed over action dimensions, averaged over the batch.
inline Var policy_loss(Tape& tape, Var predicted, const Tensor& actions) {
  const double act_dim = static_cast<double>(actions.cols());
  return scale(tape, mse_loss(tape, predicted, tape.constant(actions)), act_dim);
}

/// Validation loss of one config on a fixed batch, without gradients.
inline double validation_loss(const Supernet& net, const SubnetConfig& config, const Tensor& obs, const Tensor& actions) {
  Tape tape;
  const auto bound = net.bind(tape, false);
  Var pred = net.forward(tape, bound, config, tape.constant(obs));
  return tape.value(policy_loss(tape, pred, actions))[0];
}

enum class ConfigSampling { kUniform, kRegularizerBiased };

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double alpha = 0.1;
  double beta = 0.1;
  /// Activation quantizers follow an EMA for this many steps, then freeze.
  std::size_t quant_warmup_steps = 200;
  /// Uniformly sampled configs per step, in addition to largest and smallest.
  std::size_t random_configs = 2;
  ConfigSampling sampling = ConfigSampling::kUniform;
  /// Candidates drawn per random slot in regularizer-biased sampling.
  std::size_t bias_candidates = 8;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 1.0;

  void validate() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw UserError("alpha and beta must be nonnegative");
    if (!(lr > 0.0)) throw UserError("learning rate must be positive");
    if (batch_size == 0) throw UserError("batch size must be positive");
  }
};

/// One row of the metrics stream.
struct MetricRow {
  std::int64_t step = 0;
  std::string device_id;
  std::uint64_t config_hash = 0;
  double policy_loss = 0.0;
  double reg_latency = 0.0;
  double reg_memory = 0.0;
  double base_loss = 0.0;
  /// Distillation columns; empty during plain training.
  std::optional<std::size_t> horizon;
  std::optional<double> opd_loss;
};

/// L_policy + alpha * R_lat + beta * R_mem
inline double base_loss(double policy, double reg_lat, double reg_mem, double alpha, double beta) {
  return policy + alpha * reg_lat + beta * reg_mem;
}

/// Calibrates every activation quantizer the space can reach, using the largest
/// architecture at each activation bit-width.
inline void calibrate_all(Supernet& net, const Tensor& obs) {
  const SearchSpace& space = net.space();
  for (int ab : space.act_bits) {
    if (ab == kPassThroughBits) continue;
    SubnetConfig c = largest_config(space);
    for (auto& l : c.layers) {
      l.act_bits = ab;
      l.weight_bits = kPassThroughBits;
    }
    Tape tape;
    const auto bound = net.bind(tape, false);
    net.forward(tape, bound, c, tape.constant(obs), ForwardOptions{true, nullptr});
  }
}

/// Extra per-config loss term added to the policy loss before backward (used by distillation).
struct ExtraLoss {
  Var loss;
  double value = 0.0;
  std::size_t horizon = 0;
};
using ExtraLossFn =
    std::function<std::optional<ExtraLoss>(Tape&, const std::vector<Var>&, const SubnetConfig&, bool is_largest)>;

class Trainer {
 public:
  Trainer(Supernet& net, std::vector<DeviceProfile> devices, Dataset data, TrainConfig config, std::uint64_t seed)
      : net_(net), devices_(std::move(devices)), data_(std::move(data)), config_(config), rng_(seed),
        adam_(AdamConfig{config.lr, 0.9, 0.999, 1e-8}) {
    config_.validate();
    if (devices_.empty()) throw UserError("training needs at least one device profile");
    for (const auto& d : devices_) validate_profile(d, net_.space());
    if (data_.size() == 0) throw UserError("training needs demonstrations");
    if (data_.obs_dim() != net_.arch().obs_dim || data_.act_dim() != net_.arch().act_dim) {
      throw UserError("demo dimensions do not match the supernet");
    }
  }

  Supernet& net() { return net_; }
  Adam& optimizer() { return adam_; }
  Rng& rng() { return rng_; }
  std::int64_t steps_done() const { return step_; }
  void set_steps_done(std::int64_t s) { step_ = s; }
  const TrainConfig& config() const { return config_; }
  const std::vector<DeviceProfile>& devices() const { return devices_; }

  /// Calibrates activation quantizers on one batch without an optimizer step.
  void calibrate_initial() {
    calibrate_all(net_, data_.sample(config_.batch_size, rng_).first);
  }

  /// Sandwich set: largest, smallest, then `random_configs` sampled configs.
  std::vector<SubnetConfig> sample_configs(const DeviceProfile& device) {
    const SearchSpace& space = net_.space();
    std::vector<SubnetConfig> out{largest_config(space), smallest_config(space)};
    for (std::size_t i = 0; i < config_.random_configs; ++i) {
      if (config_.sampling == ConfigSampling::kUniform) {
        out.push_back(sample_uniform(space, rng_));
        continue;
      }
      std::vector<SubnetConfig> cand;
      std::vector<double> weight;
      double total = 0.0;
      for (std::size_t k = 0; k < std::max<std::size_t>(1, config_.bias_candidates); ++k) {
        cand.push_back(sample_uniform(space, rng_));
        const double r = reg_latency(device, cand.back()) + reg_memory(device, net_.arch(), cand.back());
        weight.push_back(std::exp(-r));
        total += weight.back();
      }
      double u = rng_.uniform() * total;
      std::size_t pick = 0;
      while (pick + 1 < cand.size() && u >= weight[pick]) u -= weight[pick++];
      out.push_back(cand[pick]);
    }
    return out;
  }

  /// One optimizer step over the sandwich set of a uniformly drawn device.
  std::vector<MetricRow> step(const ExtraLossFn& extra = {}) {
    const DeviceProfile& device = devices_[rng_.index(devices_.size())];
    const std::vector<SubnetConfig> configs = sample_configs(device);
    auto [obs, act] = data_.sample(config_.batch_size, rng_);
    const bool calibrating = static_cast<std::size_t>(step_) < config_.quant_warmup_steps;
    if (calibrating && step_ == 0) calibrate_all(net_, obs);

    std::vector<Tensor> grads;
    for (const Tensor& p : net_.params()) grads.emplace_back(p.shape());
    std::vector<MetricRow> rows;
    for (std::size_t ci = 0; ci < configs.size(); ++ci) {
      const SubnetConfig& c = configs[ci];
      Tape tape;
      const auto bound = net_.bind(tape, true);
      Var pred = net_.forward(tape, bound, c, tape.constant(obs), ForwardOptions{calibrating, nullptr});
      Var loss = policy_loss(tape, pred, act);
      MetricRow row;
      row.step = step_;
      row.device_id = device.device_id;
      row.config_hash = config_hash(net_.space(), c);
      row.policy_loss = tape.value(loss)[0];
      row.reg_latency = reg_latency(device, c);
      row.reg_memory = reg_memory(device, net_.arch(), c);
      row.base_loss = base_loss(row.policy_loss, row.reg_latency, row.reg_memory, config_.alpha, config_.beta);
      if (extra) {
        if (auto e = extra(tape, bound, c, ci == 0)) {
          loss = add(tape, loss, e->loss);
          row.opd_loss = e->value;
          row.horizon = e->horizon;
        }
      }
      if (!std::isfinite(row.policy_loss)) throw NumericError("non-finite policy loss at step " + std::to_string(step_));
      tape.backward(loss);
      for (std::size_t i = 0; i < bound.size(); ++i) {
        const Tensor g = tape.grad(bound[i]);
        for (std::size_t j = 0; j < g.size(); ++j) grads[i][j] += g[j];
      }
      rows.push_back(std::move(row));
    }
    apply(grads);
    if (calibrating && static_cast<std::size_t>(step_ + 1) == config_.quant_warmup_steps) net_.freeze_act_quantizers();
    ++step_;
    return rows;
  }

 private:
  void apply(std::vector<Tensor>& grads) {
    double sq = 0.0;
    for (std::size_t i = 0; i < grads.size(); ++i) {
      for (float g : grads[i].data()) {
        if (!std::isfinite(g)) {
          throw NumericError("non-finite gradient in " + net_.param_names()[i] + " at step " + std::to_string(step_));
        }
        sq += static_cast<double>(g) * g;
      }
    }
    const double norm = std::sqrt(sq);
    if (config_.grad_clip > 0.0 && norm > config_.grad_clip) {
      const double f = config_.grad_clip / norm;
      for (auto& g : grads) {
        for (auto& v : g.storage()) v = static_cast<float>(v * f);
      }
    }
    adam_.step(net_.params(), grads);
  }

  Supernet& net_;
  std::vector<DeviceProfile> devices_;
  Dataset data_;
  TrainConfig config_;
  Rng rng_;
  Adam adam_;
  std::int64_t step_ = 0;
};

// ---- Closed-loop evaluation -------------------------------------------------------

/// Maps an observation batch [N, obs_dim] to actions [N, act_dim].
using BatchPolicy = std::function<Tensor(const Tensor&)>;

struct EvalResult {
  std::size_t episodes = 0;
  std::size_t successes = 0;
  double success_rate = 0.0;
  double mean_length = 0.0;
};

/// Runs one episode per seed, all episodes stepped together as one batch.
/// Rows of the policy are independent, so results equal sequential rollouts.
inline EvalResult evaluate(const BatchPolicy& policy, const PushBoxParams& params, const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw UserError("evaluate: n_episodes must be positive");
  params.validate();
  std::vector<PushBoxState> states;
  for (std::uint64_t s : seeds) {
    Rng rng(s);
    states.push_back(reset(params, rng));
  }
  std::vector<std::size_t> length(seeds.size(), 0);
  std::vector<bool> done(seeds.size(), false), success(seeds.size(), false);
  for (std::size_t t = 0; t < params.max_steps; ++t) {
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < states.size(); ++i) {
      if (!done[i]) active.push_back(i);
    }
    if (active.empty()) break;
    Tensor obs({active.size(), kPushObsDim});
    for (std::size_t r = 0; r < active.size(); ++r) {
      const Observation o = observe(states[active[r]]);
      std::copy(o.begin(), o.end(), &obs[r * kPushObsDim]);
    }
    const Tensor act = policy(obs);
    for (std::size_t r = 0; r < active.size(); ++r) {
      const std::size_t i = active[r];
      const Action a{act[r * kPushActDim], act[r * kPushActDim + 1]};
      if (!std::isfinite(a[0]) || !std::isfinite(a[1])) throw NumericError("evaluate: non-finite action");
      states[i] = step(params, states[i], a);
      ++length[i];
      if (is_success(params, states[i])) {
        done[i] = true;
        success[i] = true;
      }
    }
  }
  EvalResult r;
  r.episodes = seeds.size();
  double total = 0.0;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    r.successes += success[i] ? 1 : 0;
    total += static_cast<double>(length[i]);
  }
  r.success_rate = static_cast<double>(r.successes) / static_cast<double>(r.episodes);
  r.mean_length = total / static_cast<double>(r.episodes);
  return r;
}

inline std::vector<std::uint64_t> episode_seeds(std::uint64_t base, std::size_t n) {
  std::vector<std::uint64_t> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = base + i;
  return s;
}

inline EvalResult evaluate(const Supernet& net, const SubnetConfig& config, const PushBoxParams& params,
                           const std::vector<std::uint64_t>& seeds) {
  return evaluate([&](const Tensor& obs) { return net.predict(config, obs); }, params, seeds);
}

inline EvalResult evaluate(const Subnet& net, const PushBoxParams& params, const std::vector<std::uint64_t>& seeds) {
  return evaluate([&](const Tensor& obs) { return net.predict(obs); }, params, seeds);
}

}  // namespace dcqfa
