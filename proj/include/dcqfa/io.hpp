#pragma once

// Run configuration, binary checkpoints and front / report emission.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcqfa/common.hpp"
#include "dcqfa/configspace.hpp"
#include "dcqfa/costmodel.hpp"
#include "dcqfa/env.hpp"
#include "dcqfa/numerics.hpp"
#include "dcqfa/opd.hpp"
#include "dcqfa/quant.hpp"
#include "dcqfa/search.hpp"
#include "dcqfa/supernet.hpp"
#include "dcqfa/trainer.hpp"

namespace dcqfa {

using nlohmann::json;

// ---- Run configuration --------------------------------------------------------------

/// Default run configuration. Every accepted key appears here; loading rejects others.
inline json default_run_config() {
  const PushBoxParams env;
  const TrainConfig train;
  const OpdConfig opd;
  const SearchParams search;
  const SearchSpace space;
  return json{
      {"seed", 0},
      {"out", "run"},
      {"checkpoint", ""},
      {"demos", {{"episodes", 50}, {"val_episodes", 20}, {"action_noise", 0.3}, {"path", ""}, {"val_path", ""}}},
      {"env",
       {{"dt", env.dt},
        {"agent_radius", env.agent_radius},
        {"box_radius", env.box_radius},
        {"success_threshold", env.success_threshold},
        {"max_steps", env.max_steps},
        {"spawn_margin", env.spawn_margin},
        {"min_goal_distance", env.min_goal_distance}}},
      {"space",
       {{"num_layers", space.num_layers},
        {"mlp_ratios", space.mlp_ratios},
        {"head_ratios", space.head_ratios},
        {"weight_bits", space.weight_bits},
        {"act_bits", space.act_bits},
        {"min_depth", space.min_depth}}},
      {"model", {{"d_model", 32}, {"max_heads", 4}, {"tokens", 3}, {"act_decay", 0.99}}},
      {"train",
       {{"steps", train.steps},
        {"batch_size", train.batch_size},
        {"lr", train.lr},
        {"alpha", train.alpha},
        {"beta", train.beta},
        {"quant_warmup_steps", train.quant_warmup_steps},
        {"random_configs", train.random_configs},
        {"sampling", "uniform"},
        {"bias_candidates", train.bias_candidates},
        {"grad_clip", train.grad_clip}}},
      {"opd",
       {{"gamma", opd.gamma},
        {"k_min", opd.k_min},
        {"k_max", opd.k_max},
        {"weighting", "uniform"},
        {"discount", opd.discount},
        {"steps", opd.steps},
        {"envs", opd.envs}}},
      {"search",
       {{"population", search.population},
        {"generations", search.generations},
        {"mutation_rate", search.mutation_rate},
        {"crossover_rate", search.crossover_rate},
        {"objective", "latency"},
        {"selection", "min-loss"}}},
      {"eval", {{"episodes", 100}, {"seed_base", 1000000}, {"config", "largest"}}},
      {"devices",
       {{"profiles", json::array()},
        {"synthetic",
         json::array({json{{"device_id", "edge-a"},
                           {"latency_scale", 0.05},
                           {"latency_offset", 0.02},
                           {"base_latency_ms", 0.1},
                           {"act_scale", 8.0},
                           {"latency_budget_fraction", 0.5},
                           {"memory_budget_fraction", 0.15}},
                      json{{"device_id", "edge-b"},
                           {"latency_scale", 0.08},
                           {"latency_offset", 0.01},
                           {"base_latency_ms", 0.2},
                           {"act_scale", 8.0},
                           {"latency_budget_fraction", 0.35},
                           {"memory_budget_fraction", 0.15}}})}}}};
}

namespace detail {

inline void check_keys(const json& defaults, const json& given, const std::string& path) {
  if (!given.is_object()) throw UserError("config: '" + path + "' must be an object");
  for (const auto& [key, value] : given.items()) {
    const std::string p = path.empty() ? key : path + "." + key;
    if (!defaults.contains(key)) throw UserError("config: unknown key '" + p + "'");
    const json& d = defaults.at(key);
    if (d.is_object()) {
      check_keys(d, value, p);
    } else if (d.is_number() && !value.is_number()) {
      throw UserError("config: '" + p + "' must be a number");
    } else if (d.is_string() && !value.is_string()) {
      throw UserError("config: '" + p + "' must be a string");
    } else if (d.is_array() && !value.is_array()) {
      throw UserError("config: '" + p + "' must be an array");
    }
  }
}

}  // namespace detail

/// Overlays `--set a.b=value` onto `config`. The value is parsed as JSON when it
/// can be and taken as a string otherwise.
inline void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UserError("--set expects KEY=VALUE, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  const json defaults = default_run_config();
  const json* d = &defaults;
  json* node = &config;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!d->is_object() || !d->contains(part)) throw UserError("--set: unknown key '" + key + "'");
    d = &d->at(part);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
  detail::check_keys(defaults, config, "");
}

/// Defaults overlaid with the file at `path` (if non-empty).
inline json load_run_config(const std::string& path) {
  json config = default_run_config();
  if (path.empty()) return config;
  std::ifstream in(path);
  if (!in) throw UserError("cannot open config '" + path + "'");
  json given = json::parse(in, nullptr, false);
  if (given.is_discarded()) throw UserError("config '" + path + "' is not valid JSON");
  detail::check_keys(config, given, "");
  config.merge_patch(given);
  return config;
}

inline PushBoxParams env_params(const json& c) {
  const json& e = c.at("env");
  PushBoxParams p;
  p.dt = e.at("dt").get<double>();
  p.agent_radius = e.at("agent_radius").get<double>();
  p.box_radius = e.at("box_radius").get<double>();
  p.success_threshold = e.at("success_threshold").get<double>();
  p.max_steps = e.at("max_steps").get<std::size_t>();
  p.spawn_margin = e.at("spawn_margin").get<double>();
  p.min_goal_distance = e.at("min_goal_distance").get<double>();
  p.validate();
  return p;
}

inline json space_to_json(const SearchSpace& s) {
  return json{{"num_layers", s.num_layers}, {"mlp_ratios", s.mlp_ratios}, {"head_ratios", s.head_ratios},
              {"weight_bits", s.weight_bits}, {"act_bits", s.act_bits},   {"min_depth", s.min_depth}};
}

inline SearchSpace space_from_json(const json& j) {
  SearchSpace s;
  s.num_layers = j.at("num_layers").get<std::size_t>();
  s.mlp_ratios = j.at("mlp_ratios").get<std::vector<double>>();
  s.head_ratios = j.at("head_ratios").get<std::vector<double>>();
  s.weight_bits = j.at("weight_bits").get<std::vector<int>>();
  s.act_bits = j.at("act_bits").get<std::vector<int>>();
  s.min_depth = j.at("min_depth").get<std::size_t>();
  s.validate();
  return s;
}

inline Architecture architecture(const json& c, const SearchSpace& space) {
  const json& m = c.at("model");
  Architecture a = Architecture::for_space(space, m.at("d_model").get<std::size_t>(), m.at("max_heads").get<std::size_t>());
  a.tokens = m.at("tokens").get<std::size_t>();
  a.validate();
  return a;
}

inline TrainConfig train_config(const json& c) {
  const json& t = c.at("train");
  TrainConfig cfg;
  cfg.steps = t.at("steps").get<std::size_t>();
  cfg.batch_size = t.at("batch_size").get<std::size_t>();
  cfg.lr = t.at("lr").get<double>();
  cfg.alpha = t.at("alpha").get<double>();
  cfg.beta = t.at("beta").get<double>();
  cfg.quant_warmup_steps = t.at("quant_warmup_steps").get<std::size_t>();
  cfg.random_configs = t.at("random_configs").get<std::size_t>();
  const std::string s = t.at("sampling").get<std::string>();
  if (s == "uniform") {
    cfg.sampling = ConfigSampling::kUniform;
  } else if (s == "reg_biased") {
    cfg.sampling = ConfigSampling::kRegularizerBiased;
  } else {
    throw UserError("train.sampling must be 'uniform' or 'reg_biased'");
  }
  cfg.bias_candidates = t.at("bias_candidates").get<std::size_t>();
  cfg.grad_clip = t.at("grad_clip").get<double>();
  cfg.validate();
  return cfg;
}

inline OpdConfig opd_config(const json& c) {
  const json& o = c.at("opd");
  OpdConfig cfg;
  cfg.gamma = o.at("gamma").get<double>();
  cfg.k_min = o.at("k_min").get<std::size_t>();
  cfg.k_max = o.at("k_max").get<std::size_t>();
  const std::string w = o.at("weighting").get<std::string>();
  if (w == "uniform") {
    cfg.weighting = StepWeighting::kUniform;
  } else if (w == "discount") {
    cfg.weighting = StepWeighting::kDiscount;
  } else {
    throw UserError("opd.weighting must be 'uniform' or 'discount'");
  }
  cfg.discount = o.at("discount").get<double>();
  cfg.steps = o.at("steps").get<std::size_t>();
  cfg.envs = o.at("envs").get<std::size_t>();
  cfg.validate();
  return cfg;
}

inline SearchParams search_params(const json& c) {
  const json& s = c.at("search");
  SearchParams p;
  p.population = s.at("population").get<std::size_t>();
  p.generations = s.at("generations").get<std::size_t>();
  p.mutation_rate = s.at("mutation_rate").get<double>();
  p.crossover_rate = s.at("crossover_rate").get<double>();
  const std::string o = s.at("objective").get<std::string>();
  if (o == "latency") {
    p.objective = SearchObjective::kLatency;
  } else if (o == "params") {
    p.objective = SearchObjective::kParams;
  } else {
    throw UserError("search.objective must be 'latency' or 'params'");
  }
  p.validate();
  return p;
}

inline SelectionRule selection_rule(const json& c) {
  const std::string r = c.at("search").at("selection").get<std::string>();
  if (r == "min-loss") return SelectionRule::kMinLoss;
  if (r == "knee") return SelectionRule::kKnee;
  throw UserError("search.selection must be 'min-loss' or 'knee'");
}

inline SyntheticDevice synthetic_device(const json& j) {
  static const json keys = default_run_config().at("devices").at("synthetic").at(0);
  detail::check_keys(keys, j, "devices.synthetic[]");
  SyntheticDevice d;
  d.device_id = j.value("device_id", std::string{});
  if (d.device_id.empty()) throw UserError("synthetic device needs a device_id");
  d.latency_scale = j.value("latency_scale", d.latency_scale);
  d.latency_offset = j.value("latency_offset", d.latency_offset);
  d.base_latency_ms = j.value("base_latency_ms", d.base_latency_ms);
  d.act_scale = j.value("act_scale", d.act_scale);
  d.latency_budget_fraction = j.value("latency_budget_fraction", d.latency_budget_fraction);
  d.memory_budget_fraction = j.value("memory_budget_fraction", d.memory_budget_fraction);
  return d;
}

// ---- Binary helpers -----------------------------------------------------------------

class BinaryWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f32(float f) {
    std::uint32_t b;
    std::memcpy(&b, &f, 4);
    u32(b);
  }
  void f64(double f) {
    std::uint64_t b;
    std::memcpy(&b, &f, 8);
    u64(b);
  }
  void str(const std::string& s) {
    u64(s.size());
    buf_.append(s);
  }
  void raw(const std::string& s) { buf_.append(s); }
  void tensor(const Tensor& t) {
    u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) u64(d);
    for (float f : t.data()) f32(f);
  }
  void spec(const QuantizerSpec& s) {
    u32(static_cast<std::uint32_t>(s.bits));
    u8(s.granularity == Granularity::kPerTensor ? 0 : 1);
    u64(s.scales.size());
    for (float f : s.scales) f32(f);
    f64(s.decay);
    f64(s.ema_maxabs);
    i64(s.updates);
    u8(s.frozen ? 1 : 0);
    u8(s.degenerate ? 1 : 0);
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::string data) : buf_(std::move(data)) {}

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  float f32() {
    const std::uint32_t b = u32();
    float f;
    std::memcpy(&f, &b, 4);
    return f;
  }
  double f64() {
    const std::uint64_t b = u64();
    double f;
    std::memcpy(&f, &b, 8);
    return f;
  }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Tensor tensor() {
    const std::uint32_t rank = u32();
    if (rank == 0 || rank > 4) throw UserError("checkpoint: bad tensor rank");
    Shape shape(rank);
    std::uint64_t total = 1;
    for (auto& d : shape) {
      d = u64();
      if (d == 0 || d > (1u << 26)) throw UserError("checkpoint: bad tensor extent");
      total *= d;
    }
    need(total * 4);
    std::vector<float> v(total);
    for (auto& f : v) f = f32();
    return Tensor(shape, std::move(v));
  }
  QuantizerSpec spec() {
    QuantizerSpec s;
    s.bits = static_cast<int>(u32());
    if (!valid_bits(s.bits)) throw UserError("checkpoint: bad quantizer bit-width");
    s.granularity = u8() == 0 ? Granularity::kPerTensor : Granularity::kPerOutputChannel;
    const std::uint64_t n = u64();
    need(n * 4);
    s.scales.resize(n);
    for (auto& f : s.scales) f = f32();
    s.decay = f64();
    s.ema_maxabs = f64();
    s.updates = i64();
    s.frozen = u8() != 0;
    s.degenerate = u8() != 0;
    return s;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > buf_.size() - pos_) throw UserError("checkpoint: truncated file");
  }
  std::string buf_;
  std::size_t pos_ = 0;
};

inline void write_file(const std::string& path, const std::string& bytes) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UserError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw UserError("write failed for '" + path + "'");
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---- Checkpoints --------------------------------------------------------------------

inline constexpr char kCheckpointMagic[4] = {'D', 'C', 'Q', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointKind : std::uint32_t { kSupernet = 1, kSubnet = 2 };

inline json arch_to_json(const Architecture& a) {
  return json{{"obs_dim", a.obs_dim},     {"act_dim", a.act_dim},       {"tokens", a.tokens},
              {"d_model", a.d_model},     {"max_heads", a.max_heads},   {"num_layers", a.num_layers},
              {"max_mlp_ratio", a.max_mlp_ratio}, {"ln_eps", a.ln_eps}};
}

inline Architecture arch_from_json(const json& j) {
  Architecture a;
  a.obs_dim = j.at("obs_dim").get<std::size_t>();
  a.act_dim = j.at("act_dim").get<std::size_t>();
  a.tokens = j.at("tokens").get<std::size_t>();
  a.d_model = j.at("d_model").get<std::size_t>();
  a.max_heads = j.at("max_heads").get<std::size_t>();
  a.num_layers = j.at("num_layers").get<std::size_t>();
  a.max_mlp_ratio = j.at("max_mlp_ratio").get<double>();
  a.ln_eps = j.at("ln_eps").get<double>();
  a.validate();
  return a;
}

/// Training state stored beside the supernet weights.
struct TrainingState {
  std::int64_t train_steps = 0;
  std::int64_t distill_steps = 0;
  std::int64_t adam_steps = 0;
  std::vector<Tensor> adam_m;
  std::vector<Tensor> adam_v;
  std::string rng_state;
};

struct SupernetCheckpoint {
  Supernet net;
  TrainingState state;
};

inline std::string encode_supernet(const Supernet& net, const TrainingState& st) {
  BinaryWriter w;
  w.raw(std::string(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(CheckpointKind::kSupernet));
  w.u64(net.space().fingerprint());
  w.u64(net.fingerprint());
  w.str(space_to_json(net.space()).dump());
  w.str(arch_to_json(net.arch()).dump());
  w.f64(net.act_decay());
  w.u64(net.params().size());
  for (std::size_t i = 0; i < net.params().size(); ++i) {
    w.str(net.param_names()[i]);
    w.tensor(net.params()[i]);
  }
  w.u64(net.act_quantizers().size());
  for (const auto& [key, spec] : net.act_quantizers()) {
    w.u64(key.layer);
    w.u32(static_cast<std::uint32_t>(key.site));
    w.u32(static_cast<std::uint32_t>(key.bits));
    w.spec(spec);
  }
  w.i64(st.train_steps);
  w.i64(st.distill_steps);
  w.i64(st.adam_steps);
  w.u64(st.adam_m.size());
  for (std::size_t i = 0; i < st.adam_m.size(); ++i) {
    w.tensor(st.adam_m[i]);
    w.tensor(st.adam_v[i]);
  }
  w.str(st.rng_state);
  return w.bytes();
}

namespace detail {

inline CheckpointKind read_header(BinaryReader& r) {
  if (r.raw(4) != std::string(kCheckpointMagic, 4)) throw UserError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw UserError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t kind = r.u32();
  if (kind != 1 && kind != 2) throw UserError("checkpoint: unknown kind");
  return static_cast<CheckpointKind>(kind);
}

inline json parse_embedded(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw UserError("checkpoint: corrupt metadata");
  return j;
}

}  // namespace detail

/// Decodes a supernet checkpoint; if `expected_space` is given its fingerprint must match.
inline SupernetCheckpoint decode_supernet(const std::string& bytes, const SearchSpace* expected_space = nullptr) {
  BinaryReader r(bytes);
  if (detail::read_header(r) != CheckpointKind::kSupernet) throw UserError("checkpoint: not a supernet checkpoint");
  const std::uint64_t space_fp = r.u64();
  const std::uint64_t net_fp = r.u64();
  if (expected_space && expected_space->fingerprint() != space_fp) {
    throw UserError("checkpoint: search-space fingerprint mismatch (checkpoint " + hex64(space_fp) + ", config " +
                    hex64(expected_space->fingerprint()) + ")");
  }
  const SearchSpace space = space_from_json(detail::parse_embedded(r.str()));
  const Architecture arch = arch_from_json(detail::parse_embedded(r.str()));
  const double decay = r.f64();
  SupernetCheckpoint ck{Supernet(arch, space, 0, decay), {}};
  if (space.fingerprint() != space_fp || ck.net.fingerprint() != net_fp) throw UserError("checkpoint: fingerprint mismatch");
  const std::uint64_t count = r.u64();
  if (count != ck.net.params().size()) throw UserError("checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    if (name != ck.net.param_names()[i]) throw UserError("checkpoint: unexpected parameter '" + name + "'");
    Tensor t = r.tensor();
    if (t.shape() != ck.net.params()[i].shape()) throw UserError("checkpoint: shape mismatch for '" + name + "'");
    ck.net.params()[i] = std::move(t);
  }
  const std::uint64_t nq = r.u64();
  for (std::uint64_t i = 0; i < nq; ++i) {
    ActKey key;
    key.layer = r.u64();
    key.site = static_cast<ActSite>(r.u32());
    key.bits = static_cast<int>(r.u32());
    if (key.layer >= arch.num_layers || static_cast<std::size_t>(key.site) >= kActSites) {
      throw UserError("checkpoint: bad quantizer key");
    }
    ck.net.act_quantizers()[key] = r.spec();
  }
  ck.state.train_steps = r.i64();
  ck.state.distill_steps = r.i64();
  ck.state.adam_steps = r.i64();
  const std::uint64_t nm = r.u64();
  if (nm != 0 && nm != count) throw UserError("checkpoint: optimizer state size mismatch");
  for (std::uint64_t i = 0; i < nm; ++i) {
    ck.state.adam_m.push_back(r.tensor());
    ck.state.adam_v.push_back(r.tensor());
  }
  ck.state.rng_state = r.str();
  if (!r.at_end()) throw UserError("checkpoint: trailing bytes");
  return ck;
}

inline std::string encode_subnet(const Subnet& s) {
  BinaryWriter w;
  w.raw(std::string(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(CheckpointKind::kSubnet));
  w.str(arch_to_json(s.arch()).dump());
  w.u64(s.config().layers.size());
  for (const auto& l : s.config().layers) {
    w.u8(l.keep ? 1 : 0);
    w.f64(l.mlp_ratio);
    w.f64(l.head_ratio);
    w.u32(static_cast<std::uint32_t>(l.weight_bits));
    w.u32(static_cast<std::uint32_t>(l.act_bits));
  }
  for (const Tensor& t : s.base()) w.tensor(t);
  w.u64(s.layers().size());
  for (const auto& l : s.layers()) {
    w.u64(l.source_layer);
    for (const Tensor& t : l.params) w.tensor(t);
    w.u64(l.act.size());
    for (const auto& q : l.act) w.spec(q);
  }
  return w.bytes();
}

inline Subnet decode_subnet(const std::string& bytes) {
  BinaryReader r(bytes);
  if (detail::read_header(r) != CheckpointKind::kSubnet) throw UserError("checkpoint: not a subnet checkpoint");
  const Architecture arch = arch_from_json(detail::parse_embedded(r.str()));
  SubnetConfig config;
  const std::uint64_t nl = r.u64();
  if (nl != arch.num_layers) throw UserError("checkpoint: subnet depth mismatch");
  for (std::uint64_t i = 0; i < nl; ++i) {
    LayerChoice l;
    l.keep = r.u8() != 0;
    l.mlp_ratio = r.f64();
    l.head_ratio = r.f64();
    l.weight_bits = static_cast<int>(r.u32());
    l.act_bits = static_cast<int>(r.u32());
    if (!valid_bits(l.weight_bits) || !valid_bits(l.act_bits)) throw UserError("checkpoint: bad bit-width");
    config.layers.push_back(l);
  }
  Subnet s(arch, config);
  for (Tensor& t : s.base()) t = r.tensor();
  const std::uint64_t kept = r.u64();
  if (kept != config.active_layers()) throw UserError("checkpoint: kept-layer count mismatch");
  for (std::uint64_t i = 0; i < kept; ++i) {
    Subnet::Layer layer;
    layer.source_layer = r.u64();
    if (layer.source_layer >= nl || !config.layers[layer.source_layer].keep) {
      throw UserError("checkpoint: bad layer index");
    }
    layer.choice = config.layers[layer.source_layer];
    layer.heads = arch.heads_for(layer.choice.head_ratio);
    layer.mlp_width = arch.mlp_width_for(layer.choice.mlp_ratio);
    for (Tensor& t : layer.params) t = r.tensor();
    const std::uint64_t nq = r.u64();
    if (nq != 0 && nq != kActSites) throw UserError("checkpoint: bad quantizer count");
    for (std::uint64_t q = 0; q < nq; ++q) layer.act.push_back(r.spec());
    s.layers().push_back(std::move(layer));
  }
  if (!r.at_end()) throw UserError("checkpoint: trailing bytes");
  return s;
}

inline TrainingState capture_state(Trainer& trainer, std::int64_t distill_steps) {
  TrainingState st;
  st.train_steps = trainer.steps_done();
  st.distill_steps = distill_steps;
  st.adam_steps = trainer.optimizer().steps();
  st.adam_m = trainer.optimizer().first_moments();
  st.adam_v = trainer.optimizer().second_moments();
  st.rng_state = trainer.rng().serialize();
  return st;
}

inline void restore_state(Trainer& trainer, const TrainingState& st) {
  trainer.set_steps_done(st.train_steps);
  trainer.optimizer().restore(st.adam_steps, st.adam_m, st.adam_v);
  if (!st.rng_state.empty()) trainer.rng().deserialize(st.rng_state);
}

// ---- Fronts and reports -------------------------------------------------------------

inline json config_to_json(const SubnetConfig& c) {
  json layers = json::array();
  for (const auto& l : c.layers) {
    layers.push_back(json{{"keep", l.keep},
                          {"mlp_ratio", l.mlp_ratio},
                          {"head_ratio", l.head_ratio},
                          {"weight_bits", l.weight_bits},
                          {"act_bits", l.act_bits}});
  }
  return layers;
}

inline std::string front_csv(const ParetoFront& f) {
  std::ostringstream os;
  os << "config_id,genome,latency_ms,memory_bytes,val_loss,feasible,rank\n";
  for (std::size_t i = 0; i < f.members.size(); ++i) {
    const Individual& m = f.members[i];
    os << i << ',' << genome_string(m.genome) << ',' << format_double(m.latency_ms) << ','
       << format_double(m.memory_bytes) << ',' << format_double(m.objectives[0]) << ','
       << (m.feasible ? 1 : 0) << ',' << m.rank << '\n';
  }
  return os.str();
}

inline json individual_to_json(const SearchSpace& space, const Individual& m) {
  return json{{"genome", genome_string(m.genome)},
              {"layers", config_to_json(decode(space, m.genome))},
              {"val_loss", m.objectives[0]},
              {"objective2", m.objectives[1]},
              {"latency_ms", m.latency_ms},
              {"memory_bytes", m.memory_bytes},
              {"feasible", m.feasible},
              {"violation", m.violation},
              {"rank", m.rank}};
}

inline json front_to_json(const SearchSpace& space, const ParetoFront& f, std::size_t selected) {
  json members = json::array();
  for (std::size_t i = 0; i < f.members.size(); ++i) {
    json m = individual_to_json(space, f.members[i]);
    m["config_id"] = i;
    members.push_back(std::move(m));
  }
  json j{{"device_id", f.device_id}, {"feasible", f.feasible}, {"members", members}};
  if (f.feasible) j["selected"] = selected;
  if (f.min_violation) j["min_violation"] = individual_to_json(space, *f.min_violation);
  return j;
}

inline ParetoFront front_from_json(const json& j) {
  ParetoFront f;
  f.device_id = j.at("device_id").get<std::string>();
  f.feasible = j.at("feasible").get<bool>();
  for (const auto& m : j.at("members")) {
    Individual ind;
    ind.genome = parse_genome(m.at("genome").get<std::string>());
    ind.objectives = {m.at("val_loss").get<double>(), m.at("objective2").get<double>()};
    ind.latency_ms = m.at("latency_ms").get<double>();
    ind.memory_bytes = m.at("memory_bytes").get<double>();
    ind.feasible = m.at("feasible").get<bool>();
    ind.violation = m.at("violation").get<double>();
    ind.rank = m.at("rank").get<std::size_t>();
    f.members.push_back(std::move(ind));
  }
  return f;
}

/// Costs, budgets and headroom of a deployed config.
inline json deployment_report(const DeviceProfile& p, const Architecture& arch, const SubnetConfig& c) {
  const Feasibility f = is_feasible(p, arch, c);
  const double mem_budget = static_cast<double>(p.budget_memory_bytes);
  std::size_t w4 = 0, kept = 0;
  for (const auto& l : c.layers) {
    if (!l.keep) continue;
    ++kept;
    w4 += l.weight_bits == 4 ? 1 : 0;
  }
  return json{{"device_id", p.device_id},
              {"layers", config_to_json(c)},
              {"parameters", parameter_count(arch, c)},
              {"latency_ms", f.latency_ms},
              {"latency_budget_ms", p.budget_latency_ms},
              {"latency_headroom_ms", p.budget_latency_ms - f.latency_ms},
              {"memory_bytes", f.memory_bytes},
              {"memory_budget_bytes", mem_budget},
              {"memory_headroom_bytes", mem_budget - f.memory_bytes},
              {"latency_ok", f.latency_ms <= p.budget_latency_ms},
              {"memory_ok", f.memory_bytes <= mem_budget},
              {"kept_layers", kept},
              {"w4_layers", w4}};
}

inline std::string metrics_header() {
  return "step,device_id,config_hash,L_policy,R_lat,R_mem,L_base,K,L_opd\n";
}

inline std::string metrics_row(const MetricRow& r) {
  std::ostringstream os;
  os << r.step << ',' << r.device_id << ',' << hex64(r.config_hash) << ',' << format_double(r.policy_loss) << ','
     << format_double(r.reg_latency) << ',' << format_double(r.reg_memory) << ',' << format_double(r.base_loss) << ',';
  if (r.horizon) os << *r.horizon;
  os << ',';
  if (r.opd_loss) os << format_double(*r.opd_loss);
  os << '\n';
  return os.str();
}

}  // namespace dcqfa
