#pragma once

// Weight-sharing elastic transformer policy.
//
// An observation [N, obs_dim] is embedded into `tokens` tokens of width d_model,
// passed through L pre-norm blocks and mean-pooled into an action [N, act_dim].
// A subnet reads the first ceil(h * H_max) heads and the first round(r * d_model)
// MLP units of each kept block; skipped blocks are identity. Linear-layer weights
// are fake-quantized per output channel at b^W, linear-layer inputs per tensor at b^A.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "dcqfa/common.hpp"
#include "dcqfa/configspace.hpp"
#include "dcqfa/numerics.hpp"
#include "dcqfa/quant.hpp"

namespace dcqfa {

struct Architecture {
  std::size_t obs_dim = 6;
  std::size_t act_dim = 2;
  std::size_t tokens = 3;
  std::size_t d_model = 32;
  std::size_t max_heads = 4;
  std::size_t num_layers = 4;
  double max_mlp_ratio = 4.0;
  double ln_eps = 1e-5;

  std::size_t head_dim() const { return d_model / max_heads; }
  std::size_t heads_for(double head_ratio) const {
    const double h = std::ceil(head_ratio * static_cast<double>(max_heads) - 1e-9);
    return std::clamp<std::size_t>(static_cast<std::size_t>(h), 1, max_heads);
  }
  std::size_t mlp_width_for(double mlp_ratio) const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(d_model))));
  }
  std::size_t max_mlp_width() const { return mlp_width_for(max_mlp_ratio); }

  void validate() const {
    if (obs_dim == 0 || act_dim == 0 || tokens == 0 || d_model == 0 || max_heads == 0 || num_layers == 0) {
      throw UserError("architecture extents must be positive");
    }
    if (d_model % max_heads != 0) throw UserError("d_model must be divisible by max_heads");
    if (!(ln_eps > 0.0)) throw UserError("layer-norm eps must be positive");
  }

  /// Architecture sized for the largest configuration of `space`.
  static Architecture for_space(const SearchSpace& space, std::size_t d_model = 32, std::size_t max_heads = 4) {
    Architecture a;
    a.num_layers = space.num_layers;
    a.d_model = d_model;
    a.max_heads = max_heads;
    a.max_mlp_ratio = space.mlp_ratios.back();
    return a;
  }

  std::uint64_t fingerprint() const {
    Fnv1a h;
    for (std::size_t v : {obs_dim, act_dim, tokens, d_model, max_heads, num_layers}) h.value(static_cast<std::uint64_t>(v));
    h.value(max_mlp_ratio);
    h.value(ln_eps);
    return h.digest();
  }
};

/// Block parameters in declared order.
enum BlockParam : std::size_t {
  kLn1Gain, kLn1Bias, kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo, kLn2Gain, kLn2Bias, kW1, kB1, kW2, kB2,
  kBlockParamCount
};

/// Inputs of the four quantized linear maps in a block.
enum class ActSite : int { kQkvIn = 0, kProjIn = 1, kFc1In = 2, kFc2In = 3 };
inline constexpr std::size_t kActSites = 4;

/// Per-block weight parameter counts for a kept layer of the given shape.
struct BlockParamCount {
  std::uint64_t matrices = 0;        ///< entries of the four weight matrices (quantized at b^W)
  std::uint64_t output_channels = 0; ///< per-channel scale groups across those matrices
  std::uint64_t vectors = 0;         ///< biases and layer-norm affine parameters (fp32)
  std::uint64_t total() const { return matrices + vectors; }
};

inline BlockParamCount block_param_count(const Architecture& arch, double mlp_ratio, double head_ratio) {
  const std::uint64_t d = arch.d_model;
  const std::uint64_t a = arch.heads_for(head_ratio) * arch.head_dim();
  const std::uint64_t w = arch.mlp_width_for(mlp_ratio);
  BlockParamCount c;
  c.matrices = 3 * d * a + a * d + d * w + w * d;
  c.output_channels = 3 * a + d + w + d;
  c.vectors = 2 * d + 3 * a + d + 2 * d + w + d;
  return c;
}

/// Embedding plus head parameter count (always full precision).
inline std::uint64_t base_param_count(const Architecture& arch) {
  const std::uint64_t d = arch.d_model;
  return arch.obs_dim * arch.tokens * d + arch.tokens * d + 2 * d + d * arch.act_dim + arch.act_dim;
}

inline std::uint64_t parameter_count(const Architecture& arch, const SubnetConfig& config) {
  std::uint64_t n = base_param_count(arch);
  for (const auto& l : config.layers) {
    if (l.keep) n += block_param_count(arch, l.mlp_ratio, l.head_ratio).total();
  }
  return n;
}

namespace detail {

struct BlockVars {
  std::array<Var, kBlockParamCount> p;
};

struct BlockRun {
  std::size_t tokens;
  std::size_t heads;
  std::size_t head_dim;
  int weight_bits;
  double ln_eps;
};

/// Calls back for the activation quantizer of a site: returns the quantized input.
using ActQuantFn = std::function<Var(Tape&, Var, ActSite)>;

inline Var quantized_linear(Tape& tape, Var x, Var w, Var b, int weight_bits, ActSite site,
                            const ActQuantFn& act_quant, SteLinearization* ste) {
  Var xq = act_quant(tape, x, site);
  Var wq = w;
  if (weight_bits != kPassThroughBits) {
    const QuantizerSpec spec = calibrate(QuantizerSpec::weight(weight_bits), tape.value(w));
    wq = fake_quant(tape, w, spec.scales, weight_bits, ste);
  }
  return add_bias(tape, matmul(tape, xq, wq), b);
}

inline Var run_block(Tape& tape, Var x, const BlockVars& v, const BlockRun& r, const ActQuantFn& act_quant,
                     SteLinearization* ste) {
  const AttentionShape shape{r.tokens, r.heads, r.head_dim};
  Var h = layer_norm(tape, x, v.p[kLn1Gain], v.p[kLn1Bias], r.ln_eps);
  // q, k and v share one quantized input.
  Var hq = act_quant(tape, h, ActSite::kQkvIn);
  auto passthrough = [](Tape&, Var in, ActSite) { return in; };
  const ActQuantFn none = passthrough;
  Var q = quantized_linear(tape, hq, v.p[kWq], v.p[kBq], r.weight_bits, ActSite::kQkvIn, none, ste);
  Var k = quantized_linear(tape, hq, v.p[kWk], v.p[kBk], r.weight_bits, ActSite::kQkvIn, none, ste);
  Var val = quantized_linear(tape, hq, v.p[kWv], v.p[kBv], r.weight_bits, ActSite::kQkvIn, none, ste);
  Var probs = softmax(tape, attention_scores(tape, q, k, shape), 1);
  Var mixed = attention_mix(tape, probs, val, shape);
  Var attn = quantized_linear(tape, mixed, v.p[kWo], v.p[kBo], r.weight_bits, ActSite::kProjIn, act_quant, ste);
  x = add(tape, x, attn);
  Var h2 = layer_norm(tape, x, v.p[kLn2Gain], v.p[kLn2Bias], r.ln_eps);
  Var u = quantized_linear(tape, h2, v.p[kW1], v.p[kB1], r.weight_bits, ActSite::kFc1In, act_quant, ste);
  Var y = quantized_linear(tape, gelu(tape, u), v.p[kW2], v.p[kB2], r.weight_bits, ActSite::kFc2In, act_quant, ste);
  return add(tape, x, y);
}

inline Tensor randn(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<float>(rng.normal() * stddev);
  return t;
}

}  // namespace detail

/// Activation quantizer state keyed by (layer, site, bits).
struct ActKey {
  std::size_t layer = 0;
  ActSite site = ActSite::kQkvIn;
  int bits = 8;
  friend auto operator<=>(const ActKey&, const ActKey&) = default;
};

using ActivationBank = std::map<ActKey, QuantizerSpec>;

class Subnet;

struct ForwardOptions {
  /// Update activation quantizers from this batch before quantizing (training warmup).
  bool calibrate = false;
  SteLinearization* ste = nullptr;
};

class Supernet {
 public:
  Supernet() = default;

  Supernet(Architecture arch, SearchSpace space, std::uint64_t seed, double act_decay = 0.99)
      : arch_(arch), space_(std::move(space)), act_decay_(act_decay) {
    arch_.validate();
    space_.validate();
    if (arch_.num_layers != space_.num_layers) throw UserError("architecture and search space disagree on depth");
    if (arch_.max_mlp_width() < arch_.mlp_width_for(space_.mlp_ratios.back())) {
      throw UserError("architecture narrower than the largest MLP ratio");
    }
    init_params(seed);
  }

  const Architecture& arch() const { return arch_; }
  const SearchSpace& space() const { return space_; }
  double act_decay() const { return act_decay_; }

  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }

  ActivationBank& act_quantizers() { return bank_; }
  const ActivationBank& act_quantizers() const { return bank_; }

  std::size_t embed_w_index() const { return 0; }
  std::size_t block_index(std::size_t layer, BlockParam p) const { return 2 + layer * kBlockParamCount + p; }
  std::size_t head_index() const { return 2 + arch_.num_layers * kBlockParamCount; }

  std::uint64_t fingerprint() const {
    Fnv1a h;
    h.value(arch_.fingerprint());
    h.value(space_.fingerprint());
    return h.digest();
  }

  /// Places every parameter on the tape, as trainable leaves or as constants.
  std::vector<Var> bind(Tape& tape, bool trainable) const {
    std::vector<Var> vars;
    vars.reserve(params_.size());
    for (const Tensor& p : params_) vars.push_back(trainable ? tape.leaf(p) : tape.constant(p));
    return vars;
  }

  /// Forward with frozen quantizers. Throws if a needed activation quantizer is uncalibrated.
  Var forward(Tape& tape, const std::vector<Var>& bound, const SubnetConfig& config, Var obs,
              SteLinearization* ste = nullptr) const {
    return run(tape, bound, config, obs, nullptr, ste);
  }

  /// Forward that may update activation quantizer statistics first.
  Var forward(Tape& tape, const std::vector<Var>& bound, const SubnetConfig& config, Var obs,
              const ForwardOptions& options) {
    return run(tape, bound, config, obs, options.calibrate ? &bank_ : nullptr, options.ste);
  }

  /// Inference without gradients.
  Tensor predict(const SubnetConfig& config, const Tensor& obs) const {
    Tape tape;
    const auto bound = bind(tape, false);
    return tape.value(forward(tape, bound, config, tape.constant(obs)));
  }

  bool calibrated_for(const SubnetConfig& config) const {
    for (std::size_t l = 0; l < config.layers.size(); ++l) {
      const auto& c = config.layers[l];
      if (!c.keep || c.act_bits == kPassThroughBits) continue;
      for (std::size_t s = 0; s < kActSites; ++s) {
        auto it = bank_.find(ActKey{l, static_cast<ActSite>(s), c.act_bits});
        if (it == bank_.end() || !it->second.calibrated()) return false;
      }
    }
    return true;
  }

  void freeze_act_quantizers() {
    for (auto& [key, spec] : bank_) spec.frozen = true;
  }

  Subnet extract(const SubnetConfig& config) const;

 private:
  void init_params(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t d = arch_.d_model;
    const std::size_t a = arch_.max_heads * arch_.head_dim();
    const std::size_t w = arch_.max_mlp_width();
    const double depth_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(arch_.num_layers));
    auto add = [&](std::string name, Tensor t) {
      names_.push_back(std::move(name));
      params_.push_back(std::move(t));
    };
    add("embed.w", detail::randn({arch_.obs_dim, arch_.tokens * d}, 1.0 / std::sqrt(static_cast<double>(arch_.obs_dim)), rng));
    add("embed.b", detail::randn({arch_.tokens * d}, 0.5, rng));
    for (std::size_t l = 0; l < arch_.num_layers; ++l) {
      const std::string p = "block" + std::to_string(l) + ".";
      const double sd = 1.0 / std::sqrt(static_cast<double>(d));
      add(p + "ln1.g", Tensor({d}, 1.0f));
      add(p + "ln1.b", Tensor({d}));
      add(p + "wq", detail::randn({d, a}, sd, rng));
      add(p + "bq", Tensor({a}));
      add(p + "wk", detail::randn({d, a}, sd, rng));
      add(p + "bk", Tensor({a}));
      add(p + "wv", detail::randn({d, a}, sd, rng));
      add(p + "bv", Tensor({a}));
      add(p + "wo", detail::randn({a, d}, depth_scale / std::sqrt(static_cast<double>(a)), rng));
      add(p + "bo", Tensor({d}));
      add(p + "ln2.g", Tensor({d}, 1.0f));
      add(p + "ln2.b", Tensor({d}));
      add(p + "w1", detail::randn({d, w}, sd, rng));
      add(p + "b1", Tensor({w}));
      add(p + "w2", detail::randn({w, d}, depth_scale / std::sqrt(static_cast<double>(w)), rng));
      add(p + "b2", Tensor({d}));
    }
    add("head.ln.g", Tensor({d}, 1.0f));
    add("head.ln.b", Tensor({d}));
    add("head.w", detail::randn({d, arch_.act_dim}, 0.1 / std::sqrt(static_cast<double>(d)), rng));
    add("head.b", Tensor({arch_.act_dim}));
  }

  Var run(Tape& tape, const std::vector<Var>& bound, const SubnetConfig& config, Var obs, ActivationBank* calibrate,
          SteLinearization* ste) const {
    check_forwardable(space_, config);
    if (bound.size() != params_.size()) throw std::invalid_argument("forward: parameter binding size mismatch");
    const Tensor& o = tape.value(obs);
    if (o.rank() != 2 || o.dim(1) != arch_.obs_dim) {
      throw UserError("observation batch must be [N, " + std::to_string(arch_.obs_dim) + "], got " +
                      shape_string(o.shape()));
    }
    const std::size_t n = o.dim(0);
    const std::size_t d = arch_.d_model;
    Var x = add_bias(tape, matmul(tape, obs, bound[0]), bound[1]);
    x = reshape(tape, x, {n * arch_.tokens, d});
    for (std::size_t l = 0; l < arch_.num_layers; ++l) {
      const LayerChoice& c = config.layers[l];
      if (!c.keep) continue;
      const std::size_t heads = arch_.heads_for(c.head_ratio);
      const std::size_t att = heads * arch_.head_dim();
      const std::size_t width = arch_.mlp_width_for(c.mlp_ratio);
      detail::BlockVars v;
      for (std::size_t i = 0; i < kBlockParamCount; ++i) v.p[i] = bound[block_index(l, static_cast<BlockParam>(i))];
      for (BlockParam p : {kWq, kWk, kWv}) v.p[p] = slice_cols(tape, v.p[p], att);
      for (BlockParam p : {kBq, kBk, kBv}) v.p[p] = slice_rows(tape, v.p[p], att);
      v.p[kWo] = slice_rows(tape, v.p[kWo], att);
      v.p[kW1] = slice_cols(tape, v.p[kW1], width);
      v.p[kB1] = slice_rows(tape, v.p[kB1], width);
      v.p[kW2] = slice_rows(tape, v.p[kW2], width);
      const int abits = c.act_bits;
      const detail::ActQuantFn act = [this, l, abits, calibrate, ste](Tape& t, Var in, ActSite site) -> Var {
        if (abits == kPassThroughBits) return in;
        const ActKey key{l, site, abits};
        if (calibrate) {
          auto it = calibrate->find(key);
          if (it == calibrate->end()) it = calibrate->emplace(key, QuantizerSpec::activation(abits, act_decay_)).first;
          it->second = dcqfa::calibrate(it->second, t.value(in));
          return fake_quant(t, in, it->second, ste);
        }
        auto it = bank_.find(key);
        if (it == bank_.end() || !it->second.calibrated()) {
          throw UserError("uncalibrated activation quantizer: layer " + std::to_string(l) + " site " +
                          std::to_string(static_cast<int>(site)) + " bits " + std::to_string(abits));
        }
        return fake_quant(t, in, it->second, ste);
      };
      x = detail::run_block(tape, x, v, detail::BlockRun{arch_.tokens, heads, arch_.head_dim(), c.weight_bits, arch_.ln_eps},
                            act, ste);
    }
    const std::size_t h = head_index();
    x = layer_norm(tape, x, bound[h], bound[h + 1], arch_.ln_eps);
    x = mean_pool(tape, x, arch_.tokens);
    return add_bias(tape, matmul(tape, x, bound[h + 2]), bound[h + 3]);
  }

  Architecture arch_;
  SearchSpace space_;
  double act_decay_ = 0.99;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  ActivationBank bank_;
};

/// A standalone network holding only the slices and quantizers one config uses.
class Subnet {
 public:
  struct Layer {
    std::size_t source_layer = 0;
    LayerChoice choice;
    std::size_t heads = 0;
    std::size_t mlp_width = 0;
    std::array<Tensor, kBlockParamCount> params;
    /// Activation quantizers per site; empty when act_bits is 16.
    std::vector<QuantizerSpec> act;
  };

  Subnet() = default;
  Subnet(Architecture arch, SubnetConfig config) : arch_(arch), config_(std::move(config)) {}

  const Architecture& arch() const { return arch_; }
  const SubnetConfig& config() const { return config_; }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }
  /// embed.w, embed.b, head.ln.g, head.ln.b, head.w, head.b
  std::array<Tensor, 6>& base() { return base_; }
  const std::array<Tensor, 6>& base() const { return base_; }

  std::uint64_t parameter_count() const {
    std::uint64_t n = 0;
    for (const Tensor& t : base_) n += t.size();
    for (const Layer& l : layers_) {
      for (const Tensor& t : l.params) n += t.size();
    }
    return n;
  }

  Var forward(Tape& tape, Var obs) const {
    const Tensor& o = tape.value(obs);
    if (o.rank() != 2 || o.dim(1) != arch_.obs_dim) throw UserError("subnet: observation shape mismatch");
    const std::size_t n = o.dim(0);
    Var x = add_bias(tape, matmul(tape, obs, tape.constant(base_[0])), tape.constant(base_[1]));
    x = reshape(tape, x, {n * arch_.tokens, arch_.d_model});
    for (const Layer& layer : layers_) {
      detail::BlockVars v;
      for (std::size_t i = 0; i < kBlockParamCount; ++i) v.p[i] = tape.constant(layer.params[i]);
      const detail::ActQuantFn act = [&layer](Tape& t, Var in, ActSite site) -> Var {
        if (layer.act.empty()) return in;
        return fake_quant(t, in, layer.act[static_cast<std::size_t>(site)]);
      };
      x = detail::run_block(tape, x, v,
                            detail::BlockRun{arch_.tokens, layer.heads, arch_.head_dim(), layer.choice.weight_bits,
                                             arch_.ln_eps},
                            act, nullptr);
    }
    x = layer_norm(tape, x, tape.constant(base_[2]), tape.constant(base_[3]), arch_.ln_eps);
    x = mean_pool(tape, x, arch_.tokens);
    return add_bias(tape, matmul(tape, x, tape.constant(base_[4])), tape.constant(base_[5]));
  }

  Tensor predict(const Tensor& obs) const {
    Tape tape;
    return tape.value(forward(tape, tape.constant(obs)));
  }

 private:
  Architecture arch_;
  SubnetConfig config_;
  std::array<Tensor, 6> base_;
  std::vector<Layer> layers_;
};

namespace detail {

inline Tensor take_cols(const Tensor& m, std::size_t n) {
  Tensor out({m.dim(0), n});
  for (std::size_t r = 0; r < m.dim(0); ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = m[r * m.dim(1) + c];
  }
  return out;
}

inline Tensor take_rows(const Tensor& m, std::size_t n) {
  Shape s = m.shape();
  s[0] = n;
  const std::size_t width = m.rank() == 2 ? m.dim(1) : 1;
  return Tensor(s, std::vector<float>(m.storage().begin(), m.storage().begin() + n * width));
}

}  // namespace detail

inline Subnet Supernet::extract(const SubnetConfig& config_in) const {
  const SubnetConfig config = canonicalize(space_, config_in);
  check_config(space_, config);
  Subnet out(arch_, config);
  const std::size_t h = head_index();
  out.base() = {params_[0], params_[1], params_[h], params_[h + 1], params_[h + 2], params_[h + 3]};
  for (std::size_t l = 0; l < arch_.num_layers; ++l) {
    const LayerChoice& c = config.layers[l];
    if (!c.keep) continue;
    Subnet::Layer layer;
    layer.source_layer = l;
    layer.choice = c;
    layer.heads = arch_.heads_for(c.head_ratio);
    layer.mlp_width = arch_.mlp_width_for(c.mlp_ratio);
    const std::size_t att = layer.heads * arch_.head_dim();
    for (std::size_t i = 0; i < kBlockParamCount; ++i) layer.params[i] = params_[block_index(l, static_cast<BlockParam>(i))];
    for (BlockParam p : {kWq, kWk, kWv}) layer.params[p] = detail::take_cols(layer.params[p], att);
    for (BlockParam p : {kBq, kBk, kBv}) layer.params[p] = detail::take_rows(layer.params[p], att);
    layer.params[kWo] = detail::take_rows(layer.params[kWo], att);
    layer.params[kW1] = detail::take_cols(layer.params[kW1], layer.mlp_width);
    layer.params[kB1] = detail::take_rows(layer.params[kB1], layer.mlp_width);
    layer.params[kW2] = detail::take_rows(layer.params[kW2], layer.mlp_width);
    if (c.act_bits != kPassThroughBits) {
      for (std::size_t s = 0; s < kActSites; ++s) {
        auto it = bank_.find(ActKey{l, static_cast<ActSite>(s), c.act_bits});
        if (it == bank_.end() || !it->second.calibrated()) {
          throw UserError("extract: uncalibrated activation quantizer in layer " + std::to_string(l));
        }
        layer.act.push_back(it->second);
      }
    }
    out.layers().push_back(std::move(layer));
  }
  return out;
}

}  // namespace dcqfa
