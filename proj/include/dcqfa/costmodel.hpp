#pragma once

// Per-device block lookup tables, subnet cost aggregation and the softplus budget regularizers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcqfa/common.hpp"
#include "dcqfa/configspace.hpp"
#include "dcqfa/quant.hpp"
#include "dcqfa/supernet.hpp"

namespace dcqfa {

struct BlockKey {
  double mlp_ratio = 1.0;
  double head_ratio = 1.0;
  int weight_bits = 16;
  int act_bits = 16;

  static BlockKey of(const LayerChoice& l) { return {l.mlp_ratio, l.head_ratio, l.weight_bits, l.act_bits}; }

  std::string str() const {
    return "(r=" + format_double(mlp_ratio) + ", h=" + format_double(head_ratio) + ", bw=" + std::to_string(weight_bits) +
           ", ba=" + std::to_string(act_bits) + ")";
  }

  friend auto operator<=>(const BlockKey&, const BlockKey&) = default;
};

struct LutEntry {
  double latency_ms = 0.0;
  std::uint64_t act_mem_bytes = 0;
};

struct DeviceProfile {
  std::string device_id;
  double budget_latency_ms = 0.0;
  std::uint64_t budget_memory_bytes = 0;
  double base_latency_ms = 0.0;
  std::uint64_t base_memory_bytes = 0;
  std::map<BlockKey, LutEntry> lut;

  const LutEntry& entry(const LayerChoice& l) const {
    auto it = lut.find(BlockKey::of(l));
    if (it == lut.end()) throw UserError("device '" + device_id + "' has no LUT entry for " + BlockKey::of(l).str());
    return it->second;
  }
};

inline std::vector<BlockKey> all_block_keys(const SearchSpace& space) {
  std::vector<BlockKey> keys;
  for (double r : space.mlp_ratios) {
    for (double h : space.head_ratios) {
      for (int bw : space.weight_bits) {
        for (int ba : space.act_bits) keys.push_back({r, h, bw, ba});
      }
    }
  }
  return keys;
}

/// Checks that every reachable key is present and that latency and activation
/// memory never decrease when any one field moves up its menu.
inline void validate_profile(const DeviceProfile& p, const SearchSpace& space) {
  if (!(p.budget_latency_ms > 0.0) || p.budget_memory_bytes == 0) {
    throw UserError("device '" + p.device_id + "': budgets must be positive");
  }
  if (!(p.base_latency_ms >= 0.0)) throw UserError("device '" + p.device_id + "': negative base latency");
  std::vector<std::string> missing;
  for (const BlockKey& k : all_block_keys(space)) {
    auto it = p.lut.find(k);
    if (it == p.lut.end()) {
      missing.push_back(k.str());
    } else if (!(it->second.latency_ms > 0.0) || !std::isfinite(it->second.latency_ms)) {
      missing.push_back(k.str() + " (non-positive latency)");
    }
  }
  if (!missing.empty()) {
    std::string msg = "device '" + p.device_id + "': incomplete LUT, missing";
    for (const auto& m : missing) msg += " " + m;
    throw UserError(msg);
  }
  std::vector<std::string> bad;
  auto check = [&](const BlockKey& lo, const BlockKey& hi) {
    const LutEntry& a = p.lut.at(lo);
    const LutEntry& b = p.lut.at(hi);
    if (b.latency_ms < a.latency_ms || b.act_mem_bytes < a.act_mem_bytes) bad.push_back(lo.str() + "->" + hi.str());
  };
  for (const BlockKey& k : all_block_keys(space)) {
    auto next = [](const auto& menu, auto v) {
      for (std::size_t i = 0; i + 1 < menu.size(); ++i) {
        if (menu[i] == v) return std::optional(menu[i + 1]);
      }
      return std::optional<std::decay_t<decltype(v)>>();
    };
    if (auto r = next(space.mlp_ratios, k.mlp_ratio)) check(k, {*r, k.head_ratio, k.weight_bits, k.act_bits});
    if (auto h = next(space.head_ratios, k.head_ratio)) check(k, {k.mlp_ratio, *h, k.weight_bits, k.act_bits});
    if (auto b = next(space.weight_bits, k.weight_bits)) check(k, {k.mlp_ratio, k.head_ratio, *b, k.act_bits});
    if (auto b = next(space.act_bits, k.act_bits)) check(k, {k.mlp_ratio, k.head_ratio, k.weight_bits, *b});
  }
  if (!bad.empty()) {
    std::string msg = "device '" + p.device_id + "': LUT not monotone at";
    for (const auto& m : bad) msg += " " + m;
    throw UserError(msg);
  }
}

inline double estimate_latency(const DeviceProfile& p, const SubnetConfig& c) {
  double ms = p.base_latency_ms;
  for (const auto& l : c.layers) {
    if (l.keep) ms += p.entry(l).latency_ms;
  }
  return ms;
}

/// Quantized weight bytes of one kept block. 16-bit weights carry no scales.
inline double block_weight_bytes(const Architecture& arch, const LayerChoice& l) {
  const BlockParamCount n = block_param_count(arch, l.mlp_ratio, l.head_ratio);
  const std::uint64_t groups = l.weight_bits == kPassThroughBits ? 0 : n.output_channels;
  const std::uint64_t bits = quantized_size_bits(n.matrices, l.weight_bits, groups) + 32ULL * n.vectors;
  return static_cast<double>(bits) / 8.0;
}

/// Bytes of one kept block: quantized weights plus the LUT activation footprint.
inline double block_memory_bytes(const DeviceProfile& p, const Architecture& arch, const LayerChoice& l) {
  return block_weight_bytes(arch, l) + static_cast<double>(p.entry(l).act_mem_bytes);
}

/// Memory aggregation over kept blocks. Summed; swap for a max to model peak usage.
inline double aggregate_memory(double base, const std::vector<double>& blocks) {
  double total = base;
  for (double b : blocks) total += b;
  return total;
}

inline double estimate_memory(const DeviceProfile& p, const Architecture& arch, const SubnetConfig& c) {
  std::vector<double> blocks;
  for (const auto& l : c.layers) {
    if (l.keep) blocks.push_back(block_memory_bytes(p, arch, l));
  }
  return aggregate_memory(static_cast<double>(p.base_memory_bytes), blocks);
}

/// ln(1 + e^z) without overflow.
inline double softplus(double z) {
  if (z > 0.0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

/// softplus((cost - budget) / budget)
inline double budget_regularizer(double cost, double budget) {
  if (!(budget > 0.0)) throw UserError("budget must be positive");
  return softplus((cost - budget) / budget);
}

inline double reg_latency(const DeviceProfile& p, const SubnetConfig& c) {
  return budget_regularizer(estimate_latency(p, c), p.budget_latency_ms);
}

inline double reg_memory(const DeviceProfile& p, const Architecture& arch, const SubnetConfig& c) {
  return budget_regularizer(estimate_memory(p, arch, c), static_cast<double>(p.budget_memory_bytes));
}

struct Feasibility {
  bool feasible = true;
  double violation = 0.0;
  double latency_ms = 0.0;
  double memory_bytes = 0.0;
};

inline Feasibility check_feasibility(double latency_ms, double memory_bytes, const DeviceProfile& p) {
  Feasibility f;
  f.latency_ms = latency_ms;
  f.memory_bytes = memory_bytes;
  const double mem_budget = static_cast<double>(p.budget_memory_bytes);
  f.feasible = latency_ms <= p.budget_latency_ms && memory_bytes <= mem_budget;
  f.violation = std::max(0.0, (latency_ms - p.budget_latency_ms) / p.budget_latency_ms) +
                std::max(0.0, (memory_bytes - mem_budget) / mem_budget);
  return f;
}

inline Feasibility is_feasible(const DeviceProfile& p, const Architecture& arch, const SubnetConfig& c) {
  return check_feasibility(estimate_latency(p, c), estimate_memory(p, arch, c), p);
}

// ---- LUT file format -------------------------------------------------------

inline nlohmann::json profile_to_json(const DeviceProfile& p) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [k, e] : p.lut) {
    entries.push_back({{"r", k.mlp_ratio},
                       {"h", k.head_ratio},
                       {"bw", k.weight_bits},
                       {"ba", k.act_bits},
                       {"latency_ms", e.latency_ms},
                       {"act_mem_bytes", e.act_mem_bytes}});
  }
  return {{"device_id", p.device_id},
          {"budget_latency_ms", p.budget_latency_ms},
          {"budget_memory_bytes", p.budget_memory_bytes},
          {"base_latency_ms", p.base_latency_ms},
          {"base_memory_bytes", p.base_memory_bytes},
          {"entries", entries}};
}

inline DeviceProfile profile_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> kTop = {"device_id",         "budget_latency_ms", "budget_memory_bytes",
                                                "base_latency_ms",   "base_memory_bytes", "entries"};
  static const std::vector<std::string> kEntry = {"r", "h", "bw", "ba", "latency_ms", "act_mem_bytes"};
  auto require_keys = [](const nlohmann::json& obj, const std::vector<std::string>& keys, const std::string& where) {
    if (!obj.is_object()) throw UserError(where + ": expected an object");
    for (const auto& k : keys) {
      if (!obj.contains(k)) throw UserError(where + ": missing key '" + k + "'");
    }
    for (const auto& [k, v] : obj.items()) {
      if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw UserError(where + ": unknown key '" + k + "'");
    }
  };
  try {
    require_keys(j, kTop, "device profile");
    DeviceProfile p;
    p.device_id = j.at("device_id").get<std::string>();
    p.budget_latency_ms = j.at("budget_latency_ms").get<double>();
    p.budget_memory_bytes = j.at("budget_memory_bytes").get<std::uint64_t>();
    p.base_latency_ms = j.at("base_latency_ms").get<double>();
    p.base_memory_bytes = j.at("base_memory_bytes").get<std::uint64_t>();
    for (const auto& e : j.at("entries")) {
      require_keys(e, kEntry, "device profile entry");
      BlockKey k{e.at("r").get<double>(), e.at("h").get<double>(), e.at("bw").get<int>(), e.at("ba").get<int>()};
      if (p.lut.count(k)) throw UserError("device profile: duplicate entry " + k.str());
      p.lut[k] = LutEntry{e.at("latency_ms").get<double>(), e.at("act_mem_bytes").get<std::uint64_t>()};
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw UserError(std::string("device profile: ") + e.what());
  }
}

inline DeviceProfile load_profile(const std::string& path, const SearchSpace& space) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open device profile " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw UserError("device profile " + path + ": " + e.what());
  }
  DeviceProfile p = profile_from_json(j);
  validate_profile(p, space);
  return p;
}

inline void save_profile(const DeviceProfile& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw UserError("cannot write " + path);
  out << profile_to_json(p).dump(2) << "\n";
}

// ---- Synthetic and fixture profiles ----------------------------------------

struct SyntheticDevice {
  std::string device_id;
  /// latency(key) = latency_scale * r * h * sqrt(bW * bA) + latency_offset
  double latency_scale = 0.05;
  double latency_offset = 0.02;
  double base_latency_ms = 0.1;
  /// act bytes(key) = act_scale * tokens * (d + r*d + h*d) * bA / 8
  double act_scale = 64.0;
  /// Budgets as fractions of the largest full-precision config's cost.
  double latency_budget_fraction = 0.5;
  double memory_budget_fraction = 0.5;
};

inline DeviceProfile synthesize_profile(const SyntheticDevice& dev, const SearchSpace& space, const Architecture& arch) {
  DeviceProfile p;
  p.device_id = dev.device_id;
  p.base_latency_ms = dev.base_latency_ms;
  p.base_memory_bytes = base_param_count(arch) * 4;
  const double d = static_cast<double>(arch.d_model);
  for (const BlockKey& k : all_block_keys(space)) {
    LutEntry e;
    e.latency_ms = dev.latency_scale * k.mlp_ratio * k.head_ratio *
                       std::sqrt(static_cast<double>(k.weight_bits) * k.act_bits) +
                   dev.latency_offset;
    e.act_mem_bytes = static_cast<std::uint64_t>(std::llround(
        dev.act_scale * static_cast<double>(arch.tokens) * (d + k.mlp_ratio * d + k.head_ratio * d) * k.act_bits / 8.0));
    p.lut[k] = e;
  }
  const SubnetConfig largest = largest_config(space);
  p.budget_latency_ms = dev.latency_budget_fraction * estimate_latency(p, largest);
  p.budget_memory_bytes = static_cast<std::uint64_t>(
      std::llround(dev.memory_budget_fraction * estimate_memory(p, arch, largest)));
  validate_profile(p, space);
  return p;
}

/// Whole-model Jetson Orin NX measurements for a ~7B-parameter policy at
/// FP16 / W8A8 / W4A4: latency 644.74 / 297.84 / 217.38 ms, memory 15.2 / 7.9 / 4 GB.
struct PaperFixture {
  SearchSpace space;
  Architecture arch;
  DeviceProfile profile;
};

inline PaperFixture orin_nx_paper_fixture() {
  PaperFixture f;
  f.space.num_layers = 1;
  f.space.mlp_ratios = {4.0};
  f.space.head_ratios = {1.0};
  f.space.weight_bits = {4, 8, 16};
  f.space.act_bits = {4, 8, 16};
  f.space.min_depth = 1;
  // One block standing in for the whole model: 12 * d^2 ~ 7.2e9 weights.
  f.arch.num_layers = 1;
  f.arch.d_model = 24576;
  f.arch.max_heads = 192;
  f.arch.max_mlp_ratio = 4.0;

  const std::map<int, double> latency = {{16, 644.74}, {8, 297.84}, {4, 217.38}};
  const std::map<int, double> memory = {{16, 15.2e9}, {8, 7.9e9}, {4, 4.0e9}};
  auto& p = f.profile;
  p.device_id = "orin-nx-paper";
  p.base_latency_ms = 0.0;
  p.base_memory_bytes = 0;
  // Activation bytes on the diagonal are whatever the measured total leaves after weights.
  std::map<int, double> act_diag;
  for (int b : {4, 8, 16}) {
    const double weights = block_weight_bytes(f.arch, LayerChoice{true, 4.0, 1.0, b, b});
    act_diag[b] = memory.at(b) - weights;
  }
  for (int bw : {4, 8, 16}) {
    for (int ba : {4, 8, 16}) {
      LutEntry e;
      e.latency_ms = 0.5 * (latency.at(bw) + latency.at(ba));
      e.act_mem_bytes = static_cast<std::uint64_t>(std::llround(act_diag.at(ba)));
      p.lut[BlockKey{4.0, 1.0, bw, ba}] = e;
    }
  }
  p.budget_latency_ms = latency.at(16);
  p.budget_memory_bytes = static_cast<std::uint64_t>(memory.at(16));
  validate_profile(p, f.space);
  return f;
}

}  // namespace dcqfa
