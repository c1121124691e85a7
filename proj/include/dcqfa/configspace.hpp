#pragma once

// Search space of per-layer (keep, mlp ratio, head ratio, weight bits, activation bits)
// choices, its canonical form, and the integer genome codec used by the search.

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dcqfa/common.hpp"
#include "dcqfa/quant.hpp"

namespace dcqfa {

struct LayerChoice {
  bool keep = true;
  double mlp_ratio = 1.0;
  double head_ratio = 1.0;
  int weight_bits = 16;
  int act_bits = 16;

  friend bool operator==(const LayerChoice&, const LayerChoice&) = default;
};

struct SubnetConfig {
  std::vector<LayerChoice> layers;

  std::size_t active_layers() const {
    return static_cast<std::size_t>(std::count_if(layers.begin(), layers.end(), [](const LayerChoice& l) { return l.keep; }));
  }

  friend bool operator==(const SubnetConfig&, const SubnetConfig&) = default;
};

/// One integer index per gene, five genes per layer: keep, r, h, bW, bA.
using Genome = std::vector<int>;

inline constexpr std::size_t kGenesPerLayer = 5;

struct SearchSpace {
  std::size_t num_layers = 4;
  std::vector<double> mlp_ratios{1.0, 2.0, 4.0};
  std::vector<double> head_ratios{0.5, 1.0};
  std::vector<int> weight_bits{4, 8, 16};
  std::vector<int> act_bits{4, 8, 16};
  std::size_t min_depth = 1;

  void validate() const {
    if (num_layers == 0) throw UserError("search space needs at least one layer");
    if (mlp_ratios.empty() || head_ratios.empty() || weight_bits.empty() || act_bits.empty()) {
      throw UserError("search space menus must be non-empty");
    }
    if (min_depth > num_layers) throw UserError("min_depth exceeds num_layers");
    auto ascending_unique = [](const auto& v) {
      for (std::size_t i = 1; i < v.size(); ++i) {
        if (!(v[i - 1] < v[i])) return false;
      }
      return true;
    };
    if (!ascending_unique(mlp_ratios) || !ascending_unique(head_ratios) || !ascending_unique(weight_bits) ||
        !ascending_unique(act_bits)) {
      throw UserError("search space menus must be strictly ascending");
    }
    for (double r : mlp_ratios) {
      if (!(r > 0.0)) throw UserError("mlp ratios must be positive");
    }
    for (double h : head_ratios) {
      if (!(h > 0.0 && h <= 1.0)) throw UserError("head ratios must lie in (0, 1]");
    }
    for (int b : weight_bits) QuantizerSpec::check_bits(b);
    for (int b : act_bits) QuantizerSpec::check_bits(b);
  }

  std::size_t genes() const { return num_layers * kGenesPerLayer; }

  /// Menu size of gene `g` (layer-major order).
  std::size_t gene_arity(std::size_t g) const {
    switch (g % kGenesPerLayer) {
      case 0: return 2;
      case 1: return mlp_ratios.size();
      case 2: return head_ratios.size();
      case 3: return weight_bits.size();
      default: return act_bits.size();
    }
  }

  /// Distinct active settings of one kept layer.
  std::uint64_t active_choices() const {
    return static_cast<std::uint64_t>(mlp_ratios.size() * head_ratios.size() * weight_bits.size() * act_bits.size());
  }

  /// Number of canonical configurations: sum over k >= min_depth of C(L, k) * A^k.
  std::uint64_t cardinality() const {
    std::uint64_t total = 0;
    std::uint64_t binom = 1;
    for (std::size_t k = 0; k <= num_layers; ++k) {
      if (k > 0) binom = binom * (num_layers - k + 1) / k;
      std::uint64_t term = binom;
      for (std::size_t i = 0; i < k; ++i) term *= active_choices();
      if (k >= min_depth) total += term;
    }
    return total;
  }

  std::uint64_t fingerprint() const {
    Fnv1a h;
    h.value(static_cast<std::uint64_t>(num_layers));
    h.value(static_cast<std::uint64_t>(min_depth));
    for (double r : mlp_ratios) h.value(r);
    h.text("|");
    for (double r : head_ratios) h.value(r);
    h.text("|");
    for (int b : weight_bits) h.value(b);
    h.text("|");
    for (int b : act_bits) h.value(b);
    return h.digest();
  }
};

namespace detail {

template <typename V, typename X>
int menu_index(const std::vector<V>& menu, X value, const char* what) {
  for (std::size_t i = 0; i < menu.size(); ++i) {
    if (menu[i] == value) return static_cast<int>(i);
  }
  throw UserError(std::string("value not in ") + what + " menu");
}

}  // namespace detail

/// Skipped layers take menu minima in every inert field.
inline SubnetConfig canonicalize(const SearchSpace& space, SubnetConfig c) {
  for (auto& l : c.layers) {
    if (!l.keep) {
      l.mlp_ratio = space.mlp_ratios.front();
      l.head_ratio = space.head_ratios.front();
      l.weight_bits = space.weight_bits.front();
      l.act_bits = space.act_bits.front();
    }
  }
  return c;
}

inline void check_config(const SearchSpace& space, const SubnetConfig& c) {
  if (c.layers.size() != space.num_layers) {
    throw UserError("config has " + std::to_string(c.layers.size()) + " layers, space has " +
                    std::to_string(space.num_layers));
  }
  for (const auto& l : c.layers) {
    detail::menu_index(space.mlp_ratios, l.mlp_ratio, "mlp ratio");
    detail::menu_index(space.head_ratios, l.head_ratio, "head ratio");
    detail::menu_index(space.weight_bits, l.weight_bits, "weight bit");
    detail::menu_index(space.act_bits, l.act_bits, "activation bit");
  }
  if (c.active_layers() < space.min_depth) throw UserError("config keeps fewer layers than min_depth");
}

/// Like check_config, but also admits full-precision bit-widths outside the menus.
inline void check_forwardable(const SearchSpace& space, const SubnetConfig& c) {
  SubnetConfig menu = c;
  for (auto& l : menu.layers) {
    if (l.weight_bits == kPassThroughBits) l.weight_bits = space.weight_bits.front();
    if (l.act_bits == kPassThroughBits) l.act_bits = space.act_bits.front();
  }
  check_config(space, menu);
}

/// Largest architecture at full precision: the distillation teacher.
inline SubnetConfig teacher_config(const SearchSpace& space) {
  SubnetConfig c;
  for (std::size_t l = 0; l < space.num_layers; ++l) {
    c.layers.push_back(LayerChoice{true, space.mlp_ratios.back(), space.head_ratios.back(), kPassThroughBits,
                                   kPassThroughBits});
  }
  return c;
}

inline Genome encode(const SearchSpace& space, const SubnetConfig& config) {
  const SubnetConfig c = canonicalize(space, config);
  check_config(space, c);
  Genome g;
  g.reserve(space.genes());
  for (const auto& l : c.layers) {
    g.push_back(l.keep ? 1 : 0);
    g.push_back(detail::menu_index(space.mlp_ratios, l.mlp_ratio, "mlp ratio"));
    g.push_back(detail::menu_index(space.head_ratios, l.head_ratio, "head ratio"));
    g.push_back(detail::menu_index(space.weight_bits, l.weight_bits, "weight bit"));
    g.push_back(detail::menu_index(space.act_bits, l.act_bits, "activation bit"));
  }
  return g;
}

/// Decodes a raw genome without enforcing min_depth or canonical form.
inline SubnetConfig decode_raw(const SearchSpace& space, const Genome& genome) {
  if (genome.size() != space.genes()) {
    throw UserError("genome has " + std::to_string(genome.size()) + " genes, expected " +
                    std::to_string(space.genes()));
  }
  for (std::size_t i = 0; i < genome.size(); ++i) {
    if (genome[i] < 0 || static_cast<std::size_t>(genome[i]) >= space.gene_arity(i)) {
      throw UserError("gene " + std::to_string(i) + " index " + std::to_string(genome[i]) + " out of range");
    }
  }
  SubnetConfig c;
  for (std::size_t l = 0; l < space.num_layers; ++l) {
    const int* g = &genome[l * kGenesPerLayer];
    c.layers.push_back(LayerChoice{g[0] == 1, space.mlp_ratios[static_cast<std::size_t>(g[1])],
                                   space.head_ratios[static_cast<std::size_t>(g[2])],
                                   space.weight_bits[static_cast<std::size_t>(g[3])],
                                   space.act_bits[static_cast<std::size_t>(g[4])]});
  }
  return c;
}

inline SubnetConfig decode(const SearchSpace& space, const Genome& genome) {
  SubnetConfig c = canonicalize(space, decode_raw(space, genome));
  if (c.active_layers() < space.min_depth) throw UserError("genome keeps fewer layers than min_depth");
  return c;
}

/// Zeroes inert genes of skipped layers.
inline Genome canonicalize(const SearchSpace& space, Genome g) {
  for (std::size_t l = 0; l < space.num_layers; ++l) {
    if (g[l * kGenesPerLayer] == 0) {
      for (std::size_t k = 1; k < kGenesPerLayer; ++k) g[l * kGenesPerLayer + k] = 0;
    }
  }
  return g;
}

/// Flips randomly chosen skipped layers on until min_depth holds, then canonicalizes.
inline Genome repair(const SearchSpace& space, Genome g, Rng& rng) {
  g = canonicalize(space, std::move(g));
  for (;;) {
    std::vector<std::size_t> skipped;
    for (std::size_t l = 0; l < space.num_layers; ++l) {
      if (g[l * kGenesPerLayer] == 0) skipped.push_back(l);
    }
    if (space.num_layers - skipped.size() >= space.min_depth) break;
    g[skipped[rng.index(skipped.size())] * kGenesPerLayer] = 1;
  }
  return g;
}

inline Genome sample_genome(const SearchSpace& space, Rng& rng) {
  Genome g(space.genes());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<int>(rng.index(space.gene_arity(i)));
  return repair(space, std::move(g), rng);
}

inline SubnetConfig sample_uniform(const SearchSpace& space, Rng& rng) {
  return decode(space, sample_genome(space, rng));
}

inline SubnetConfig largest_config(const SearchSpace& space) {
  SubnetConfig c;
  c.layers.assign(space.num_layers, LayerChoice{true, space.mlp_ratios.back(), space.head_ratios.back(),
                                                space.weight_bits.back(), space.act_bits.back()});
  return c;
}

/// Menu minima everywhere; the first min_depth layers kept.
inline SubnetConfig smallest_config(const SearchSpace& space) {
  SubnetConfig c;
  c.layers.assign(space.num_layers, LayerChoice{false, space.mlp_ratios.front(), space.head_ratios.front(),
                                                space.weight_bits.front(), space.act_bits.front()});
  for (std::size_t l = 0; l < space.min_depth; ++l) c.layers[l].keep = true;
  return c;
}

/// The largest architecture with every layer at the given precision.
inline SubnetConfig uniform_precision_config(const SearchSpace& space, int weight_bits, int act_bits) {
  SubnetConfig c = largest_config(space);
  for (auto& l : c.layers) {
    l.weight_bits = weight_bits;
    l.act_bits = act_bits;
  }
  check_config(space, c);
  return c;
}

inline Genome mutate(const SearchSpace& space, Genome g, double p_mut, Rng& rng) {
  if (p_mut <= 0.0) return g;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (rng.bernoulli(p_mut)) g[i] = static_cast<int>(rng.index(space.gene_arity(i)));
  }
  return repair(space, std::move(g), rng);
}

/// Uniform per-gene crossover.
inline std::pair<Genome, Genome> crossover(const SearchSpace& space, const Genome& a, const Genome& b, Rng& rng) {
  if (a.size() != b.size()) throw std::invalid_argument("crossover: genome length mismatch");
  Genome c1 = a, c2 = b;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (rng.bernoulli(0.5)) std::swap(c1[i], c2[i]);
  }
  return {repair(space, std::move(c1), rng), repair(space, std::move(c2), rng)};
}

/// Every raw genome in lexicographic order (no canonicalization, no min_depth filter).
inline std::vector<Genome> enumerate_raw(const SearchSpace& space) {
  std::vector<Genome> out;
  Genome g(space.genes(), 0);
  for (;;) {
    out.push_back(g);
    std::size_t i = g.size();
    while (i > 0) {
      --i;
      if (static_cast<std::size_t>(++g[i]) < space.gene_arity(i)) break;
      g[i] = 0;
      if (i == 0) return out;
    }
  }
}

/// Canonical configurations satisfying min_depth, each exactly once.
inline std::vector<SubnetConfig> enumerate(const SearchSpace& space) {
  std::vector<SubnetConfig> out;
  for (const Genome& g : enumerate_raw(space)) {
    if (canonicalize(space, g) != g) continue;
    SubnetConfig c = decode_raw(space, g);
    if (c.active_layers() < space.min_depth) continue;
    out.push_back(std::move(c));
  }
  return out;
}

inline std::string genome_string(const Genome& g) {
  std::string s;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (i) s += '-';
    s += std::to_string(g[i]);
  }
  return s;
}

inline Genome parse_genome(const std::string& text) {
  Genome g;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find_first_of("-,", pos);
    if (end == std::string::npos) end = text.size();
    const std::string tok = text.substr(pos, end - pos);
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) {
      throw UserError("malformed genome '" + text + "'");
    }
    g.push_back(std::stoi(tok));
    pos = end + 1;
  }
  return g;
}

inline std::uint64_t config_hash(const SearchSpace& space, const SubnetConfig& c) {
  Fnv1a h;
  for (int v : encode(space, c)) h.value(v);
  return h.digest();
}

}  // namespace dcqfa
