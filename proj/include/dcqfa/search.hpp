#pragma once

// Constrained NSGA-II over subnet configurations.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dcqfa/common.hpp"
#include "dcqfa/configspace.hpp"
#include "dcqfa/costmodel.hpp"
#include "dcqfa/supernet.hpp"

namespace dcqfa {

enum class SearchObjective { kLatency, kParams };

struct Individual {
  Genome genome;
  /// (val_loss, latency_ms) or (val_loss, parameter count).
  std::array<double, 2> objectives{0.0, 0.0};
  double latency_ms = 0.0;
  double memory_bytes = 0.0;
  bool feasible = true;
  double violation = 0.0;
  std::size_t rank = 0;
  double crowding = 0.0;
};

/// Constrained dominance (minimization).
inline bool dominates(const Individual& a, const Individual& b) {
  if (a.feasible != b.feasible) return a.feasible;
  if (!a.feasible) return a.violation < b.violation;
  bool strict = false;
  for (std::size_t i = 0; i < a.objectives.size(); ++i) {
    if (a.objectives[i] > b.objectives[i]) return false;
    if (a.objectives[i] < b.objectives[i]) strict = true;
  }
  return strict;
}

/// Fronts as index lists, best first; sets `rank` (1-based) on every member.
inline std::vector<std::vector<std::size_t>> nondominated_sort(std::vector<Individual>& pop) {
  const std::size_t n = pop.size();
  std::vector<std::vector<std::size_t>> dominated(n);
  std::vector<std::size_t> count(n, 0);
  std::vector<std::vector<std::size_t>> fronts(1);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = 0; q < n; ++q) {
      if (p == q) continue;
      if (dominates(pop[p], pop[q])) {
        dominated[p].push_back(q);
      } else if (dominates(pop[q], pop[p])) {
        ++count[p];
      }
    }
    if (count[p] == 0) {
      pop[p].rank = 1;
      fronts[0].push_back(p);
    }
  }
  for (std::size_t f = 0; !fronts[f].empty(); ++f) {
    std::vector<std::size_t> next;
    for (std::size_t p : fronts[f]) {
      for (std::size_t q : dominated[p]) {
        if (--count[q] == 0) {
          pop[q].rank = f + 2;
          next.push_back(q);
        }
      }
    }
    fronts.push_back(std::move(next));
  }
  fronts.pop_back();
  return fronts;
}

/// Normalized-gap crowding distance; boundary members get infinity.
inline void crowding(std::vector<Individual>& pop, const std::vector<std::size_t>& front) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  for (std::size_t i : front) pop[i].crowding = 0.0;
  if (front.size() <= 2) {
    for (std::size_t i : front) pop[i].crowding = kInf;
    return;
  }
  for (std::size_t m = 0; m < 2; ++m) {
    std::vector<std::size_t> order = front;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return pop[a].objectives[m] < pop[b].objectives[m]; });
    const double lo = pop[order.front()].objectives[m];
    const double hi = pop[order.back()].objectives[m];
    pop[order.front()].crowding = kInf;
    pop[order.back()].crowding = kInf;
    if (hi == lo) continue;
    for (std::size_t k = 1; k + 1 < order.size(); ++k) {
      double& c = pop[order[k]].crowding;
      if (std::isinf(c)) continue;
      c += (pop[order[k + 1]].objectives[m] - pop[order[k - 1]].objectives[m]) / (hi - lo);
    }
  }
}

struct SearchParams {
  std::size_t population = 64;
  std::size_t generations = 40;
  /// Per-gene mutation probability; negative means 1/genes.
  double mutation_rate = -1.0;
  double crossover_rate = 0.9;
  SearchObjective objective = SearchObjective::kLatency;

  void validate() const {
    if (population < 2) throw UserError("search population must be at least 2");
    if (mutation_rate > 1.0) throw UserError("mutation rate must not exceed 1");
    if (!(crossover_rate >= 0.0 && crossover_rate <= 1.0)) throw UserError("crossover rate must lie in [0, 1]");
  }
};

struct ParetoFront {
  std::string device_id;
  /// Sorted by latency, then loss.
  std::vector<Individual> members;
  /// False when no feasible individual was found; members then hold the least-violating rank.
  bool feasible = true;
  std::optional<Individual> min_violation;
  /// Best feasible val_loss in the population after each generation (NaN when none).
  std::vector<double> best_feasible_loss;
};

/// val_loss of a config; must be a pure function of the config.
using FitnessFn = std::function<double(const SubnetConfig&)>;

namespace detail {

inline Individual evaluate_individual(const SearchSpace& space, const Architecture& arch, const DeviceProfile& profile,
                                      SearchObjective objective, const Genome& g, std::map<Genome, double>& cache,
                                      const FitnessFn& fitness) {
  const SubnetConfig c = decode(space, g);
  Individual ind;
  ind.genome = encode(space, c);
  auto it = cache.find(ind.genome);
  if (it == cache.end()) it = cache.emplace(ind.genome, fitness(c)).first;
  const Feasibility f = is_feasible(profile, arch, c);
  ind.feasible = f.feasible;
  ind.violation = f.violation;
  ind.latency_ms = f.latency_ms;
  ind.memory_bytes = f.memory_bytes;
  ind.objectives = {it->second, objective == SearchObjective::kLatency
                                    ? f.latency_ms
                                    : static_cast<double>(parameter_count(arch, c))};
  if (!std::isfinite(ind.objectives[0]) || !std::isfinite(ind.objectives[1])) {
    throw NumericError("search: non-finite objective for genome " + genome_string(ind.genome));
  }
  return ind;
}

/// Keeps the best `n` by (rank, crowding), assigning rank and crowding in place.
inline std::vector<Individual> environmental_selection(std::vector<Individual> pool, std::size_t n) {
  const auto fronts = nondominated_sort(pool);
  std::vector<Individual> out;
  for (const auto& front : fronts) {
    crowding(pool, front);
    if (out.size() + front.size() <= n) {
      for (std::size_t i : front) out.push_back(pool[i]);
      continue;
    }
    std::vector<std::size_t> order = front;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return pool[a].crowding > pool[b].crowding; });
    for (std::size_t i = 0; out.size() < n; ++i) out.push_back(pool[order[i]]);
    break;
  }
  return out;
}

inline bool better(const Individual& a, const Individual& b) {
  if (a.rank != b.rank) return a.rank < b.rank;
  return a.crowding > b.crowding;
}

}  // namespace detail

/// Re-mutations tried when an offspring repeats an already evaluated genome.
inline constexpr std::size_t kNoveltyRetries = 8;

inline ParetoFront run_search(const SearchSpace& space, const Architecture& arch, const DeviceProfile& profile,
                              const FitnessFn& fitness, const SearchParams& params, std::uint64_t seed) {
  params.validate();
  validate_profile(profile, space);
  Rng rng(seed);
  const double p_mut = params.mutation_rate < 0.0 ? 1.0 / static_cast<double>(space.genes()) : params.mutation_rate;
  std::map<Genome, double> cache;
  auto eval = [&](const Genome& g) {
    return detail::evaluate_individual(space, arch, profile, params.objective, g, cache, fitness);
  };

  std::vector<Individual> pop;
  pop.push_back(eval(encode(space, largest_config(space))));
  pop.push_back(eval(encode(space, smallest_config(space))));
  while (pop.size() < params.population) pop.push_back(eval(sample_genome(space, rng)));
  pop = detail::environmental_selection(std::move(pop), params.population);

  ParetoFront front;
  front.device_id = profile.device_id;
  auto record_best = [&] {
    double best = std::numeric_limits<double>::quiet_NaN();
    for (const auto& ind : pop) {
      if (ind.feasible && !(ind.objectives[0] >= best)) best = ind.objectives[0];
    }
    front.best_feasible_loss.push_back(best);
  };

  for (std::size_t gen = 0; gen < params.generations; ++gen) {
    auto tournament = [&]() -> const Individual& {
      const Individual& a = pop[rng.index(pop.size())];
      const Individual& b = pop[rng.index(pop.size())];
      return detail::better(b, a) ? b : a;
    };
    std::vector<Individual> pool = pop;
    std::map<Genome, bool> seen;
    for (const auto& ind : pool) seen[ind.genome] = true;
    std::vector<Individual> duplicates;
    for (std::size_t k = 0; k < params.population; ++k) {
      const Individual& p1 = tournament();
      const Individual& p2 = tournament();
      Genome child = rng.uniform() < params.crossover_rate ? crossover(space, p1.genome, p2.genome, rng).first : p1.genome;
      child = mutate(space, child, p_mut, rng);
      for (std::size_t retry = 0; retry < kNoveltyRetries && cache.count(encode(space, decode(space, child))); ++retry) {
        child = mutate(space, child, p_mut, rng);
      }
      Individual ind = eval(child);
      if (seen.emplace(ind.genome, true).second) {
        pool.push_back(std::move(ind));
      } else {
        duplicates.push_back(std::move(ind));
      }
    }
    // Distinct genomes first; duplicates only pad a pool that would otherwise be short.
    for (std::size_t i = 0; pool.size() < params.population && i < duplicates.size(); ++i) pool.push_back(duplicates[i]);
    pop = detail::environmental_selection(std::move(pool), params.population);
    record_best();
  }

  // The front is the nondominated set of every configuration evaluated, not only the survivors.
  std::vector<Individual> archive;
  for (const auto& [g, loss] : cache) archive.push_back(eval(g));
  const auto fronts = nondominated_sort(archive);
  for (std::size_t i : fronts.front()) front.members.push_back(archive[i]);
  std::stable_sort(front.members.begin(), front.members.end(), [](const Individual& a, const Individual& b) {
    if (a.latency_ms != b.latency_ms) return a.latency_ms < b.latency_ms;
    return a.objectives[0] < b.objectives[0];
  });
  front.feasible = !front.members.empty() && front.members.front().feasible;
  if (!front.feasible) {
    const auto it = std::min_element(pop.begin(), pop.end(),
                                     [](const Individual& a, const Individual& b) { return a.violation < b.violation; });
    front.min_violation = *it;
  }
  return front;
}

enum class SelectionRule { kMinLoss, kKnee };

/// Index into `front.members` chosen by `rule`.
inline std::size_t select_deployment_index(const ParetoFront& front, SelectionRule rule) {
  if (front.members.empty()) throw UserError("select_deployment: empty front");
  if (!front.feasible) throw UserError("select_deployment: no feasible configuration for device " + front.device_id);
  const auto& m = front.members;
  std::size_t best = 0;
  for (std::size_t i = 1; i < m.size(); ++i) {
    if (m[i].objectives[0] < m[best].objectives[0]) best = i;
  }
  if (rule == SelectionRule::kMinLoss || m.size() < 3) return best;

  // Knee: the member farthest from the chord joining the two extremes, after
  // normalizing both objectives to [0, 1].
  std::array<double, 2> lo{m[0].objectives[0], m[0].objectives[1]}, hi = lo;
  for (const auto& ind : m) {
    for (std::size_t k = 0; k < 2; ++k) {
      lo[k] = std::min(lo[k], ind.objectives[k]);
      hi[k] = std::max(hi[k], ind.objectives[k]);
    }
  }
  auto norm = [&](const Individual& ind, std::size_t k) {
    return hi[k] > lo[k] ? (ind.objectives[k] - lo[k]) / (hi[k] - lo[k]) : 0.0;
  };
  std::vector<std::size_t> order(m.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return m[a].objectives[1] < m[b].objectives[1]; });
  const double x0 = norm(m[order.front()], 1), y0 = norm(m[order.front()], 0);
  const double x1 = norm(m[order.back()], 1), y1 = norm(m[order.back()], 0);
  const double len = std::hypot(x1 - x0, y1 - y0);
  if (len == 0.0) return best;
  std::size_t knee = best;
  double far = -1.0;
  for (std::size_t i : order) {
    const double x = norm(m[i], 1), y = norm(m[i], 0);
    const double d = std::abs((x1 - x0) * (y0 - y) - (x0 - x) * (y1 - y0)) / len;
    if (d > far) {
      far = d;
      knee = i;
    }
  }
  return knee;
}

inline SubnetConfig select_deployment(const SearchSpace& space, const ParetoFront& front, SelectionRule rule) {
  return decode(space, front.members[select_deployment_index(front, rule)].genome);
}

/// Exhaustive feasible Pareto set (or least-violation rank when nothing is feasible).
inline std::vector<Individual> brute_force_front(const SearchSpace& space, const Architecture& arch,
                                                 const DeviceProfile& profile, const FitnessFn& fitness,
                                                 SearchObjective objective) {
  std::map<Genome, double> cache;
  std::vector<Individual> all;
  for (const SubnetConfig& c : enumerate(space)) {
    all.push_back(detail::evaluate_individual(space, arch, profile, objective, encode(space, c), cache, fitness));
  }
  std::vector<Individual> out;
  for (std::size_t i = 0; i < all.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < all.size() && !dominated; ++j) dominated = j != i && dominates(all[j], all[i]);
    if (!dominated) out.push_back(all[i]);
  }
  return out;
}

}  // namespace dcqfa
