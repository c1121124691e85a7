#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "dcqfa/costmodel.hpp"

using namespace dcqfa;

namespace {

struct Fixture {
  SearchSpace space;
  Architecture arch;
  DeviceProfile profile;
};

Fixture synthetic(double lat_frac = 0.5, double mem_frac = 0.5) {
  Fixture s;
  s.space.min_depth = 0;
  s.arch = Architecture::for_space(s.space);
  SyntheticDevice dev;
  dev.device_id = "test";
  dev.latency_budget_fraction = lat_frac;
  dev.memory_budget_fraction = mem_frac;
  s.profile = synthesize_profile(dev, s.space, s.arch);
  return s;
}

SubnetConfig all_skipped(const SearchSpace& space) {
  SubnetConfig c = smallest_config(space);
  for (auto& l : c.layers) l.keep = false;
  return canonicalize(space, c);
}

bool contains(const std::string& hay, const std::string& needle) { return hay.find(needle) != std::string::npos; }

}  // namespace

TEST(CostModel, LatencySumsKeptBlocks) {
  SearchSpace space;
  space.num_layers = 2;
  space.mlp_ratios = {1.0};
  space.head_ratios = {1.0};
  space.weight_bits = {8};
  space.act_bits = {8, 16};
  DeviceProfile p;
  p.lut[BlockKey{1.0, 1.0, 8, 8}] = LutEntry{3.0, 0};
  p.lut[BlockKey{1.0, 1.0, 8, 16}] = LutEntry{5.0, 0};
  SubnetConfig c;
  c.layers = {LayerChoice{true, 1.0, 1.0, 8, 8}, LayerChoice{true, 1.0, 1.0, 8, 16}};
  EXPECT_DOUBLE_EQ(estimate_latency(p, c), 8.0);
  c.layers[0].keep = false;
  EXPECT_DOUBLE_EQ(estimate_latency(p, c), 5.0);
}

TEST(CostModel, SkippedConfigCostsBase) {
  const Fixture s = synthetic();
  const SubnetConfig c = all_skipped(s.space);
  EXPECT_DOUBLE_EQ(estimate_latency(s.profile, c), s.profile.base_latency_ms);
  EXPECT_DOUBLE_EQ(estimate_memory(s.profile, s.arch, c), static_cast<double>(s.profile.base_memory_bytes));
}

TEST(CostModel, AggregationMatchesIndependentLoop) {
  const Fixture s = synthetic();
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    const SubnetConfig c = sample_uniform(s.space, rng);
    double lat = s.profile.base_latency_ms;
    double mem = static_cast<double>(s.profile.base_memory_bytes);
    for (const auto& l : c.layers) {
      if (!l.keep) continue;
      const LutEntry& e = s.profile.lut.at(BlockKey{l.mlp_ratio, l.head_ratio, l.weight_bits, l.act_bits});
      lat += e.latency_ms;
      const double d = 32, a = std::ceil(l.head_ratio * 4) * 8, w = l.mlp_ratio * 32;
      const double mats = 4 * d * a + 2 * d * w;
      const double chans = 3 * a + d + w + d;
      const double vecs = 6 * d + 3 * a + w;
      const double weight_bits = mats * l.weight_bits + (l.weight_bits == 16 ? 0.0 : 32 * chans);
      mem += (weight_bits + 32 * vecs) / 8 + static_cast<double>(e.act_mem_bytes);
    }
    EXPECT_DOUBLE_EQ(estimate_latency(s.profile, c), lat);
    EXPECT_NEAR(estimate_memory(s.profile, s.arch, c), mem, 1e-6 * mem);
  }
}

TEST(CostModel, WeightMemoryHalvesWithBits) {
  Architecture arch;
  const LayerChoice b16{true, 2.0, 1.0, 16, 16};
  const LayerChoice b8{true, 2.0, 1.0, 8, 16};
  const BlockParamCount n = block_param_count(arch, 2.0, 1.0);
  const double vec_bytes = 4.0 * static_cast<double>(n.vectors);
  const double scale_bytes = 4.0 * static_cast<double>(n.output_channels);
  EXPECT_DOUBLE_EQ(block_weight_bytes(arch, b8) - vec_bytes - scale_bytes,
                   0.5 * (block_weight_bytes(arch, b16) - vec_bytes));
}

TEST(CostModel, RegularizerValues) {
  EXPECT_NEAR(budget_regularizer(10.0, 10.0), std::log(2.0), 1e-9);
  EXPECT_NEAR(budget_regularizer(20.0, 10.0), 1.313261687518223, 1e-9);
  EXPECT_NEAR(budget_regularizer(0.0, 10.0), 0.313261687518223, 1e-9);
  EXPECT_NEAR(softplus(800.0), 800.0, 1e-9);
  EXPECT_GT(softplus(-800.0), -1e-300);
  EXPECT_TRUE(std::isfinite(softplus(1e6)));
  double prev = -1.0;
  for (double c = 0.0; c < 40.0; c += 0.25) {
    const double r = budget_regularizer(c, 10.0);
    EXPECT_GT(r, prev);
    EXPECT_GT(r, 0.0);
    prev = r;
  }
  EXPECT_THROW(budget_regularizer(1.0, 0.0), UserError);
}

TEST(CostModel, FeasibilityBoundaries) {
  DeviceProfile p;
  p.budget_latency_ms = 10.0;
  p.budget_memory_bytes = 1000;
  const Feasibility at = check_feasibility(10.0, 1000.0, p);
  EXPECT_TRUE(at.feasible);
  EXPECT_EQ(at.violation, 0.0);
  const Feasibility over = check_feasibility(15.0, 1000.0, p);
  EXPECT_FALSE(over.feasible);
  EXPECT_DOUBLE_EQ(over.violation, 0.5);
  EXPECT_DOUBLE_EQ(check_feasibility(15.0, 1500.0, p).violation, 1.0);
}

TEST(CostModel, FeasibilityAgreesWithRecomputation) {
  const Fixture s = synthetic(0.4, 0.3);
  Rng rng(2);
  int feasible = 0;
  for (int i = 0; i < 1000; ++i) {
    const SubnetConfig c = sample_uniform(s.space, rng);
    const Feasibility f = is_feasible(s.profile, s.arch, c);
    const double lat = estimate_latency(s.profile, c);
    const double mem = estimate_memory(s.profile, s.arch, c);
    const bool expect = lat <= s.profile.budget_latency_ms && mem <= static_cast<double>(s.profile.budget_memory_bytes);
    ASSERT_EQ(f.feasible, expect);
    EXPECT_EQ(f.violation == 0.0, expect);
    feasible += expect ? 1 : 0;
  }
  EXPECT_GT(feasible, 0);
  EXPECT_LT(feasible, 1000);
}

TEST(CostModel, OrinFixtureReproducesTable) {
  const PaperFixture f = orin_nx_paper_fixture();
  auto cfg = [](int bits) {
    SubnetConfig c;
    c.layers = {LayerChoice{true, 4.0, 1.0, bits, bits}};
    return c;
  };
  const double l16 = estimate_latency(f.profile, cfg(16));
  const double l8 = estimate_latency(f.profile, cfg(8));
  const double l4 = estimate_latency(f.profile, cfg(4));
  EXPECT_NEAR(l16, 644.74, 1e-9);
  EXPECT_NEAR(l8, 297.84, 1e-9);
  EXPECT_NEAR(l4, 217.38, 1e-9);
  EXPECT_NEAR(l16 / l8, 2.16, 0.01);
  EXPECT_NEAR(l16 / l4, 2.97, 0.01);
  const double m16 = estimate_memory(f.profile, f.arch, cfg(16));
  const double m8 = estimate_memory(f.profile, f.arch, cfg(8));
  const double m4 = estimate_memory(f.profile, f.arch, cfg(4));
  EXPECT_NEAR(m16 / 1e9, 15.2, 1e-6);
  EXPECT_NEAR(m16 / m8, 1.92, 0.01);
  EXPECT_NEAR(m16 / m4, 3.80, 0.01);
}

TEST(CostModel, CostsAreMonotone) {
  const Fixture s = synthetic();
  Rng rng(3);
  auto raise = [](const auto& menu, auto v) {
    for (std::size_t i = 0; i + 1 < menu.size(); ++i) {
      if (menu[i] == v) return menu[i + 1];
    }
    return v;
  };
  for (int i = 0; i < 300; ++i) {
    const SubnetConfig c = sample_uniform(s.space, rng);
    const double lat = estimate_latency(s.profile, c);
    const double mem = estimate_memory(s.profile, s.arch, c);
    for (std::size_t l = 0; l < c.layers.size(); ++l) {
      for (int field = 0; field < 5; ++field) {
        SubnetConfig u = c;
        LayerChoice& x = u.layers[l];
        if (field == 0) x.keep = true;
        if (field == 1) x.mlp_ratio = raise(s.space.mlp_ratios, x.mlp_ratio);
        if (field == 2) x.head_ratio = raise(s.space.head_ratios, x.head_ratio);
        if (field == 3) x.weight_bits = raise(s.space.weight_bits, x.weight_bits);
        if (field == 4) x.act_bits = raise(s.space.act_bits, x.act_bits);
        EXPECT_GE(estimate_latency(s.profile, u), lat);
        EXPECT_GE(estimate_memory(s.profile, s.arch, u), mem);
      }
    }
  }
}

TEST(CostModel, LoaderRejectsBadTables) {
  const Fixture s = synthetic();
  const nlohmann::json good = profile_to_json(s.profile);
  EXPECT_NO_THROW(validate_profile(profile_from_json(good), s.space));

  nlohmann::json missing = good;
  missing["entries"].erase(missing["entries"].begin() + 3);
  try {
    validate_profile(profile_from_json(missing), s.space);
    FAIL() << "incomplete table accepted";
  } catch (const UserError& e) {
    EXPECT_TRUE(contains(e.what(), "incomplete")) << e.what();
  }

  DeviceProfile bent = s.profile;
  bent.lut.at(BlockKey{4.0, 1.0, 16, 16}).latency_ms = 1e-3;
  try {
    validate_profile(bent, s.space);
    FAIL() << "non-monotone table accepted";
  } catch (const UserError& e) {
    EXPECT_TRUE(contains(e.what(), "(r=4, h=1, bw=16, ba=16)")) << e.what();
  }

  nlohmann::json extra = good;
  extra["colour"] = "red";
  EXPECT_THROW(profile_from_json(extra), UserError);
  nlohmann::json no_id = good;
  no_id.erase("device_id");
  EXPECT_THROW(profile_from_json(no_id), UserError);
  nlohmann::json dup = good;
  dup["entries"].push_back(dup["entries"][0]);
  EXPECT_THROW(profile_from_json(dup), UserError);
}

TEST(CostModel, ProfileFileRoundTrip) {
  const Fixture s = synthetic();
  const auto path = std::filesystem::temp_directory_path() / "dcqfa_profile_roundtrip.json";
  save_profile(s.profile, path.string());
  const DeviceProfile back = load_profile(path.string(), s.space);
  std::filesystem::remove(path);
  EXPECT_EQ(back.device_id, s.profile.device_id);
  EXPECT_EQ(back.budget_memory_bytes, s.profile.budget_memory_bytes);
  EXPECT_DOUBLE_EQ(back.budget_latency_ms, s.profile.budget_latency_ms);
  ASSERT_EQ(back.lut.size(), s.profile.lut.size());
  for (const auto& [k, e] : s.profile.lut) {
    EXPECT_DOUBLE_EQ(back.lut.at(k).latency_ms, e.latency_ms);
    EXPECT_EQ(back.lut.at(k).act_mem_bytes, e.act_mem_bytes);
  }
  EXPECT_THROW(load_profile("/nonexistent/profile.json", s.space), UserError);
}
