#include <gtest/gtest.h>

#include <cmath>

#include "dcqfa/supernet.hpp"
#include "checks.hpp"

using namespace dcqfa;
using dcqfa::testing::calibrate_bank;
using dcqfa::testing::random_tensor;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  const std::size_t rows = t.rank() == 2 ? t.dim(0) : 1;
  const std::size_t cols = t.rank() == 2 ? t.dim(1) : t.dim(0);
  Mat m(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) m[r][c] = t[r * cols + c];
  }
  return m;
}

// x[rows, k] * w[:k, :cols] + b[:cols]
Mat affine(const Mat& x, const Tensor& w, const Tensor& b, std::size_t k, std::size_t cols) {
  const std::size_t wc = w.dim(1);
  Mat y(x.size(), std::vector<double>(cols));
  for (std::size_t r = 0; r < x.size(); ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double acc = b[c];
      for (std::size_t i = 0; i < k; ++i) acc += x[r][i] * static_cast<double>(w[i * wc + c]);
      y[r][c] = acc;
    }
  }
  return y;
}

Mat norm(const Mat& x, const Tensor& g, const Tensor& b, double eps) {
  Mat y = x;
  for (auto& row : y) {
    double mu = 0.0, var = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(row.size());
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(row.size());
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = (row[c] - mu) / std::sqrt(var + eps) * g[c] + b[c];
  }
  return y;
}

// Plain transformer over the supernet weights, no quantization, double precision.
Mat reference_forward(const Supernet& net, const SubnetConfig& cfg, const Tensor& obs) {
  const Architecture& a = net.arch();
  const auto& P = net.params();
  const std::size_t n = obs.dim(0), T = a.tokens, d = a.d_model, hd = a.head_dim();
  const Mat e = affine(to_mat(obs), P[0], P[1], a.obs_dim, T * d);
  Mat x(n * T, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t c = 0; c < d; ++c) x[i * T + t][c] = e[i][t * d + c];
    }
  }
  for (std::size_t l = 0; l < a.num_layers; ++l) {
    const LayerChoice& ch = cfg.layers[l];
    if (!ch.keep) continue;
    auto p = [&](BlockParam bp) -> const Tensor& { return P[net.block_index(l, bp)]; };
    const std::size_t heads = a.heads_for(ch.head_ratio), att = heads * hd, w = a.mlp_width_for(ch.mlp_ratio);
    const Mat h = norm(x, p(kLn1Gain), p(kLn1Bias), a.ln_eps);
    const Mat q = affine(h, p(kWq), p(kBq), d, att);
    const Mat k = affine(h, p(kWk), p(kBk), d, att);
    const Mat v = affine(h, p(kWv), p(kBv), d, att);
    Mat mixed(n * T, std::vector<double>(att, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t hh = 0; hh < heads; ++hh) {
        for (std::size_t t = 0; t < T; ++t) {
          std::vector<double> s(T);
          double mx = -1e300;
          for (std::size_t u = 0; u < T; ++u) {
            double dot = 0.0;
            for (std::size_t c = 0; c < hd; ++c) dot += q[i * T + t][hh * hd + c] * k[i * T + u][hh * hd + c];
            s[u] = dot / std::sqrt(static_cast<double>(hd));
            mx = std::max(mx, s[u]);
          }
          double z = 0.0;
          for (double& sv : s) z += (sv = std::exp(sv - mx));
          for (std::size_t u = 0; u < T; ++u) {
            for (std::size_t c = 0; c < hd; ++c) mixed[i * T + t][hh * hd + c] += s[u] / z * v[i * T + u][hh * hd + c];
          }
        }
      }
    }
    const Mat o = affine(mixed, p(kWo), p(kBo), att, d);
    for (std::size_t r = 0; r < x.size(); ++r) {
      for (std::size_t c = 0; c < d; ++c) x[r][c] += o[r][c];
    }
    Mat u = affine(norm(x, p(kLn2Gain), p(kLn2Bias), a.ln_eps), p(kW1), p(kB1), d, w);
    for (auto& row : u) {
      for (double& z : row) z = 0.5 * z * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (z + 0.044715 * z * z * z)));
    }
    const Mat y = affine(u, p(kW2), p(kB2), w, d);
    for (std::size_t r = 0; r < x.size(); ++r) {
      for (std::size_t c = 0; c < d; ++c) x[r][c] += y[r][c];
    }
  }
  const std::size_t hi = net.head_index();
  const Mat hn = norm(x, P[hi], P[hi + 1], a.ln_eps);
  Mat pooled(n, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t c = 0; c < d; ++c) pooled[i][c] += hn[i * T + t][c] / static_cast<double>(T);
    }
  }
  return affine(pooled, P[hi + 2], P[hi + 3], d, a.act_dim);
}

double max_abs_diff(const Tensor& got, const Mat& want) {
  double m = 0.0;
  for (std::size_t r = 0; r < want.size(); ++r) {
    for (std::size_t c = 0; c < want[r].size(); ++c) m = std::max(m, std::fabs(got[r * want[r].size() + c] - want[r][c]));
  }
  return m;
}

Tensor random_obs(std::size_t n, Rng& rng) { return random_tensor({n, 6}, rng, -1.0, 1.0); }

SubnetConfig mixed_config(const SearchSpace& s) {
  SubnetConfig c = largest_config(s);
  c.layers[0] = LayerChoice{true, 2.0, 0.5, 4, 8};
  c.layers[1].keep = false;
  c.layers[2] = LayerChoice{true, 1.0, 1.0, 8, 4};
  c.layers[3] = LayerChoice{true, 4.0, 0.5, 16, 16};
  return canonicalize(s, c);
}

SearchSpace four_bit_space() {
  SearchSpace s;
  s.weight_bits = {4, 8, 16};
  s.act_bits = {4, 8, 16};
  return s;
}

}  // namespace

TEST(Supernet, LargestFullPrecisionMatchesReference) {
  const SearchSpace s;
  Supernet net(Architecture::for_space(s), s, 11);
  Rng rng(1);
  const Tensor obs = random_obs(16, rng);
  const SubnetConfig cfg = largest_config(s);
  EXPECT_LT(max_abs_diff(net.predict(cfg, obs), reference_forward(net, cfg, obs)), 1e-6);
}

TEST(Supernet, AllSkippedIsHeadOfEmbedding) {
  SearchSpace s;
  s.min_depth = 0;
  Supernet net(Architecture::for_space(s), s, 12);
  Rng rng(2);
  const Tensor obs = random_obs(8, rng);
  SubnetConfig cfg = largest_config(s);
  for (auto& l : cfg.layers) l.keep = false;
  cfg = canonicalize(s, cfg);
  EXPECT_LT(max_abs_diff(net.predict(cfg, obs), reference_forward(net, cfg, obs)), 1e-6);
  // Changing every block weight leaves the output untouched.
  const Tensor before = net.predict(cfg, obs);
  for (std::size_t l = 0; l < s.num_layers; ++l) net.params()[net.block_index(l, kW1)].storage().assign(
      net.params()[net.block_index(l, kW1)].size(), 3.0f);
  EXPECT_EQ(net.predict(cfg, obs), before);
}

TEST(Supernet, ExtractedSubnetMatchesSupernet) {
  const SearchSpace s = four_bit_space();
  Supernet net(Architecture::for_space(s), s, 13);
  Rng rng(3);
  const Tensor obs = random_obs(32, rng);
  std::vector<SubnetConfig> configs{mixed_config(s)};
  for (int i = 0; i < 20; ++i) configs.push_back(sample_uniform(s, rng));
  calibrate_bank(net, configs, obs);
  const Tensor probe = random_obs(16, rng);
  for (const auto& c : configs) {
    const Subnet sub = net.extract(c);
    const Tensor a = net.predict(c, probe);
    const Tensor b = sub.predict(probe);
    for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], 1e-6);
    EXPECT_EQ(sub.parameter_count(), parameter_count(net.arch(), c));
  }
}

TEST(Supernet, ParameterCountFormula) {
  const Architecture a;
  const std::uint64_t d = 32;
  for (double r : {1.0, 2.0, 4.0}) {
    for (double h : {0.5, 1.0}) {
      const std::uint64_t att = (h == 0.5 ? 2 : 4) * 8;
      const std::uint64_t w = static_cast<std::uint64_t>(r * 32);
      const std::uint64_t expected = 2 * d + 3 * (d * att + att) + (att * d + d) + 2 * d + (d * w + w) + (w * d + d);
      EXPECT_EQ(block_param_count(a, r, h).total(), expected);
    }
  }
  EXPECT_EQ(base_param_count(a), 6u * 96 + 96 + 64 + 64 + 2);
  // MLP weight entries scale linearly with r.
  auto mlp = [&](double r) { return block_param_count(a, r, 1.0).matrices - 4 * d * d; };
  EXPECT_EQ(mlp(4.0), 2 * mlp(2.0));
  EXPECT_EQ(mlp(2.0), 2 * mlp(1.0));
}

TEST(Supernet, ExtractionReadsOnlyPrefixSlices) {
  const SearchSpace s = four_bit_space();
  Supernet net(Architecture::for_space(s), s, 14);
  Rng rng(4);
  const Tensor obs = random_obs(16, rng);
  SubnetConfig c = largest_config(s);
  c.layers[0] = LayerChoice{true, 1.0, 0.5, 8, 16};
  c.layers[2].keep = false;
  c = canonicalize(s, c);
  const Tensor before = net.predict(c, obs);
  const std::size_t att = 16, w = 32, W = 128, A = 32;
  auto& P = net.params();
  Tensor& wq = P[net.block_index(0, kWq)];
  for (std::size_t r = 0; r < 32; ++r) {
    for (std::size_t col = att; col < A; ++col) wq[r * A + col] = 9.0f;
  }
  Tensor& w1 = P[net.block_index(0, kW1)];
  for (std::size_t r = 0; r < 32; ++r) {
    for (std::size_t col = w; col < W; ++col) w1[r * W + col] = -9.0f;
  }
  Tensor& w2 = P[net.block_index(0, kW2)];
  for (std::size_t i = w * 32; i < w2.size(); ++i) w2[i] = 5.0f;
  Tensor& wo = P[net.block_index(0, kWo)];
  for (std::size_t i = att * 32; i < wo.size(); ++i) wo[i] = 5.0f;
  for (std::size_t i = 0; i < kBlockParamCount; ++i) {
    Tensor& t = P[net.block_index(2, static_cast<BlockParam>(i))];
    t.storage().assign(t.size(), 7.0f);
  }
  EXPECT_EQ(net.predict(c, obs), before);
}

TEST(Supernet, InactiveSlicesGetZeroGradient) {
  const SearchSpace s;
  Supernet net(Architecture::for_space(s), s, 15);
  Rng rng(5);
  const Tensor obs = random_obs(8, rng);
  SubnetConfig c = largest_config(s);
  c.layers[0] = LayerChoice{true, 1.0, 0.5, 16, 16};
  c.layers[1].keep = false;
  c = canonicalize(s, c);
  Tape t;
  const auto bound = net.bind(t, true);
  Var y = net.forward(t, bound, c, t.constant(obs));
  t.backward(mse_loss(t, y, t.constant(random_tensor({8, 2}, rng))));
  const std::size_t att = 16, w = 32, W = 128, A = 32;
  const Tensor gq = t.grad(bound[net.block_index(0, kWq)]);
  const Tensor g1 = t.grad(bound[net.block_index(0, kW1)]);
  const Tensor g2 = t.grad(bound[net.block_index(0, kW2)]);
  double active = 0.0;
  for (std::size_t r = 0; r < 32; ++r) {
    for (std::size_t col = 0; col < A; ++col) {
      if (col >= att) EXPECT_EQ(gq[r * A + col], 0.0f);
      else active += std::fabs(gq[r * A + col]);
    }
    for (std::size_t col = w; col < W; ++col) EXPECT_EQ(g1[r * W + col], 0.0f);
  }
  for (std::size_t i = w * 32; i < g2.size(); ++i) EXPECT_EQ(g2[i], 0.0f);
  EXPECT_GT(active, 0.0);
  for (std::size_t i = 0; i < kBlockParamCount; ++i) {
    const Tensor g = t.grad(bound[net.block_index(1, static_cast<BlockParam>(i))]);
    for (float v : g.storage()) EXPECT_EQ(v, 0.0f);
  }
}

TEST(Supernet, EndToEndGradientThroughQuantizers) {
  EXPECT_LT(dcqfa::testing::supernet_gradient_error(), 1e-3);
}

TEST(Supernet, UncalibratedActivationQuantizerThrows) {
  const SearchSpace s;
  Supernet net(Architecture::for_space(s), s, 17);
  Rng rng(7);
  SubnetConfig c = largest_config(s);
  c.layers[1].act_bits = 8;
  EXPECT_FALSE(net.calibrated_for(c));
  EXPECT_THROW(net.predict(c, random_obs(2, rng)), UserError);
  EXPECT_THROW(net.extract(c), UserError);
  EXPECT_TRUE(net.calibrated_for(largest_config(s)));
  EXPECT_THROW(net.predict(largest_config(s), random_tensor({2, 5}, rng)), UserError);
}
