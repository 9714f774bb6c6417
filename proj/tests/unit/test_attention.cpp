#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "oracle/accessible.hpp"
#include "tah/attention/depth_mass.hpp"
#include "tah/attention/duo_causal.hpp"
#include "tah/numerics/random.hpp"

using namespace tah;

TEST(Accessible, Examples) {
  EXPECT_TRUE(accessible({2, 2}, {1, 1}, true));
  EXPECT_FALSE(accessible({2, 1}, {2, 2}, true));
  EXPECT_FALSE(accessible({2, 2}, {1, 1}, false));
  EXPECT_TRUE(accessible({2, 2}, {2, 2}, true));
}

TEST(Accessible, MissingDeeperEntryIsInvisible) {
  // token 1 stops at depth 1; the others reach depth 2
  const std::vector<int> depths = {2, 1, 2, 2};
  const auto states = oracle::materialised(depths);
  const auto vis = oracle::visibility(depths, states);
  std::size_t q = 0;
  for (std::size_t s = 0; s < states.size(); ++s)
    if (states[s] == AttnCoord{3, 2}) q = s;
  std::vector<AttnCoord> seen;
  for (std::size_t k = 0; k < states.size(); ++k)
    if (vis[q][k]) seen.push_back(states[k]);
  const std::vector<AttnCoord> expected = {{0, 1}, {1, 1}, {2, 1}, {3, 1}, {0, 2}, {2, 2}, {3, 2}};
  EXPECT_EQ(seen, expected);
  const auto mask = build_mask(std::vector<AttnCoord>{{3, 2}}, states);
  for (std::size_t k = 0; k < states.size(); ++k) EXPECT_EQ(mask.allowed(0, k), vis[q][k]);
}

TEST(BuildMask, CausalAtDepthOne) {
  const std::vector<AttnCoord> c = {{0, 1}, {1, 1}, {2, 1}};
  const auto m = build_mask(c, c);
  for (std::size_t q = 0; q < 3; ++q) {
    for (std::size_t k = 0; k < 3; ++k) {
      if (k <= q) {
        EXPECT_EQ(m.at(q, k), 0.0);
      } else {
        EXPECT_EQ(m.at(q, k), -std::numeric_limits<double>::infinity());
      }
    }
  }
}

TEST(BuildMask, TwoTokensBothDeep) {
  const std::vector<AttnCoord> cache = {{0, 1}, {1, 1}, {0, 2}, {1, 2}};
  const auto m = build_mask(std::vector<AttnCoord>{{0, 2}}, cache);
  std::size_t zeros = 0;
  for (std::size_t k = 0; k < cache.size(); ++k) zeros += m.allowed(0, k);
  EXPECT_EQ(zeros, 2u);
  EXPECT_TRUE(m.allowed(0, 0));
  EXPECT_TRUE(m.allowed(0, 2));
}

TEST(BuildMask, EmptyQueries) {
  const std::vector<AttnCoord> cache = {{0, 1}};
  const auto m = build_mask({}, cache);
  EXPECT_EQ(m.rows, 0u);
  EXPECT_TRUE(m.values.empty());
}

TEST(BuildMask, MonotoneVisibility) {
  const std::vector<int> depths = {3, 1, 2, 3, 2};
  const auto states = oracle::materialised(depths);
  for (std::int64_t i = 0; i < 5; ++i) {
    std::size_t prev = 0;
    for (int d = 1; d <= 3; ++d) {
      const auto m = build_mask(std::vector<AttnCoord>{{i, d}}, states);
      std::size_t n = 0;
      for (std::size_t k = 0; k < states.size(); ++k) n += m.allowed(0, k);
      EXPECT_GE(n, prev);
      prev = n;
    }
  }
}

TEST(LayerCache, ConsistencyErrors) {
  LayerCache<float> c(2);
  const std::vector<float> kv = {1, 2};
  EXPECT_THROW(c.append({0, 2}, kv, kv), CacheError);
  c.append({0, 1}, kv, kv);
  c.append({1, 1}, kv, kv);
  EXPECT_THROW(c.append({1, 1}, kv, kv), CacheError);
  c.append({1, 2}, kv, kv);
  EXPECT_THROW(c.append({0, 2}, kv, kv), CacheError);
  EXPECT_THROW(c.append({2, 1}, std::vector<float>{1}, kv), DimensionError);
  const std::vector<AttnCoord> idx = {{0, 1}, {1, 1}, {1, 2}};
  EXPECT_EQ(c.index(), idx);
  EXPECT_EQ(c.stacked_keys().shape(), (Shape{3, 2}));
}

TEST(Attend, UniformScoresAverageValues) {
  Tensor<double> q({1, 2}, {0, 0});
  Tensor<double> k({2, 2}, {1, 2, 3, 4});
  Tensor<double> v({2, 2}, {1, 3, 5, 7});
  const std::vector<AttnCoord> cache = {{0, 1}, {1, 1}};
  const auto m = build_mask(std::vector<AttnCoord>{{1, 1}}, cache);
  auto o = attend(q, k, v, m, 1);
  EXPECT_DOUBLE_EQ(o.vec()[0], 3.0);
  EXPECT_DOUBLE_EQ(o.vec()[1], 5.0);
}

TEST(Attend, MatchesDenseMaskedReference) {
  Rng rng(7);
  const std::size_t h = 8, heads = 2, hd = 4;
  const std::vector<int> depths = {2, 1, 3, 2};
  const auto states = oracle::materialised(depths);
  const std::size_t n = states.size();
  auto q = Tensor<double>::zeros({n, h});
  auto k = Tensor<double>::zeros({n, h});
  auto v = Tensor<double>::zeros({n, h});
  fill_normal<double>(q.mutable_data(), rng, 1.0);
  fill_normal<double>(k.mutable_data(), rng, 1.0);
  fill_normal<double>(v.mutable_data(), rng, 1.0);
  const auto mask = build_mask(states, states);
  const auto out = attend(q, k, v, mask, heads);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t hh = 0; hh < heads; ++hh) {
      std::vector<double> s(n);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < hd; ++c) dot += q.at(i, hh * hd + c) * k.at(j, hh * hd + c);
        s[j] = dot / 2.0 + mask.at(i, j);
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (auto& x : s) z += (x = std::exp(x - mx));
      for (std::size_t c = 0; c < hd; ++c) {
        double ref = 0.0;
        for (std::size_t j = 0; j < n; ++j) ref += s[j] / z * v.at(j, hh * hd + c);
        EXPECT_NEAR(out.at(i, hh * hd + c), ref, 1e-12);
      }
    }
  }
}

TEST(Attend, MaskShapeMismatch) {
  const std::vector<AttnCoord> cache = {{0, 1}};
  const auto m = build_mask(std::vector<AttnCoord>{{0, 1}}, cache);
  EXPECT_THROW(attend(Tensor<double>::zeros({2, 2}), Tensor<double>::zeros({1, 2}), Tensor<double>::zeros({1, 2}), m, 1),
               DimensionError);
}

TEST(DepthMass, OnlyDepthOneKeysGivesOne) {
  AttentionRecord<double> rec;
  rec.query_coords = {{1, 2}};
  rec.key_coords = {{0, 1}, {1, 1}, {1, 2}};
  rec.allowed = {{0, 1, 2}};
  rec.probs.probs = {{{0.4, 0.6, 0.0}, {0.25, 0.25, 0.5}}};
  const auto m = depth_mass_from_record(rec);
  ASSERT_EQ(m.heads.size(), 2u);
  EXPECT_DOUBLE_EQ(m.heads[0].depth1, 1.0);
  EXPECT_DOUBLE_EQ(m.heads[1].depth1, 0.5);
  EXPECT_DOUBLE_EQ(m.mean, 0.75);
  EXPECT_DOUBLE_EQ(m.stddev, 0.25);
}

TEST(DepthMass, UniformOverEqualCountsIsHalf) {
  ModelConfig cfg;
  cfg.vocab_size = 8;
  cfg.hidden_dim = 8;
  cfg.num_heads = 2;
  cfg.head_dim = 4;
  cfg.mlp_dim = 16;
  cfg.lwe_top_k = 8;
  auto m = Backbone<double>::init(cfg, 3);
  // zero query/key projections make every score equal
  for (auto& l : m.layers()) {
    for (auto& x : l.proj[static_cast<std::size_t>(Proj::q)].mutable_data()) x = 0.0;
  }
  const auto mass = attention_depth_mass(m, {{1}});
  for (const auto& layer : mass) {
    for (const auto& h : layer.heads) {
      EXPECT_NEAR(h.depth1, 0.5, 1e-12);
      EXPECT_NEAR(h.depth1 + h.deeper, 1.0, 1e-12);
    }
  }
}

TEST(DepthMass, RequiresDeepModel) {
  ModelConfig cfg;
  cfg.max_depth = 1;
  auto m = Backbone<float>::init(cfg, 1);
  EXPECT_THROW(attention_depth_mass(m, {{1, 2}}), ContractError);
}
