#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "srlb/pruning.hpp"
#include "support.hpp"

using namespace srlb;
using testsupport::random_tokens;
using testsupport::tiny_config;

namespace {

std::size_t ones(const Tensor& m) {
  return static_cast<std::size_t>(std::count(m.data().begin(), m.data().end(), 1.0f));
}

// Exhaustive top-k: among all k-subsets of a unit, the one with the largest
// score sum; ties go to the lexicographically smallest index set.
std::vector<std::size_t> brute_top_k(const std::vector<float>& s, std::size_t k) {
  const std::size_t n = s.size();
  std::vector<std::size_t> best;
  double best_sum = -1;
  for (std::uint32_t bits = 0; bits < (1u << n); ++bits) {
    if (static_cast<std::size_t>(__builtin_popcount(bits)) != k) continue;
    std::vector<std::size_t> idx;
    double sum = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (bits & (1u << i)) idx.push_back(i), sum += s[i];
    if (sum > best_sum || (sum == best_sum && idx < best)) best_sum = sum, best = idx;
  }
  return best;
}

}  // namespace

TEST(Pruning, KeptCountUsesFloor) {
  EXPECT_EQ(kept_count(10, 0.5), 5u);
  EXPECT_EQ(kept_count(7, 0.5), 4u);
  EXPECT_EQ(kept_count(3, 0.0), 3u);
  EXPECT_EQ(kept_count(3, 1.0), 0u);
  EXPECT_EQ(kept_count(10, 0.3), 7u);  // 0.3*10 is 2.9999999999999996 in binary
}

TEST(Pruning, MagnitudeScoreExample) {
  const Tensor w = Tensor::matrix({{0.1f, -0.5f}, {0.3f, 0.2f}});
  EXPECT_TRUE(score(w, PruneMethod::magnitude).bit_equal(Tensor::matrix({{0.1f, 0.5f}, {0.3f, 0.2f}})));
}

TEST(Pruning, WandaScoreExample) {
  const Tensor w = Tensor::matrix({{0.1f, -0.5f}, {0.3f, 0.2f}});
  const Tensor norms = Tensor::vector({2.0f, 1.0f});
  const Tensor s = score(w, PruneMethod::wanda, &norms);
  const float expect[] = {0.2f, 0.5f, 0.6f, 0.2f};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(s[i], expect[i], 1e-7);
  EXPECT_THROW(score(w, PruneMethod::wanda), ContractError);
  const Tensor zn = Tensor::zeros({2});
  EXPECT_EQ(score(w, PruneMethod::wanda, &zn).sum(), 0.0f);
}

TEST(Pruning, SelectMaskExamples) {
  const Tensor sc = Tensor::matrix({{0.1f, 0.5f}, {0.3f, 0.2f}});
  EXPECT_TRUE(select_mask(sc, 0.5, Granularity::per_matrix).bit_equal(Tensor::matrix({{0, 1}, {1, 0}})));
  EXPECT_TRUE(select_mask(sc, 0.0, Granularity::per_matrix).bit_equal(Tensor::ones({2, 2})));
  const Tensor ties = Tensor::matrix({{0.7f, 0.7f}, {0.2f, 0.2f}});
  EXPECT_TRUE(select_mask(ties, 0.5, Granularity::per_row).bit_equal(Tensor::matrix({{1, 0}, {1, 0}})));
}

TEST(Pruning, SelectMaskMatchesExhaustiveTopK) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> dim(1, 4), level(0, 3);
  const double sparsities[] = {0.0, 0.25, 0.5, 0.6, 0.75, 1.0};
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t r = dim(rng), c = dim(rng);
    Tensor sc({r, c});
    for (auto& v : sc.data()) v = static_cast<float>(level(rng)) * 0.25f;  // many ties
    const double s = sparsities[trial % 6];
    for (Granularity g : {Granularity::per_matrix, Granularity::per_row}) {
      const Tensor m = select_mask(sc, s, g);
      const std::size_t unit = g == Granularity::per_row ? c : r * c;
      for (std::size_t base = 0; base < r * c; base += unit) {
        std::vector<float> u(sc.ptr() + base, sc.ptr() + base + unit);
        const auto keep = brute_top_k(u, kept_count(unit, s));
        Tensor expect({unit});
        for (std::size_t i : keep) expect[i] = 1.0f;
        for (std::size_t i = 0; i < unit; ++i) ASSERT_EQ(m[base + i], expect[i]) << "trial " << trial;
      }
    }
  }
}

TEST(Pruning, KeptCountPropertyOnRandomMatrices) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> dim(1, 40);
  std::uniform_real_distribution<double> sp(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t r = dim(rng), c = dim(rng);
    const double s = sp(rng);
    const Tensor sc = testsupport::random_tensor({r, c}, trial);
    const Tensor pm = select_mask(sc, s, Granularity::per_matrix);
    EXPECT_EQ(ones(pm), kept_count(r * c, s));
    const Tensor pr = select_mask(sc, s, Granularity::per_row);
    for (std::size_t i = 0; i < r; ++i) {
      std::size_t k = 0;
      for (std::size_t j = 0; j < c; ++j) k += pr.at(i, j) == 1.0f;
      EXPECT_EQ(k, kept_count(c, s));
    }
    for (float v : pr.data()) EXPECT_TRUE(v == 0.0f || v == 1.0f);
  }
}

TEST(Pruning, FeatureNormsHandExample) {
  const Tensor x = Tensor::matrix({{1, 0}, {0, 1}});
  EXPECT_TRUE(input_feature_norms(x).bit_equal(Tensor::vector({1, 1})));
  const Tensor y = Tensor::matrix({{3, 0}, {4, 2}});
  EXPECT_TRUE(input_feature_norms(y).bit_equal(Tensor::vector({5, 2})));
}

TEST(Pruning, ActivationNormsScaleBySqrt2UnderDuplication) {
  const auto c = tiny_config();
  const Model m = init_random(c, 1);
  const TokenMatrix t = random_tokens(3, 6, 2);
  TokenMatrix dup = t;
  dup.rows *= 2;
  dup.ids.insert(dup.ids.end(), t.ids.begin(), t.ids.end());
  const auto a = collect_activation_norms(m, t);
  const auto b = collect_activation_norms(m, dup);
  for (std::size_t blk = 0; blk < c.n_blocks; ++blk)
    for (MatrixKind k : kAllMatrices) {
      const Tensor& na = a.at(blk, k);
      const Tensor& nb = b.at(blk, k);
      EXPECT_EQ(na.numel(), k == MatrixKind::w2 ? c.ffn_dim : c.hidden);
      for (std::size_t i = 0; i < na.numel(); ++i) {
        EXPECT_GE(na[i], 0.0f);
        EXPECT_NEAR(nb[i], na[i] * std::sqrt(2.0f), 1e-4f * (1 + na[i]));
      }
    }
  EXPECT_THROW(collect_activation_norms(m, TokenMatrix{}), ContractError);
}

TEST(Pruning, WandaEqualsMagnitudeUnderUniformNorms) {
  const Tensor w = testsupport::random_tensor({8, 12}, 4);
  const Tensor n = Tensor({12}, 3.5f);
  for (Granularity g : {Granularity::per_matrix, Granularity::per_row}) {
    EXPECT_TRUE(select_mask(score(w, PruneMethod::wanda, &n), 0.5, g)
                    .bit_equal(select_mask(score(w, PruneMethod::magnitude), 0.5, g)));
  }
}

TEST(Pruning, DefaultGranularityPerMethod) {
  EXPECT_EQ(default_granularity(PruneMethod::wanda), Granularity::per_row);
  EXPECT_EQ(default_granularity(PruneMethod::magnitude), Granularity::per_matrix);
}

TEST(Pruning, ScopeLeavesOtherMatricesDense) {
  const auto c = tiny_config();
  const Model m = init_random(c, 0);
  PrunerSpec spec;
  spec.scope = Scope::attention_only;
  auto mask = compute_mask(m, spec);
  for (const auto& b : mask.blocks) {
    EXPECT_EQ(ones(b[matrix_index(MatrixKind::w1)]), b[matrix_index(MatrixKind::w1)].numel());
    EXPECT_EQ(ones(b[matrix_index(MatrixKind::w2)]), b[matrix_index(MatrixKind::w2)].numel());
    EXPECT_EQ(ones(b[matrix_index(MatrixKind::wq)]), kept_count(c.hidden * c.hidden, 0.5));
  }
  spec.scope = Scope::ffn_only;
  mask = compute_mask(m, spec);
  for (const auto& b : mask.blocks) {
    for (MatrixKind k : {MatrixKind::wq, MatrixKind::wk, MatrixKind::wv, MatrixKind::wo})
      EXPECT_EQ(ones(b[matrix_index(k)]), b[matrix_index(k)].numel());
    EXPECT_EQ(ones(b[matrix_index(MatrixKind::w1)]), kept_count(c.hidden * c.ffn_dim, 0.5));
  }
}

TEST(Pruning, ApplyMaskProperties) {
  const auto c = tiny_config();
  const Model dense = init_random(c, 0);
  PrunerSpec spec;
  spec.method = PruneMethod::wanda;
  const TokenMatrix calib = random_tokens(4, 8, 1);
  const SparsityMask mask = compute_mask(dense, spec, &calib);

  Model once = dense;
  apply_mask(once, mask);
  Model twice = once;
  apply_mask(twice, mask);
  EXPECT_TRUE(once.bit_equal(twice));
  for (std::size_t b = 0; b < c.n_blocks; ++b)
    for (MatrixKind k : kAllMatrices) {
      const Tensor& w = once.blocks[b].matrix(k);
      const Tensor& mk = mask.at(b, k);
      std::size_t zeros = 0;
      for (std::size_t i = 0; i < w.numel(); ++i) {
        EXPECT_EQ(w[i], mk[i] == 0.0f ? 0.0f : dense.blocks[b].matrix(k)[i]);
        zeros += w[i] == 0.0f;
      }
      EXPECT_GE(zeros, w.numel() / 2);
    }
  // Embeddings and head are never pruned.
  EXPECT_TRUE(once.tok_embed.bit_equal(dense.tok_embed));
  EXPECT_TRUE(once.head.bit_equal(dense.head));

  PrunerSpec none;
  none.sparsity = 0.0;
  Model same = dense;
  apply_mask(same, compute_mask(dense, none));
  EXPECT_TRUE(same.bit_equal(dense));
}

TEST(Pruning, ApplyMaskShapeMismatch) {
  Model m = init_random(tiny_config(), 0);
  SparsityMask mask = compute_mask(m, PrunerSpec{});
  mask.blocks[0][0] = Tensor::ones({3, 3});
  EXPECT_THROW(apply_mask(m, mask), DimensionError);
}

TEST(Pruning, MaskFileRoundTrip) {
  const auto dir = testsupport::temp_dir("mask");
  const Model m = init_random(tiny_config(), 0);
  const SparsityMask mask = compute_mask(m, PrunerSpec{});
  save_mask(mask, dir + "/m.srlb", "feedbeef");
  const SparsityMask back = load_mask(dir + "/m.srlb");
  EXPECT_TRUE(back == mask);
  const Container c = load_container(dir + "/m.srlb");
  EXPECT_EQ(c.meta.at("config_hash"), "feedbeef");
  EXPECT_EQ(c.entries.front().dtype, "u8");
  EXPECT_NE(c.find("blocks.0.wq.mask"), nullptr);
  EXPECT_EQ(c.meta.at("granularity"), "per_matrix");
}

TEST(Pruning, ParseNames) {
  EXPECT_EQ(parse_prune_method("wanda"), PruneMethod::wanda);
  EXPECT_EQ(parse_scope("ffn_only"), Scope::ffn_only);
  EXPECT_THROW(parse_prune_method("sparsegpt"), ConfigError);
  EXPECT_THROW(parse_granularity("per_col"), ConfigError);
}
