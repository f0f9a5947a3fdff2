#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace rose;

namespace {

EmbeddingTable identical(std::size_t n) {
  std::vector<double> d;
  for (std::size_t i = 0; i < n; ++i) d.insert(d.end(), {0.3, -1.2, 2.0});
  return {n, 3, d};
}

std::vector<double> random_dist(Rng& rng, std::size_t n, bool sparse) {
  std::vector<double> p(n);
  double s = 0.0;
  for (double& x : p) {
    x = uniform01(rng);
    if (sparse && uniform01(rng) < 0.4) x = 0.0;
    x = x * x * x;
    s += x;
  }
  if (s == 0.0) p[0] = s = 1.0;
  for (double& x : p) x /= s;
  return p;
}

}  // namespace

TEST(Entropy, Examples) {
  for (std::size_t n : {1u, 2u, 7u, 21u})
    EXPECT_NEAR(generation_entropy(std::vector<double>(n, 1.0 / static_cast<double>(n))), std::log(static_cast<double>(n)), 1e-14);
  EXPECT_EQ(generation_entropy(std::vector<double>{0, 1, 0}), 0.0);
  EXPECT_NEAR(generation_entropy(std::vector<double>{0.5, 0.5, 0, 0}), 0.6931, 1e-4);
}

TEST(SemanticDivergence, IdenticalEmbeddingsGiveMinusMassSquared) {
  const auto emb = identical(5);
  const std::vector<double> p{0.1, 0.4, 0.2, 0.05, 0.25};
  const double q = 0.4 + 0.25 + 0.2;
  EXPECT_NEAR(semantic_divergence(p, emb, {3, true}).value, -q * q, 1e-15);
  double diag = 0.4 * 0.4 + 0.25 * 0.25 + 0.2 * 0.2;
  EXPECT_NEAR(semantic_divergence(p, emb, {3, false}).value, -(q * q - diag), 1e-15);
}

TEST(SemanticDivergence, OrthogonalEmbeddingsKeepOnlyDiagonal) {
  const auto emb = EmbeddingTable::one_hot(5);
  const std::vector<double> p{0.1, 0.4, 0.2, 0.05, 0.25};
  EXPECT_NEAR(semantic_divergence(p, emb, {20, true}).value, -(0.01 + 0.16 + 0.04 + 0.0025 + 0.0625), 1e-15);
  EXPECT_NEAR(semantic_divergence(p, emb, {20, true}).value,
              oracle::semantic_divergence(p, emb, 20, true), 1e-15);
  EXPECT_NEAR(semantic_divergence(p, emb, {20, false}).value, 0.0, 1e-15);
}

TEST(SemanticDivergence, TopOneIsSelfPair) {
  const auto emb = EmbeddingTable::gaussian(5, 4, 1);
  const std::vector<double> p{0.1, 0.4, 0.2, 0.05, 0.25};
  EXPECT_NEAR(semantic_divergence(p, emb, {1, true}).value, -0.16, 1e-15);
}

TEST(SemanticDivergence, TopKTiesGoToSmallerId) {
  const auto top = top_k_tokens(std::vector<double>{0.2, 0.3, 0.2, 0.3}, 3);
  EXPECT_EQ(top, (std::vector<TokenId>{token_at(1), token_at(3), token_at(0)}));
  EXPECT_THROW(top_k_tokens(std::vector<double>{1.0}, 0), std::invalid_argument);
}

TEST(SemanticEntropy, Examples) {
  EXPECT_EQ(semantic_entropy(-0.7, 0.0), -0.0);
  EXPECT_EQ(semantic_entropy(0.0, 1.3), 0.0);
  EXPECT_NEAR(semantic_entropy(-0.5, 0.6931), -0.3466, 1e-4);
}

TEST(Metrics, MatchBruteForceOnRandomInstances) {
  Rng rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + uniform_index(rng, 30);
    const auto p = random_dist(rng, n, trial % 3 == 0);
    const auto emb = EmbeddingTable::gaussian(n, 1 + uniform_index(rng, 8), rng());
    const std::size_t k = 1 + uniform_index(rng, n + 3);
    for (bool diag : {true, false}) {
      const auto m = position_metrics(p, emb, {k, diag});
      const double h = oracle::entropy(p);
      const double sd = oracle::semantic_divergence(p, emb, k, diag);
      ASSERT_NEAR(m.entropy, h, 1e-10);
      ASSERT_NEAR(m.divergence, sd, 1e-10);
      ASSERT_NEAR(m.semantic, sd * h, 1e-10);
      EXPECT_EQ(m.semantic, m.divergence * m.entropy);
      EXPECT_GE(m.entropy, 0.0);
      EXPECT_LE(m.entropy, std::log(static_cast<double>(n)) + 1e-12);
      EXPECT_LE(std::abs(m.divergence), 1.0 + 1e-12);
    }
  }
}

TEST(Metrics, InclusiveDivergenceIsNeverPositive) {
  Rng rng(32);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + uniform_index(rng, 10);
    const auto emb = EmbeddingTable::gaussian(n, 3, rng());
    EXPECT_LE(semantic_divergence(random_dist(rng, n, false), emb, {n, true}).value, 0.0);
  }
}

TEST(Metrics, IdenticalEmbeddingsBoundSemanticEntropy) {
  Rng rng(33);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + uniform_index(rng, 10);
    const std::size_t k = 1 + uniform_index(rng, n);
    const auto p = random_dist(rng, n, false);
    const auto m = position_metrics(p, identical(n), {k, true});
    double q = 0.0;
    for (TokenId t : top_k_tokens(p, k)) q += p[index(t)];
    EXPECT_NEAR(m.semantic, -m.entropy * q * q, 1e-12);
    EXPECT_LE(m.semantic, 0.0);
  }
}

TEST(Metrics, SwappingEqualProbabilityEmbeddingsIsSymmetric) {
  Rng rng(34);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 3 + uniform_index(rng, 6);
    auto p = random_dist(rng, n, false);
    p[1] = p[2];
    double s = std::accumulate(p.begin(), p.end(), 0.0);
    for (double& x : p) x /= s;
    const auto e = EmbeddingTable::gaussian(n, 4, rng());
    auto data = e.data();
    for (std::size_t d = 0; d < 4; ++d) std::swap(data[4 + d], data[8 + d]);
    const EmbeddingTable swapped(n, 4, data);
    for (bool diag : {true, false})
      EXPECT_NEAR(semantic_divergence(p, e, {n, diag}).value, semantic_divergence(p, swapped, {n, diag}).value, 1e-14);
  }
}

TEST(Metrics, SynonymSplitScoresBelowDistinctSplit) {
  const double c = 0.99;
  const EmbeddingTable near(2, 2, {1.0, 0.0, c, std::sqrt(1 - c * c)});
  const auto ortho = EmbeddingTable::one_hot(2);
  const std::vector<double> p{0.5, 0.5};
  for (bool diag : {true, false}) {
    const auto a = position_metrics(p, near, {20, diag});
    const auto b = position_metrics(p, ortho, {20, diag});
    EXPECT_LT(a.semantic, b.semantic);
  }
}

TEST(Annotate, OneEntryPerPosition) {
  auto p = fixture::toy_policy(6, 2);
  Rng rng(1);
  fixture::randomize(p, rng, 1.0);
  const TokenSeq q = p.vocab().encode("<bos> t3");
  const TokenSeq r = p.vocab().encode("t4 t5 => t3 <eos>");
  const auto m = annotate_response(p, q, r);
  ASSERT_EQ(m.size(), r.size());
  TokenSeq ctx = q;
  for (std::size_t i = 0; i < r.size(); ++i) {
    EXPECT_NEAR(m[i].entropy, oracle::entropy(p.distribution(ctx).probs), 1e-12);
    ctx.push_back(r[i]);
  }
}

TEST(Annotate, DeterministicPolicyHasZeroEntropy) {
  auto p = fixture::toy_policy(5, 1);
  for (ContextKey k : fixture::all_windows(p)) {
    auto row = p.mutable_logits(k);
    std::fill(row.begin(), row.end(), -400.0);
    row[3] = 400.0;
  }
  const auto m = annotate_response(p, TokenSeq{}, p.vocab().encode("t3 t3 t3 t3"));
  for (const auto& x : m) {
    EXPECT_EQ(x.entropy, 0.0);
    EXPECT_EQ(x.semantic, 0.0);
  }
}
