#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "rose/policy.hpp"

namespace rose {

struct MetricConfig {
  // Candidate set size for semantic divergence, clamped to |V|.
  std::size_t top_k = 20;
  // Whether the i == j terms of the pairwise sum are included.
  bool include_diagonal = true;
};

struct PositionMetrics {
  double entropy = 0.0;      // H, nats
  double divergence = 0.0;   // SD
  double semantic = 0.0;     // SE = SD * H
  std::vector<TokenId> top_tokens;
};

// -sum p ln p with 0 ln 0 = 0.
inline double generation_entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return std::max(h, 0.0);
}

inline double generation_entropy(const TokenDistribution& dist) { return generation_entropy(dist.probs); }

// Indices of the k most probable tokens, ties broken by smaller token id.
inline std::vector<TokenId> top_k_tokens(std::span<const double> probs, std::size_t k) {
  if (k == 0) throw std::invalid_argument("top_k_tokens: k must be >= 1");
  k = std::min(k, probs.size());
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) { return probs[a] > probs[b] || (probs[a] == probs[b] && a < b); });
  std::vector<TokenId> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(token_at(order[i]));
  return out;
}

struct DivergenceResult {
  double value = 0.0;
  std::vector<TokenId> top_tokens;
};

// SD = -sum_{i,j in top-k} p_i p_j cos(e_i, e_j) with raw probabilities.
// Evaluated as a quadratic form: the full double sum equals ||sum_i p_i e_i/|e_i| ||^2,
// and the off-diagonal variant subtracts sum_i p_i^2.
inline DivergenceResult semantic_divergence(std::span<const double> probs, const EmbeddingTable& emb,
                                            const MetricConfig& cfg = {}) {
  if (emb.rows() != probs.size()) throw std::invalid_argument("semantic_divergence: vocab/embedding mismatch");
  DivergenceResult out{0.0, top_k_tokens(probs, cfg.top_k)};
  std::vector<double> pooled(emb.dim(), 0.0);
  double diag = 0.0;
  for (TokenId t : out.top_tokens) {
    const double p = probs[index(t)];
    auto e = emb.row(t);
    const double w = p / norm(e);
    for (std::size_t d = 0; d < pooled.size(); ++d) pooled[d] += w * e[d];
    diag += p * p;
  }
  double quad = std::inner_product(pooled.begin(), pooled.end(), pooled.begin(), 0.0);
  if (!cfg.include_diagonal) quad -= diag;
  out.value = -quad;
  return out;
}

inline DivergenceResult semantic_divergence(const TokenDistribution& dist, const EmbeddingTable& emb,
                                            std::size_t k, bool include_diagonal = true) {
  return semantic_divergence(dist.probs, emb, MetricConfig{k, include_diagonal});
}

inline double semantic_entropy(double divergence, double entropy) { return divergence * entropy; }

inline PositionMetrics position_metrics(std::span<const double> probs, const EmbeddingTable& emb,
                                        const MetricConfig& cfg) {
  PositionMetrics m;
  m.entropy = generation_entropy(probs);
  auto sd = semantic_divergence(probs, emb, cfg);
  m.divergence = sd.value;
  m.semantic = semantic_entropy(m.divergence, m.entropy);
  m.top_tokens = std::move(sd.top_tokens);
  return m;
}

// Recomputes the metrics at every position of `response` from the policy's
// distribution given question + response[0, k).
template <AutoregressivePolicy P>
std::vector<PositionMetrics> annotate_response(const P& policy, std::span<const TokenId> question,
                                               std::span<const TokenId> response, const MetricConfig& cfg = {}) {
  TokenSeq ctx(question.begin(), question.end());
  ctx.reserve(question.size() + response.size());
  std::vector<PositionMetrics> out;
  out.reserve(response.size());
  for (TokenId t : response) {
    if (!policy.vocab().contains(t)) throw std::invalid_argument("annotate_response: token outside vocab");
    out.push_back(position_metrics(policy.distribution(ctx).probs, policy.embeddings(), cfg));
    ctx.push_back(t);
  }
  return out;
}

}  // namespace rose
