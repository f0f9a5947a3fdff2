#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "rose/random.hpp"
#include "rose/vocab.hpp"

namespace rose {

// Lower clamp for log-probabilities (smallest normal exponent of a double).
inline constexpr double kLogProbFloor = -745.0;

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

class EmbeddingTable {
 public:
  EmbeddingTable() = default;

  EmbeddingTable(std::size_t rows, std::size_t dim, std::vector<double> data)
      : rows_(rows), dim_(dim), data_(std::move(data)) {
    if (dim_ == 0) throw std::invalid_argument("embeddings: dimension must be positive");
    if (data_.size() != rows_ * dim_) throw std::invalid_argument("embeddings: size mismatch");
    for (std::size_t r = 0; r < rows_; ++r) {
      double n2 = 0.0;
      for (double v : row_at(r)) {
        if (!std::isfinite(v)) throw std::invalid_argument("embeddings: non-finite entry");
        n2 += v * v;
      }
      if (n2 == 0.0)
        throw std::invalid_argument("embeddings: row " + std::to_string(r) + " has zero norm");
    }
  }

  static EmbeddingTable one_hot(std::size_t vocab_size) {
    std::vector<double> data(vocab_size * vocab_size, 0.0);
    for (std::size_t i = 0; i < vocab_size; ++i) data[i * vocab_size + i] = 1.0;
    return {vocab_size, vocab_size, std::move(data)};
  }

  static EmbeddingTable gaussian(std::size_t vocab_size, std::size_t dim, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> data(vocab_size * dim);
    for (double& v : data) v = normal(rng);
    return {vocab_size, dim, std::move(data)};
  }

  // Gaussian rows, except that every token inside a cluster is the cluster's
  // unit direction plus a perturbation of norm about `spread`; pairwise cosine
  // inside a cluster is then roughly 1 - spread^2.
  static EmbeddingTable synonym_clusters(std::size_t vocab_size, std::size_t dim,
                                         const std::vector<std::vector<TokenId>>& clusters,
                                         std::uint64_t seed, double spread = 0.05) {
    EmbeddingTable base = gaussian(vocab_size, dim, seed);
    Rng rng(mix64(seed ^ 0x5bd1e995ULL));
    std::normal_distribution<double> normal(0.0, 1.0);
    const double sigma = spread / std::sqrt(static_cast<double>(dim));
    for (const auto& cluster : clusters) {
      if (cluster.empty()) continue;
      std::vector<double> center(dim);
      double n2 = 0.0;
      for (double& c : center) {
        c = normal(rng);
        n2 += c * c;
      }
      const double inv = 1.0 / std::sqrt(n2);
      for (TokenId t : cluster) {
        if (index(t) >= vocab_size) throw std::invalid_argument("embeddings: cluster token out of range");
        for (std::size_t k = 0; k < dim; ++k)
          base.data_[index(t) * dim + k] = center[k] * inv + sigma * normal(rng);
      }
    }
    return base;
  }

  // Every cluster is one "meaning", as is every token outside a cluster. The
  // meanings are the vertices of a centered regular simplex (pairwise cosine
  // -1/(m-1)), and cluster members get their vertex plus noise of norm about `spread`.
  static EmbeddingTable simplex_clusters(std::size_t vocab_size, const std::vector<std::vector<TokenId>>& clusters,
                                         std::uint64_t seed, double spread = 0.05) {
    std::vector<std::size_t> meaning(vocab_size, SIZE_MAX);
    std::size_t m = 0;
    for (const auto& cluster : clusters) {
      if (cluster.empty()) continue;
      for (TokenId t : cluster) {
        if (index(t) >= vocab_size) throw std::invalid_argument("embeddings: cluster token out of range");
        meaning[index(t)] = m;
      }
      ++m;
    }
    for (auto& x : meaning)
      if (x == SIZE_MAX) x = m++;
    if (m < 2) throw std::invalid_argument("embeddings: simplex needs at least two meanings");
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double sigma = spread / std::sqrt(static_cast<double>(m));
    std::vector<double> data(vocab_size * m);
    std::vector<std::size_t> members(m, 0);
    for (std::size_t t = 0; t < vocab_size; ++t) ++members[meaning[t]];
    for (std::size_t t = 0; t < vocab_size; ++t) {
      for (std::size_t k = 0; k < m; ++k) {
        double v = (k == meaning[t] ? 1.0 : 0.0) - 1.0 / static_cast<double>(m);
        if (members[meaning[t]] > 1) v += sigma * normal(rng);
        data[t * m + k] = v;
      }
    }
    return {vocab_size, m, std::move(data)};
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t dim() const noexcept { return dim_; }
  const std::vector<double>& data() const noexcept { return data_; }
  std::span<const double> row(TokenId t) const { return row_at(index(t)); }

  bool operator==(const EmbeddingTable&) const = default;

 private:
  std::span<const double> row_at(std::size_t r) const {
    if (r >= rows_) throw std::out_of_range("embeddings: row out of range");
    return {data_.data() + r * dim_, dim_};
  }

  std::size_t rows_ = 0;
  std::size_t dim_ = 0;
  std::vector<double> data_;
};

inline double norm(std::span<const double> v) {
  return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: dimension mismatch");
  const double na = norm(a);
  const double nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine: zero-norm vector");
  const double c = std::inner_product(a.begin(), a.end(), b.begin(), 0.0) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Context windows
// ---------------------------------------------------------------------------

// Trailing context window packed into one integer. Each base-(|V|+1) digit
// holds a token id + 1 and zero means "absent", so windows shorter than the
// context order (sequence start) get their own keys.
struct ContextKey {
  std::uint64_t packed = 0;
  auto operator<=>(const ContextKey&) const = default;
};

struct ContextKeyHash {
  std::size_t operator()(ContextKey k) const noexcept { return static_cast<std::size_t>(mix64(k.packed)); }
};

struct TokenDistribution {
  std::vector<double> probs;
  ContextKey context;

  std::size_t size() const noexcept { return probs.size(); }
  double operator[](TokenId t) const { return probs[index(t)]; }
};

inline std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= z;
  return p;
}

inline double log_sum_exp(std::span<const double> logits) {
  const auto top = std::max_element(logits.begin(), logits.end());
  double rest = 0.0;
  for (auto it = logits.begin(); it != logits.end(); ++it)
    if (it != top) rest += std::exp(*it - *top);
  return *top + std::log1p(rest);
}

// log softmax(logits)[i], kept relative to the max logit to avoid cancellation.
inline double log_softmax_at(std::span<const double> logits, std::size_t i) {
  const auto top = std::max_element(logits.begin(), logits.end());
  double rest = 0.0;
  for (auto it = logits.begin(); it != logits.end(); ++it)
    if (it != top) rest += std::exp(*it - *top);
  return (logits[i] - *top) - std::log1p(rest);
}

// Gradient of a scalar with respect to one logit row.
struct RowGradient {
  ContextKey context;
  std::vector<double> values;
};

// ---------------------------------------------------------------------------
// Tabular softmax policy
// ---------------------------------------------------------------------------

class PolicyParams {
 public:
  using Table = std::unordered_map<ContextKey, std::vector<double>, ContextKeyHash>;

  PolicyParams(std::shared_ptr<const Vocab> vocab, std::shared_ptr<const EmbeddingTable> embeddings,
               std::size_t context_order)
      : vocab_(std::move(vocab)),
        embeddings_(std::move(embeddings)),
        order_(context_order),
        zero_row_(vocab_ ? vocab_->size() : 0, 0.0) {
    if (!vocab_ || !embeddings_) throw std::invalid_argument("policy: null vocab or embeddings");
    if (embeddings_->rows() != vocab_->size())
      throw std::invalid_argument("policy: embedding rows must equal vocab size");
    if (order_ == 0) throw std::invalid_argument("policy: context order must be >= 1");
    const double radix = static_cast<double>(vocab_->size() + 1);
    if (std::pow(radix, static_cast<double>(order_)) >= 0x1.0p63)
      throw std::invalid_argument("policy: context order too large for this vocabulary");
  }

  const Vocab& vocab() const noexcept { return *vocab_; }
  const EmbeddingTable& embeddings() const noexcept { return *embeddings_; }
  const std::shared_ptr<const Vocab>& vocab_ptr() const noexcept { return vocab_; }
  const std::shared_ptr<const EmbeddingTable>& embeddings_ptr() const noexcept { return embeddings_; }
  std::size_t context_order() const noexcept { return order_; }
  std::size_t vocab_size() const noexcept { return vocab_->size(); }

  ContextKey key_for(std::span<const TokenId> context) const {
    const std::size_t n = std::min(order_, context.size());
    const std::uint64_t radix = vocab_->size() + 1;
    std::uint64_t packed = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const TokenId t = context[context.size() - 1 - i];
      if (!vocab_->contains(t)) throw std::invalid_argument("policy: context token outside vocab");
      packed = packed * radix + (index(t) + 1);
    }
    return {packed};
  }

  // Window tokens in sequence order (oldest first).
  TokenSeq window(ContextKey key) const {
    const std::uint64_t radix = vocab_->size() + 1;
    // key_for() puts the most recent token in the highest digit, so the low
    // digits come out oldest first.
    TokenSeq tokens;
    for (std::uint64_t k = key.packed; k != 0; k /= radix) tokens.push_back(token_at(k % radix - 1));
    return tokens;
  }

  std::span<const double> logits(ContextKey key) const {
    auto it = table_.find(key);
    return it == table_.end() ? std::span<const double>(zero_row_) : std::span<const double>(it->second);
  }

  std::span<double> mutable_logits(ContextKey key) {
    auto [it, inserted] = table_.try_emplace(key, vocab_->size(), 0.0);
    return it->second;
  }

  const Table& table() const noexcept { return table_; }
  std::size_t row_count() const noexcept { return table_.size(); }

  TokenDistribution distribution(std::span<const TokenId> context) const {
    const ContextKey key = key_for(context);
    return {softmax(logits(key)), key};
  }

  double logprob(std::span<const TokenId> context, TokenId token) const {
    if (!vocab_->contains(token)) throw std::invalid_argument("policy: token outside vocab");
    auto row = logits(key_for(context));
    return std::max(log_softmax_at(row, index(token)), kLogProbFloor);
  }

  // d logprob / d logits = onehot(token) - p.
  RowGradient logprob_grad(std::span<const TokenId> context, TokenId token) const {
    if (!vocab_->contains(token)) throw std::invalid_argument("policy: token outside vocab");
    const ContextKey key = key_for(context);
    RowGradient g{key, softmax(logits(key))};
    for (double& v : g.values) v = -v;
    g.values[index(token)] += 1.0;
    return g;
  }

  bool same_parameters(const PolicyParams& other) const {
    if (order_ != other.order_ || !(*vocab_ == *other.vocab_) || !(*embeddings_ == *other.embeddings_))
      return false;
    // Rows absent on one side are implicit zero rows.
    auto covered = [](const Table& a, const PolicyParams& b) {
      for (const auto& [k, row] : a) {
        auto other_row = b.logits(k);
        if (!std::equal(row.begin(), row.end(), other_row.begin())) return false;
      }
      return true;
    };
    return covered(table_, other) && covered(other.table_, *this);
  }

 private:
  std::shared_ptr<const Vocab> vocab_;
  std::shared_ptr<const EmbeddingTable> embeddings_;
  std::size_t order_;
  std::vector<double> zero_row_;
  Table table_;
};

// The pipeline only needs a next-token distribution, a log-probability, and
// token embeddings; anything that provides them can drive rollouts and metrics.
template <class P>
concept AutoregressivePolicy = requires(const P& p, std::span<const TokenId> ctx, TokenId t) {
  { p.vocab() } -> std::same_as<const Vocab&>;
  { p.embeddings() } -> std::same_as<const EmbeddingTable&>;
  { p.distribution(ctx) } -> std::same_as<TokenDistribution>;
  { p.logprob(ctx, t) } -> std::same_as<double>;
};

static_assert(AutoregressivePolicy<PolicyParams>);

template <AutoregressivePolicy P>
TokenDistribution distribution(const P& policy, std::span<const TokenId> context) {
  return policy.distribution(context);
}

template <AutoregressivePolicy P>
double logprob(const P& policy, std::span<const TokenId> context, TokenId token) {
  return policy.logprob(context, token);
}

inline RowGradient logprob_grad(const PolicyParams& policy, std::span<const TokenId> context,
                                 TokenId token) {
  return policy.logprob_grad(context, token);
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

// Temperature first, then nucleus truncation. The nucleus is the smallest
// prefix of the probability-descending order (ties by token id) whose mass
// reaches top_p; the boundary token is kept. temperature == 0 is argmax.
inline TokenId sample_token(const TokenDistribution& dist, double temperature, double top_p, Rng& rng) {
  const auto& p = dist.probs;
  if (p.empty()) throw std::invalid_argument("sample_token: empty distribution");
  if (!(temperature >= 0.0)) throw std::invalid_argument("sample_token: temperature must be >= 0");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("sample_token: top_p must be in (0, 1]");

  if (temperature == 0.0) {
    return token_at(static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin()));
  }

  std::vector<double> w(p.size(), 0.0);
  if (temperature == 1.0) {
    w = p;
  } else {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : p)
      if (v > 0.0) mx = std::max(mx, std::log(v) / temperature);
    double z = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
      if (p[i] > 0.0) z += (w[i] = std::exp(std::log(p[i]) / temperature - mx));
    for (double& v : w) v /= z;
  }

  std::vector<std::size_t> order(w.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });

  std::size_t keep = order.size();
  if (top_p < 1.0) {
    double cum = 0.0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      cum += w[order[i]];
      if (cum >= top_p) {
        keep = i + 1;
        break;
      }
    }
  }

  double mass = 0.0;
  for (std::size_t i = 0; i < keep; ++i) mass += w[order[i]];
  const double u = uniform01(rng) * mass;
  double cum = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    cum += w[order[i]];
    if (u < cum) return token_at(order[i]);
  }
  // Rounding can leave u == mass; fall back to the last token with mass.
  for (std::size_t i = keep; i-- > 0;)
    if (w[order[i]] > 0.0) return token_at(order[i]);
  return token_at(order.front());
}

}  // namespace rose
