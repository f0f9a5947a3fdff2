#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "rose/credit.hpp"
#include "rose/policy.hpp"
#include "rose/rollout.hpp"

namespace rose {

// Sparse gradient over logit rows.
class LogitGradient {
 public:
  using Rows = std::unordered_map<ContextKey, std::vector<double>, ContextKeyHash>;

  explicit LogitGradient(std::size_t width = 0) : width_(width) {}

  void add(ContextKey key, std::span<const double> values, double scale) {
    if (values.size() != width_) throw std::invalid_argument("gradient: row width mismatch");
    auto [it, inserted] = rows_.try_emplace(key, width_, 0.0);
    for (std::size_t i = 0; i < width_; ++i) it->second[i] += scale * values[i];
  }

  std::span<const double> row(ContextKey key) const {
    auto it = rows_.find(key);
    if (it == rows_.end()) return {};
    return it->second;
  }

  double at(ContextKey key, TokenId t) const {
    auto r = row(key);
    return r.empty() ? 0.0 : r[index(t)];
  }

  const Rows& rows() const noexcept { return rows_; }
  std::size_t width() const noexcept { return width_; }

  double squared_norm() const {
    double s = 0.0;
    for (const auto& [_, r] : rows_)
      for (double v : r) s += v * v;
    return s;
  }

 private:
  std::size_t width_;
  Rows rows_;
};

inline double importance_ratio(const PolicyParams& params, double old_logprob, std::span<const TokenId> context,
                               TokenId token) {
  if (!std::isfinite(old_logprob)) throw std::invalid_argument("importance_ratio: old logprob not finite");
  return std::exp(params.logprob(context, token) - old_logprob);
}

// KL(p || q) over the full vocabulary.
inline double kl_exact(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_exact: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) kl += p[i] * std::log(p[i] / q[i]);
  return std::max(kl, 0.0);
}

inline double kl_exact(const TokenDistribution& p, const TokenDistribution& q) { return kl_exact(p.probs, q.probs); }

// d KL(softmax(z) || q) / dz_k = p_k (ln(p_k / q_k) - KL).
inline std::vector<double> kl_grad_logits(std::span<const double> p, std::span<const double> q, double kl) {
  std::vector<double> g(p.size(), 0.0);
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) g[i] = p[i] * (std::log(p[i] / q[i]) - kl);
  return g;
}

struct ObjectiveConfig {
  double clip_epsilon = 0.2;
  double beta = 0.001;

  void validate() const {
    if (!(clip_epsilon > 0.0)) throw std::invalid_argument("objective: clip_epsilon must be > 0");
    if (!(beta >= 0.0)) throw std::invalid_argument("objective: beta must be >= 0");
  }
};

struct TrainingGroup {
  RolloutTree tree;
  AdvantageMap advantages;
};

using TrainingBatch = std::vector<TrainingGroup>;

class EmptyBatchError : public std::runtime_error {
 public:
  EmptyBatchError() : std::runtime_error("loss_and_grad: empty batch (every group was filtered out)") {}
};

struct ObjectiveResult {
  double loss = 0.0;
  LogitGradient grad;
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
  std::size_t tokens = 0;
};

// L = mean over groups of -(1/G) sum_i sum_t [min(r A, clip(r) A) - beta KL_t].
// The min takes the unclipped branch on ties; the clipped branch passes no
// gradient. No per-response length normalization.
inline ObjectiveResult loss_and_grad(const TrainingBatch& batch, const PolicyParams& params,
                                     const PolicyParams& reference, const ObjectiveConfig& cfg) {
  cfg.validate();
  if (batch.empty()) throw EmptyBatchError();
  const std::size_t width = params.vocab_size();
  ObjectiveResult out{0.0, LogitGradient(width), 0.0, 0.0, 0};
  std::size_t clipped_tokens = 0;
  double kl_sum = 0.0;
  const double groups = static_cast<double>(batch.size());

  std::vector<double> step(width);
  for (const TrainingGroup& group : batch) {
    const RolloutTree& tree = group.tree;
    if (group.advantages.size() != tree.size()) throw std::invalid_argument("loss_and_grad: advantages misaligned");
    const double scale = -1.0 / (static_cast<double>(tree.size()) * groups);
    double group_obj = 0.0;
    TokenSeq ctx;
    for (const Response& r : tree.responses()) {
      const auto& adv = group.advantages.per_token[r.id];
      if (adv.size() != r.length() || r.logprobs.size() != r.length())
        throw std::invalid_argument("loss_and_grad: per-token data misaligned");
      ctx.assign(tree.question().begin(), tree.question().end());
      for (std::size_t t = 0; t < r.length(); ++t) {
        const TokenId tok = r.tokens[t];
        const ContextKey key = params.key_for(ctx);
        const auto p = softmax(params.logits(key));
        const auto q = softmax(reference.logits(reference.key_for(ctx)));
        const double ratio = importance_ratio(params, r.logprobs[t], ctx, tok);
        const double a = adv[t];
        const double unclipped = ratio * a;
        const double clipped = std::clamp(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * a;
        const double kl = kl_exact(p, q);

        std::fill(step.begin(), step.end(), 0.0);
        if (unclipped <= clipped) {
          group_obj += unclipped;
          // d(ratio)/dz = ratio * (onehot - p)
          for (std::size_t k = 0; k < width; ++k) step[k] = -a * ratio * p[k];
          step[index(tok)] += a * ratio;
        } else {
          group_obj += clipped;
          ++clipped_tokens;
        }
        if (cfg.beta > 0.0) {
          group_obj -= cfg.beta * kl;
          const auto dkl = kl_grad_logits(p, q, kl);
          for (std::size_t k = 0; k < width; ++k) step[k] -= cfg.beta * dkl[k];
        }
        out.grad.add(key, step, scale);
        kl_sum += kl;
        ++out.tokens;
        ctx.push_back(tok);
      }
    }
    out.loss += scale * group_obj;
  }
  out.mean_kl = out.tokens ? kl_sum / static_cast<double>(out.tokens) : 0.0;
  out.clip_fraction = out.tokens ? static_cast<double>(clipped_tokens) / static_cast<double>(out.tokens) : 0.0;
  return out;
}

}  // namespace rose
