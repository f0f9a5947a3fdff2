#pragma once

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "rose/rose.hpp"

namespace fixture {

using namespace rose;

// "<bos> <eos> => t3 t4 ..." with n symbols in total.
inline std::shared_ptr<const Vocab> toy_vocab(std::size_t n) {
  std::vector<std::string> s = {"<bos>", "<eos>", "=>"};
  s.resize(std::min<std::size_t>(n, 3));
  for (std::size_t i = 3; i < n; ++i) s.push_back("t" + std::to_string(i));
  return std::make_shared<const Vocab>(s, "<bos>", "<eos>", n > 2 ? "=>" : "<eos>");
}

inline PolicyParams toy_policy(std::size_t n, std::size_t order, std::uint64_t emb_seed = 3) {
  auto v = toy_vocab(n);
  auto e = std::make_shared<const EmbeddingTable>(EmbeddingTable::gaussian(n, 4, emb_seed));
  return PolicyParams(v, e, order);
}

// Every window of length <= context order, i.e. every row a rollout can touch.
inline std::vector<ContextKey> all_windows(const PolicyParams& p) {
  std::vector<ContextKey> out;
  std::vector<TokenSeq> level = {{}};
  for (std::size_t len = 0; len <= p.context_order(); ++len) {
    std::vector<TokenSeq> next;
    for (const auto& w : level) {
      out.push_back(p.key_for(w));
      for (std::size_t t = 0; t < p.vocab_size(); ++t) {
        TokenSeq x = w;
        x.insert(x.begin(), token_at(t));
        next.push_back(std::move(x));
      }
    }
    level = std::move(next);
  }
  return out;
}

inline void randomize(PolicyParams& p, Rng& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  for (ContextKey k : all_windows(p))
    for (double& v : p.mutable_logits(k)) v = n(rng);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("rose_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

// Unannotated response for hand-built trees.
inline Response response_of(std::vector<std::size_t> tokens) {
  Response r;
  for (auto t : tokens) r.tokens.push_back(token_at(t));
  r.logprobs.assign(r.tokens.size(), -1.0);
  r.metrics.assign(r.tokens.size(), PositionMetrics{});
  return r;
}

// Old, current and reference policies over one random batch of rollout groups.
struct Setup {
  PolicyParams old, cur, ref;
  TrainingBatch batch;
};

inline Setup make_setup(Rng& rng, std::size_t groups, double drift, double eps = 0.5) {
  PolicyParams old = fixture::toy_policy(5, 2, 3);
  fixture::randomize(old, rng, 1.0);
  PolicyParams cur = old;
  std::normal_distribution<double> n(0.0, drift);
  for (ContextKey k : fixture::all_windows(cur))
    for (double& v : cur.mutable_logits(k)) v += n(rng);
  PolicyParams ref = old;
  for (ContextKey k : fixture::all_windows(ref))
    for (double& v : ref.mutable_logits(k)) v += n(rng);
  RolloutConfig rc;
  rc.group_size = 2 + uniform_index(rng, 5);
  rc.epsilon = eps;
  rc.max_len = 6;
  TrainingBatch batch;
  for (std::size_t g = 0; g < groups; ++g) {
    auto t = rollout_group(old.vocab().encode("<bos>"), g, old, rc, rng);
    for (std::size_t i = 0; i < t.size(); ++i) t.set_reward(i, static_cast<int>(uniform_index(rng, 2)));
    if (rewards_all_equal(t)) t.set_reward(0, 1 - *t.response(0).reward);
    auto adv = estimate_advantages(t, 1.0);
    batch.push_back({std::move(t), std::move(adv)});
  }
  return {std::move(old), std::move(cur), std::move(ref), std::move(batch)};
}

inline double min_clip_distance(const Setup& s, double clip) {
  double d = 1.0;
  for (const auto& g : s.batch) {
    for (const auto& r : g.tree.responses()) {
      TokenSeq ctx = g.tree.question();
      for (std::size_t t = 0; t < r.length(); ++t) {
        const double ratio = std::exp(s.cur.logprob(ctx, r.tokens[t]) - r.logprobs[t]);
        d = std::min({d, std::abs(ratio - (1 - clip)), std::abs(ratio - (1 + clip))});
        ctx.push_back(r.tokens[t]);
      }
    }
  }
  return d;
}

}  // namespace fixture
