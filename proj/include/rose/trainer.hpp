#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "rose/config.hpp"
#include "rose/credit.hpp"
#include "rose/objective.hpp"
#include "rose/policy.hpp"
#include "rose/random.hpp"
#include "rose/rollout.hpp"
#include "rose/tasks.hpp"

namespace rose {

// Stream tags for derive_seed.
namespace stream {
inline constexpr std::uint64_t kHeldout = 0x48454c44;
inline constexpr std::uint64_t kTrainProblem = 0x54505242;
inline constexpr std::uint64_t kRollout = 0x524f4c4c;
inline constexpr std::uint64_t kEval = 0x4556414c;
inline constexpr std::uint64_t kBaseCorpus = 0x42415345;
}  // namespace stream

// Training problems use seeds with the top bit clear, held-out problems the top bit set.
inline constexpr std::uint64_t kHeldoutSeedBit = 1ULL << 63;

// ---------------------------------------------------------------------------
// Parallel helpers
// ---------------------------------------------------------------------------

// Runs fn(i) for i in [0, n) on up to `workers` threads. Each index writes
// only its own output slot, so the result does not depend on scheduling.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Experiment setup
// ---------------------------------------------------------------------------

struct Experiment {
  ArithmeticTask task;
  std::shared_ptr<const EmbeddingTable> embeddings;
  PolicyParams initial;
  std::vector<Problem> heldout;
  std::unordered_set<std::uint64_t> heldout_hashes;
  Difficulty difficulty;

  bool is_heldout(const Problem& p) const { return heldout_hashes.contains(p.hash()); }
};

inline std::shared_ptr<const EmbeddingTable> make_embeddings(const TrainConfig& cfg, const ArithmeticTask& task) {
  const std::size_t v = task.vocab()->size();
  switch (cfg.embedding_preset) {
    case EmbeddingPreset::SynonymSimplex:
      return std::make_shared<const EmbeddingTable>(
          EmbeddingTable::simplex_clusters(v, task.synonym_clusters(), cfg.embedding_seed));
    case EmbeddingPreset::OneHot:
      return std::make_shared<const EmbeddingTable>(EmbeddingTable::one_hot(v));
    case EmbeddingPreset::Gaussian:
      return std::make_shared<const EmbeddingTable>(EmbeddingTable::gaussian(v, cfg.embedding_dim, cfg.embedding_seed));
    case EmbeddingPreset::SynonymClusters:
      return std::make_shared<const EmbeddingTable>(
          EmbeddingTable::synonym_clusters(v, cfg.embedding_dim, task.synonym_clusters(), cfg.embedding_seed));
  }
  throw std::logic_error("unknown embedding preset");
}

// Problems the base model's demonstrations are drawn from: every easy or
// medium problem, or a fixed random sample of hard ones.
inline std::vector<Problem> base_corpus(const ArithmeticTask& task, Difficulty d, std::uint64_t seed) {
  if (d != Difficulty::Hard) return task.enumerate(d);
  std::vector<Problem> out;
  for (std::uint64_t i = 0; i < 5000; ++i) out.push_back(task.generate(derive_seed(seed, {stream::kBaseCorpus, i}), d));
  return out;
}

inline PolicyParams make_initial_policy(const TrainConfig& cfg, const ArithmeticTask& task,
                                        std::shared_ptr<const EmbeddingTable> embeddings) {
  if (cfg.init == InitKind::Uniform) return PolicyParams(task.vocab(), std::move(embeddings), cfg.context_order);
  const auto corpus = base_corpus(task, cfg.difficulty, cfg.init_seed);
  return fit_base_policy(task, std::move(embeddings), cfg.context_order, corpus, cfg.demonstrator_config(),
                         cfg.init_seed);
}

// Distinct held-out problems; stops early if the problem space is exhausted.
inline std::vector<Problem> make_heldout(const ArithmeticTask& task, Difficulty d, std::size_t n, std::uint64_t seed) {
  std::vector<Problem> out;
  std::unordered_set<std::uint64_t> seen;
  for (std::uint64_t i = 0; out.size() < n && i < 64 * n + 1024; ++i) {
    Problem p = task.generate(derive_seed(seed, {stream::kHeldout, i}) | kHeldoutSeedBit, d);
    if (seen.insert(p.hash()).second) out.push_back(std::move(p));
  }
  return out;
}

inline Experiment make_experiment(const TrainConfig& cfg) {
  cfg.validate();
  ArithmeticTask task(cfg.filler_count);
  auto emb = make_embeddings(cfg, task);
  PolicyParams initial = make_initial_policy(cfg, task, emb);
  auto heldout = make_heldout(task, cfg.difficulty, cfg.heldout_size, cfg.seed);
  std::unordered_set<std::uint64_t> hashes;
  for (const auto& p : heldout) hashes.insert(p.hash());
  return Experiment{std::move(task), std::move(emb), std::move(initial), std::move(heldout), std::move(hashes),
                    cfg.difficulty};
}

// Training problem for a (step, slot); resampled while it collides with the held-out set.
inline Problem training_problem(const Experiment& ex, std::uint64_t seed, std::uint64_t step, std::uint64_t slot) {
  for (std::uint64_t attempt = 0; attempt < 10'000; ++attempt) {
    Problem p = ex.task.generate(derive_seed(seed, {stream::kTrainProblem, step, slot, attempt}) & ~kHeldoutSeedBit,
                                 ex.difficulty);
    if (!ex.is_heldout(p)) return p;
  }
  throw std::runtime_error("training_problem: held-out set covers the whole problem space");
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

// Plain sampling without branching metadata.
template <AutoregressivePolicy P>
TokenSeq sample_response(std::span<const TokenId> question, const P& policy, double temperature, double top_p,
                         std::size_t max_len, Rng& rng) {
  TokenSeq ctx(question.begin(), question.end());
  TokenSeq out;
  const TokenId eos = policy.vocab().eos();
  while (out.size() < max_len) {
    const TokenId t = sample_token(policy.distribution(ctx), temperature, top_p, rng);
    out.push_back(t);
    ctx.push_back(t);
    if (t == eos) break;
  }
  return out;
}

struct EvalSettings {
  std::size_t k = 8;
  double temperature = 0.6;
  double top_p = 0.95;
  std::size_t max_len = 16;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct EvalReport {
  double pass_at_k = 0.0;
  double accuracy = 0.0;  // fraction of all samples rewarded 1
  double mean_length = 0.0;
  std::optional<double> mean_correct_length;
  std::size_t problems = 0;
  std::size_t k = 0;
};

template <AutoregressivePolicy P>
EvalReport evaluate(const P& policy, std::span<const Problem> problems, const RewardRule& rule,
                    const EvalSettings& s) {
  if (s.k < 1) throw std::invalid_argument("evaluate: k must be >= 1");
  if (problems.empty()) throw std::invalid_argument("evaluate: no problems");
  struct PerProblem {
    bool solved = false;
    std::size_t correct = 0, length = 0, correct_length = 0;
  };
  std::vector<PerProblem> per(problems.size());
  parallel_for(problems.size(), s.workers, [&](std::size_t j) {
    Rng rng(derive_seed(s.seed, {stream::kEval, j}));
    for (std::size_t i = 0; i < s.k; ++i) {
      const TokenSeq r = sample_response(problems[j].question, policy, s.temperature, s.top_p, s.max_len, rng);
      per[j].length += r.size();
      if (reward(r, problems[j], rule) == 1) {
        per[j].solved = true;
        ++per[j].correct;
        per[j].correct_length += r.size();
      }
    }
  });
  EvalReport rep;
  rep.problems = problems.size();
  rep.k = s.k;
  std::size_t solved = 0, correct = 0, length = 0, correct_length = 0;
  for (const auto& p : per) {
    solved += p.solved;
    correct += p.correct;
    length += p.length;
    correct_length += p.correct_length;
  }
  const double samples = static_cast<double>(problems.size() * s.k);
  rep.pass_at_k = static_cast<double>(solved) / static_cast<double>(problems.size());
  rep.accuracy = static_cast<double>(correct) / samples;
  rep.mean_length = static_cast<double>(length) / samples;
  if (correct > 0) rep.mean_correct_length = static_cast<double>(correct_length) / static_cast<double>(correct);
  return rep;
}

template <AutoregressivePolicy P>
double eval_pass_at_k(const P& policy, std::span<const Problem> problems, const RewardRule& rule, std::size_t k,
                      double temperature, double top_p, std::size_t max_len, std::uint64_t seed) {
  return evaluate(policy, problems, rule, EvalSettings{k, temperature, top_p, max_len, seed, 1}).pass_at_k;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j = {{"pass_at_k", r.pass_at_k}, {"k", r.k},
                      {"accuracy", r.accuracy},   {"mean_length", r.mean_length},
                      {"problems", r.problems},   {"mean_correct_length", nullptr}};
  if (r.mean_correct_length) j["mean_correct_length"] = *r.mean_correct_length;
  return j;
}

// ---------------------------------------------------------------------------
// Diversity
// ---------------------------------------------------------------------------

inline std::vector<double> mean_pooled(std::span<const TokenId> tokens, const EmbeddingTable& emb) {
  if (tokens.empty()) throw std::invalid_argument("mean_pooled: empty response");
  std::vector<double> out(emb.dim(), 0.0);
  for (TokenId t : tokens) {
    const auto row = emb.row(t);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += row[k];
  }
  for (double& v : out) v /= static_cast<double>(tokens.size());
  return out;
}

struct DiversityStats {
  double mean_similarity = 0.0;
  std::size_t pairs = 0;
  std::vector<std::size_t> histogram;  // equal-width bins over [-1, 1]
};

inline constexpr std::size_t kDiversityBins = 20;

inline std::size_t similarity_bin(double c, std::size_t bins = kDiversityBins) {
  const auto b = static_cast<std::size_t>((std::clamp(c, -1.0, 1.0) + 1.0) / 2.0 * static_cast<double>(bins));
  return std::min(b, bins - 1);
}

inline DiversityStats diversity_stats(std::span<const TokenSeq> responses, const EmbeddingTable& emb,
                                      std::size_t bins = kDiversityBins) {
  if (responses.size() < 2) throw std::invalid_argument("diversity_stats: need at least 2 responses");
  std::vector<std::vector<double>> pooled;
  for (const auto& r : responses) pooled.push_back(mean_pooled(r, emb));
  DiversityStats out;
  out.histogram.assign(bins, 0);
  double sum = 0.0;
  for (std::size_t i = 0; i < pooled.size(); ++i)
    for (std::size_t j = i + 1; j < pooled.size(); ++j) {
      const double c = cosine(pooled[i], pooled[j]);
      sum += c;
      ++out.histogram[similarity_bin(c, bins)];
      ++out.pairs;
    }
  out.mean_similarity = sum / static_cast<double>(out.pairs);
  return out;
}

inline DiversityStats diversity_stats(const RolloutTree& tree, const EmbeddingTable& emb,
                                      std::size_t bins = kDiversityBins) {
  std::vector<TokenSeq> rs;
  for (const Response& r : tree.responses()) rs.push_back(r.tokens);
  return diversity_stats(rs, emb, bins);
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

  // Descends the loss gradient.
  void step(PolicyParams& params, const LogitGradient& grad) {
    if (lr_ == 0.0) return;
    ++t_;
    for (const auto& [key, g] : grad.rows()) {
      auto theta = params.mutable_logits(key);
      if (kind_ == OptimizerKind::Sgd) {
        for (std::size_t i = 0; i < g.size(); ++i) theta[i] -= lr_ * g[i];
        continue;
      }
      auto& m = m_.try_emplace(key, g.size(), 0.0).first->second;
      auto& v = v_.try_emplace(key, g.size(), 0.0).first->second;
      const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
        v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
        theta[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  OptimizerKind kind_;
  double lr_;
  std::size_t t_ = 0;
  std::unordered_map<ContextKey, std::vector<double>, ContextKeyHash> m_, v_;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct StepMetrics {
  std::size_t step = 0;
  std::optional<double> mean_reward;  // over every rolled-out group, before filtering
  std::optional<double> rollout_mean_length;
  std::optional<double> mean_pairwise_similarity;
  std::optional<double> loss;
  std::optional<double> kl;
  std::optional<double> clip_fraction;
  std::size_t groups_rolled = 0;
  std::size_t groups_kept = 0;
  bool skipped = false;
  std::optional<EvalReport> eval;
  std::optional<std::string> warning;
};

inline nlohmann::json to_json(const StepMetrics& m) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j = {{"step", m.step},
                      {"mean_reward", opt(m.mean_reward)},
                      {"rollout_mean_length", opt(m.rollout_mean_length)},
                      {"mean_pairwise_similarity", opt(m.mean_pairwise_similarity)},
                      {"loss", opt(m.loss)},
                      {"kl", opt(m.kl)},
                      {"clip_fraction", opt(m.clip_fraction)},
                      {"groups_rolled", m.groups_rolled},
                      {"groups_kept", m.groups_kept},
                      {"skipped", m.skipped},
                      {"pass_at_k", nullptr},
                      {"eval_accuracy", nullptr},
                      {"eval_mean_length", nullptr},
                      {"eval_mean_correct_length", nullptr},
                      {"warning", m.warning ? nlohmann::json(*m.warning) : nlohmann::json(nullptr)}};
  if (m.eval) {
    j["pass_at_k"] = m.eval->pass_at_k;
    j["eval_accuracy"] = m.eval->accuracy;
    j["eval_mean_length"] = m.eval->mean_length;
    if (m.eval->mean_correct_length) j["eval_mean_correct_length"] = *m.eval->mean_correct_length;
  }
  return j;
}

struct TrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(std::size_t step, const PolicyParams&)> on_checkpoint;
  std::function<void(std::size_t step, const std::vector<RolloutTree>&)> on_rollouts;
};

struct TrainResult {
  PolicyParams policy;
  std::vector<StepMetrics> log;
};

inline EvalSettings eval_settings(const TrainConfig& cfg) {
  return {cfg.eval_k, cfg.eval_temperature, cfg.eval_top_p, cfg.max_len, derive_seed(cfg.seed, {stream::kEval}),
          cfg.workers};
}

// Rolls out groups for the given problems under a frozen policy and attaches rewards.
inline std::vector<RolloutTree> rollout_problems(const PolicyParams& policy, std::span<const Problem> problems,
                                                 const RewardRule& rule, const RolloutConfig& rc,
                                                 std::span<const std::uint64_t> seeds,
                                                 std::span<const std::size_t> question_ids, std::size_t workers) {
  std::vector<RolloutTree> trees(problems.size());
  parallel_for(problems.size(), workers, [&](std::size_t i) {
    Rng rng(seeds[i]);
    RolloutTree t = rollout_group(problems[i].question, question_ids[i], policy, rc, rng);
    for (const Response& r : t.responses()) t.set_reward(r.id, reward(r.tokens, problems[i], rule));
    trees[i] = std::move(t);
  });
  return trees;
}

// One optimisation step's worth of rollouts: questions are drawn in waves of
// batch_size until batch_size groups survive the filter or the retry budget
// runs out. Survivors are taken in slot order.
struct StepRollouts {
  std::vector<RolloutTree> all;
  std::vector<RolloutTree> kept;
};

inline StepRollouts collect_rollouts(const Experiment& ex, const PolicyParams& policy, const TrainConfig& cfg,
                                     std::size_t step) {
  const RolloutConfig rc = cfg.rollout_config();
  const RewardRule rule = ex.task.reward_rule();
  const auto budget = cfg.batch_size + static_cast<std::size_t>(std::ceil(cfg.retry_budget * static_cast<double>(cfg.batch_size)));
  StepRollouts out;
  std::size_t next = 0;
  while (out.kept.size() < cfg.batch_size && next < budget) {
    const std::size_t wave = std::min(cfg.batch_size, budget - next);
    std::vector<Problem> problems;
    std::vector<std::uint64_t> seeds;
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < wave; ++i) {
      const std::size_t slot = next + i;
      problems.push_back(training_problem(ex, cfg.seed, step, slot));
      seeds.push_back(derive_seed(cfg.seed, {stream::kRollout, step, slot}));
      ids.push_back(slot);
    }
    auto trees = rollout_problems(policy, problems, rule, rc, seeds, ids, cfg.workers);
    for (auto& t : trees) {
      if (out.kept.size() < cfg.batch_size && !rewards_all_equal(t)) out.kept.push_back(t);
      out.all.push_back(std::move(t));
    }
    next += wave;
  }
  return out;
}

inline TrainResult train(const TrainConfig& cfg, const Experiment& ex, const TrainHooks& hooks = {}) {
  cfg.validate();
  PolicyParams policy = ex.initial;
  const PolicyParams& reference = ex.initial;
  Optimizer opt(cfg.optimizer, cfg.learning_rate);
  const EvalSettings es = eval_settings(cfg);
  const RewardRule rule = ex.task.reward_rule();
  std::vector<StepMetrics> log;

  auto emit = [&](StepMetrics m) {
    if (hooks.on_step) hooks.on_step(m);
    log.push_back(std::move(m));
  };

  StepMetrics initial;
  initial.eval = evaluate(policy, ex.heldout, rule, es);
  emit(std::move(initial));

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const PolicyParams old = policy;  // pi_old: rollouts and stored logprobs come from this snapshot
    StepRollouts ro = collect_rollouts(ex, old, cfg, step);
    if (hooks.on_rollouts) hooks.on_rollouts(step, ro.all);

    StepMetrics m;
    m.step = step;
    m.groups_rolled = ro.all.size();
    m.groups_kept = ro.kept.size();
    double reward_sum = 0.0, length_sum = 0.0, sim_sum = 0.0;
    std::size_t responses = 0, sim_groups = 0;
    for (const auto& t : ro.all) {
      for (const Response& r : t.responses()) {
        reward_sum += *r.reward;
        length_sum += static_cast<double>(r.length());
        ++responses;
      }
      if (t.size() >= 2) {
        sim_sum += diversity_stats(t, *ex.embeddings).mean_similarity;
        ++sim_groups;
      }
    }
    if (responses) {
      m.mean_reward = reward_sum / static_cast<double>(responses);
      m.rollout_mean_length = length_sum / static_cast<double>(responses);
    }
    if (sim_groups) m.mean_pairwise_similarity = sim_sum / static_cast<double>(sim_groups);

    if (ro.kept.empty()) {
      m.skipped = true;
      m.warning = "every group was filtered out after the retry budget; step skipped";
    } else {
      TrainingBatch batch;
      for (auto& t : ro.kept) {
        AdvantageMap adv = estimate_advantages(t, cfg.alpha, cfg.advantage_mode);
        batch.push_back({std::move(t), std::move(adv)});
      }
      for (std::size_t u = 0; u < cfg.inner_updates; ++u) {
        ObjectiveResult res = loss_and_grad(batch, policy, reference, cfg.objective_config());
        if (u == 0) {
          m.loss = res.loss;
          m.kl = res.mean_kl;
          m.clip_fraction = res.clip_fraction;
        }
        opt.step(policy, res.grad);
      }
    }

    if ((cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps)
      m.eval = evaluate(policy, ex.heldout, rule, es);
    emit(std::move(m));

    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
      hooks.on_checkpoint(step, policy);
  }
  return TrainResult{std::move(policy), std::move(log)};
}

inline TrainResult train(const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  return train(cfg, make_experiment(cfg), hooks);
}

}  // namespace rose
