#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rose/policy.hpp"
#include "rose/random.hpp"
#include "rose/vocab.hpp"

namespace rose {

enum class Difficulty { Easy, Medium, Hard };

inline std::string_view to_string(Difficulty d) {
  switch (d) {
    case Difficulty::Easy: return "easy";
    case Difficulty::Medium: return "medium";
    case Difficulty::Hard: return "hard";
  }
  return "unknown";
}

inline std::optional<Difficulty> parse_difficulty(std::string_view s) {
  if (s == "easy") return Difficulty::Easy;
  if (s == "medium") return Difficulty::Medium;
  if (s == "hard") return Difficulty::Hard;
  return std::nullopt;
}

// easy: a op b, medium: a op b op c, hard: four operands.
constexpr std::size_t operand_count(Difficulty d) {
  switch (d) {
    case Difficulty::Easy: return 2;
    case Difficulty::Medium: return 3;
    case Difficulty::Hard: return 4;
  }
  return 2;
}

struct Problem {
  TokenSeq question;
  TokenSeq answer;
  Difficulty difficulty = Difficulty::Easy;
  std::uint64_t seed = 0;

  std::uint64_t hash() const {
    std::uint64_t h = mix64(0x7a3f + static_cast<std::uint64_t>(difficulty));
    for (TokenId t : question) h = mix64(h ^ (index(t) + 1));
    h = mix64(h ^ 0xfeed);
    for (TokenId t : answer) h = mix64(h ^ (index(t) + 1));
    return h;
  }
};

// Answer = tokens after the final ANSWER-SEP, minus one trailing EOS.
struct RewardRule {
  TokenId sep;
  TokenId eos;

  std::optional<TokenSeq> extract(std::span<const TokenId> response) const {
    auto last = std::find(response.rbegin(), response.rend(), sep);
    if (last == response.rend()) return std::nullopt;
    TokenSeq out(last.base(), response.end());
    if (!out.empty() && out.back() == eos) out.pop_back();
    return out;
  }
};

inline int reward(std::span<const TokenId> response, const Problem& problem, const RewardRule& rule) {
  const auto extracted = rule.extract(response);
  return extracted && *extracted == problem.answer ? 1 : 0;
}

// Modular-arithmetic chain task rendered as "<bos> a op b [op c ...]"; the
// expected reply is any chain of restated digits joined by interchangeable
// filler connectives, then "=> answer <eos>".
class ArithmeticTask {
 public:
  static constexpr std::array<std::string_view, 8> kFillerWords = {"so", "then", "thus", "hence",
                                                                  "therefore", "next", "now", "well"};

  explicit ArithmeticTask(std::size_t filler_count = 6) {
    if (filler_count < 1 || filler_count > kFillerWords.size())
      throw std::invalid_argument("task: filler_count must be in [1, 8]");
    std::vector<std::string> symbols = {"<bos>", "<eos>", "=>"};
    for (int d = 0; d < 10; ++d) symbols.push_back(std::to_string(d));
    symbols.push_back("+");
    symbols.push_back("-");
    for (std::size_t i = 0; i < filler_count; ++i) symbols.emplace_back(kFillerWords[i]);
    vocab_ = std::make_shared<const Vocab>(std::move(symbols), "<bos>", "<eos>", "=>");
    for (int d = 0; d < 10; ++d) digits_[static_cast<std::size_t>(d)] = vocab_->require(std::to_string(d));
    plus_ = vocab_->require("+");
    minus_ = vocab_->require("-");
    for (std::size_t i = 0; i < filler_count; ++i) fillers_.push_back(vocab_->require(kFillerWords[i]));
  }

  const std::shared_ptr<const Vocab>& vocab() const noexcept { return vocab_; }
  TokenId digit(int d) const { return digits_.at(static_cast<std::size_t>(d)); }
  const std::array<TokenId, 10>& digits() const noexcept { return digits_; }
  TokenId plus() const noexcept { return plus_; }
  TokenId minus() const noexcept { return minus_; }
  const std::vector<TokenId>& fillers() const noexcept { return fillers_; }
  std::vector<std::vector<TokenId>> synonym_clusters() const { return {fillers_}; }
  RewardRule reward_rule() const { return {vocab_->sep(), vocab_->eos()}; }

  std::optional<int> digit_value(TokenId t) const {
    for (int d = 0; d < 10; ++d)
      if (digits_[static_cast<std::size_t>(d)] == t) return d;
    return std::nullopt;
  }

  Problem generate(std::uint64_t seed, Difficulty difficulty) const {
    Rng rng(seed);
    std::vector<int> operands;
    std::vector<bool> minus;
    for (std::size_t i = 0; i < operand_count(difficulty); ++i) {
      operands.push_back(static_cast<int>(uniform_index(rng, 10)));
      if (i > 0) minus.push_back(uniform_index(rng, 2) == 1);
    }
    return render(operands, minus, difficulty, seed);
  }

  Problem generate(Rng& rng, Difficulty difficulty) const { return generate(rng(), difficulty); }

  Problem render(const std::vector<int>& operands, const std::vector<bool>& minus, Difficulty difficulty,
                 std::uint64_t seed = 0) const {
    if (operands.empty() || minus.size() + 1 != operands.size())
      throw std::invalid_argument("task: operator count must be operand count - 1");
    Problem p;
    p.difficulty = difficulty;
    p.seed = seed;
    p.question.push_back(vocab_->bos());
    int acc = operands[0];
    p.question.push_back(digit(operands[0]));
    for (std::size_t i = 1; i < operands.size(); ++i) {
      p.question.push_back(minus[i - 1] ? minus_ : plus_);
      p.question.push_back(digit(operands[i]));
      acc += minus[i - 1] ? -operands[i] : operands[i];
    }
    p.answer = {digit(((acc % 10) + 10) % 10)};
    return p;
  }

  // All easy/medium problems in a fixed order (hard is too large to enumerate usefully).
  std::vector<Problem> enumerate(Difficulty difficulty) const {
    const std::size_t n = operand_count(difficulty);
    std::vector<Problem> out;
    std::vector<int> ops(n, 0);
    std::vector<bool> minus(n - 1, false);
    const std::size_t combos = static_cast<std::size_t>(std::pow(10.0, static_cast<double>(n))) << (n - 1);
    for (std::size_t c = 0; c < combos; ++c) {
      std::size_t x = c;
      for (std::size_t i = 0; i < n; ++i, x /= 10) ops[i] = static_cast<int>(x % 10);
      for (std::size_t i = 0; i + 1 < n; ++i, x /= 2) minus[i] = (x % 2) == 1;
      out.push_back(render(ops, minus, difficulty));
    }
    return out;
  }

  nlohmann::json problem_to_json(const Problem& p) const {
    auto symbols = [&](const TokenSeq& s) {
      std::vector<std::string> out;
      for (TokenId t : s) out.push_back(vocab_->symbol(t));
      return out;
    };
    return {{"question_tokens", symbols(p.question)},
            {"answer_tokens", symbols(p.answer)},
            {"difficulty", std::string(to_string(p.difficulty))},
            {"seed", p.seed}};
  }

  Problem problem_from_json(const nlohmann::json& j) const {
    Problem p;
    for (const auto& s : j.at("question_tokens")) p.question.push_back(vocab_->require(s.get<std::string>()));
    for (const auto& s : j.at("answer_tokens")) p.answer.push_back(vocab_->require(s.get<std::string>()));
    const auto d = parse_difficulty(j.at("difficulty").get<std::string>());
    if (!d) throw std::invalid_argument("problem: unknown difficulty");
    p.difficulty = *d;
    p.seed = j.at("seed").get<std::uint64_t>();
    if (p.answer.empty()) throw std::invalid_argument("problem: empty answer");
    return p;
  }

 private:
  std::shared_ptr<const Vocab> vocab_;
  std::array<TokenId, 10> digits_{};
  TokenId plus_{}, minus_{};
  std::vector<TokenId> fillers_;
};

// ---------------------------------------------------------------------------
// Base model
// ---------------------------------------------------------------------------

// Habits of the noisy demonstrator whose transcripts the base policy is fit on.
struct DemonstratorConfig {
  double p_correct_first = 0.3;  // first restated digit is the true result
  double p_copy = 1.0;           // a restated digit copies the previous one
  double p_continue = 0.8;       // another "filler digit" step follows
  std::size_t max_steps = 5;
  double p_stop_after_answer = 0.1;  // EOS right after the answer (else a trailing filler)
  std::size_t samples_per_problem = 20;
  double smoothing = 0.01;  // pseudo-count added to every next-token count
};

// One demonstration: d0 (f d)* => d EOS, or => d f EOS.
inline TokenSeq demonstrate(const ArithmeticTask& task, const Problem& problem, const DemonstratorConfig& cfg,
                            Rng& rng) {
  const int truth = *task.digit_value(problem.answer.front());
  auto random_digit = [&] { return static_cast<int>(uniform_index(rng, 10)); };
  auto pick_filler = [&] { return task.fillers()[uniform_index(rng, task.fillers().size())]; };
  TokenSeq out;
  int cur = uniform01(rng) < cfg.p_correct_first ? truth : random_digit();
  out.push_back(task.digit(cur));
  for (std::size_t s = 0; s < cfg.max_steps && uniform01(rng) < cfg.p_continue; ++s) {
    out.push_back(pick_filler());
    cur = uniform01(rng) < cfg.p_copy ? cur : random_digit();
    out.push_back(task.digit(cur));
  }
  out.push_back(task.vocab()->sep());
  cur = uniform01(rng) < cfg.p_copy ? cur : random_digit();
  out.push_back(task.digit(cur));
  if (uniform01(rng) >= cfg.p_stop_after_answer) out.push_back(pick_filler());
  out.push_back(task.vocab()->eos());
  return out;
}

// Maximum-likelihood tabular fit: every context window seen in the corpus gets
// logits ln(count + smoothing); unseen windows stay at the zero row.
inline PolicyParams fit_base_policy(const ArithmeticTask& task, std::shared_ptr<const EmbeddingTable> embeddings,
                                    std::size_t context_order, std::span<const Problem> corpus_problems,
                                    const DemonstratorConfig& cfg, std::uint64_t seed) {
  PolicyParams policy(task.vocab(), std::move(embeddings), context_order);
  std::map<ContextKey, std::vector<double>> counts;
  Rng rng(seed);
  const std::size_t v = task.vocab()->size();
  for (const Problem& p : corpus_problems) {
    for (std::size_t s = 0; s < cfg.samples_per_problem; ++s) {
      const TokenSeq reply = demonstrate(task, p, cfg, rng);
      TokenSeq ctx = p.question;
      for (TokenId t : reply) {
        auto& row = counts.try_emplace(policy.key_for(ctx), v, 0.0).first->second;
        row[index(t)] += 1.0;
        ctx.push_back(t);
      }
    }
  }
  for (const auto& [key, row] : counts) {
    auto dst = policy.mutable_logits(key);
    for (std::size_t i = 0; i < v; ++i) dst[i] = std::log(row[i] + cfg.smoothing);
  }
  return policy;
}

}  // namespace rose
