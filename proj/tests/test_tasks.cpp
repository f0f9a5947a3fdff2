#include <gtest/gtest.h>

#include <set>

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace rose;

namespace {

const ArithmeticTask& task() {
  static const ArithmeticTask t;
  return t;
}

TokenSeq enc(const std::string& s) { return task().vocab()->encode(s); }

Problem seven() { return task().render({3, 4}, {false}, Difficulty::Easy); }

}  // namespace

TEST(Task, VocabularyLayout) {
  const auto& v = *task().vocab();
  EXPECT_EQ(v.size(), 21u);
  EXPECT_EQ(v.symbol(v.eos()), "<eos>");
  EXPECT_EQ(v.symbol(v.sep()), "=>");
  EXPECT_EQ(task().fillers().size(), 6u);
  EXPECT_THROW(ArithmeticTask(0), std::invalid_argument);
  EXPECT_THROW(ArithmeticTask(9), std::invalid_argument);
}

TEST(Task, GenerationIsDeterministic) {
  for (auto d : {Difficulty::Easy, Difficulty::Medium, Difficulty::Hard})
    for (std::uint64_t s = 0; s < 50; ++s) {
      const auto a = task().generate(s, d), b = task().generate(s, d);
      EXPECT_EQ(a.question, b.question);
      EXPECT_EQ(a.answer, b.answer);
      EXPECT_EQ(a.hash(), b.hash());
    }
}

TEST(Task, AnswersMatchIndependentEvaluator) {
  for (auto d : {Difficulty::Easy, Difficulty::Medium, Difficulty::Hard})
    for (std::uint64_t s = 0; s < 1000; ++s) {
      const auto p = task().generate(s * 7919 + 1, d);
      ASSERT_EQ(p.answer.size(), 1u);
      EXPECT_EQ(*task().digit_value(p.answer[0]), oracle::evaluate_question(*task().vocab(), p.question));
      EXPECT_EQ(p.question.size(), 2 * operand_count(d));
      EXPECT_EQ(std::count(p.question.begin(), p.question.end(), task().vocab()->sep()), 0);
      EXPECT_EQ(p.question.front(), task().vocab()->bos());
    }
}

TEST(Task, EnumerationCoversEasyAndMedium) {
  const auto easy = task().enumerate(Difficulty::Easy);
  EXPECT_EQ(easy.size(), 200u);
  std::set<std::uint64_t> h;
  for (const auto& p : easy) h.insert(p.hash());
  EXPECT_EQ(h.size(), 200u);
  EXPECT_EQ(task().enumerate(Difficulty::Medium).size(), 4000u);
}

TEST(Reward, Examples) {
  const auto rule = task().reward_rule();
  EXPECT_EQ(reward(enc("3 so 7 => 7 <eos>"), seven(), rule), 1);
  EXPECT_EQ(reward(enc("=> 7 <eos>"), seven(), rule), 1);
  EXPECT_EQ(reward(enc("3 so 7 7 <eos>"), seven(), rule), 0);
  EXPECT_EQ(reward(enc("=> 7 so <eos>"), seven(), rule), 0);
  EXPECT_EQ(reward(enc("=> 7 7 <eos>"), seven(), rule), 0);
  EXPECT_EQ(reward(enc("=> 3 => 7 <eos>"), seven(), rule), 1);
  EXPECT_EQ(reward(enc("=> 7 => 3 <eos>"), seven(), rule), 0);
  EXPECT_EQ(reward(enc("so so so so"), seven(), rule), 0);  // truncated without a separator
  EXPECT_EQ(reward(enc("=> 7"), seven(), rule), 1);         // truncated right after the answer
  EXPECT_EQ(reward(TokenSeq{}, seven(), rule), 0);
}

TEST(Reward, TwoCorrectLengthsExistForEveryEasyProblem) {
  const auto rule = task().reward_rule();
  const std::size_t V = task().vocab()->size();
  const TokenId eos = task().vocab()->eos();
  for (const auto& p : task().enumerate(Difficulty::Easy)) {
    std::set<std::size_t> lengths;
    // Every EOS-terminated response of length <= 4.
    for (std::size_t len = 1; len <= 4; ++len) {
      std::size_t combos = 1;
      for (std::size_t i = 0; i + 1 < len; ++i) combos *= V;
      for (std::size_t c = 0; c < combos; ++c) {
        TokenSeq r;
        for (std::size_t i = 0, x = c; i + 1 < len; ++i, x /= V) r.push_back(token_at(x % V));
        if (std::find(r.begin(), r.end(), eos) != r.end()) continue;
        r.push_back(eos);
        if (reward(r, p, rule) == 1) lengths.insert(len);
      }
    }
    ASSERT_GE(lengths.size(), 2u);
  }
}

TEST(Problem, JsonRoundTrip) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto p = task().generate(s, Difficulty::Medium);
    const auto j = task().problem_to_json(p);
    EXPECT_TRUE(validate_record(j, problem_schema()).empty());
    const auto q = task().problem_from_json(nlohmann::json::parse(j.dump()));
    EXPECT_EQ(q.question, p.question);
    EXPECT_EQ(q.answer, p.answer);
    EXPECT_EQ(q.seed, p.seed);
    EXPECT_EQ(q.difficulty, p.difficulty);
  }
  EXPECT_THROW(task().problem_from_json({{"question_tokens", {"<bos>"}}, {"answer_tokens", nlohmann::json::array()},
                                         {"difficulty", "easy"}, {"seed", 0}}),
               std::invalid_argument);
}

TEST(Demonstrator, FollowsTheGrammar) {
  Rng rng(3);
  DemonstratorConfig cfg;
  cfg.p_copy = 0.5;
  const auto& v = *task().vocab();
  auto is_filler = [&](TokenId t) {
    return std::find(task().fillers().begin(), task().fillers().end(), t) != task().fillers().end();
  };
  for (int i = 0; i < 2000; ++i) {
    const auto p = task().generate(rng(), Difficulty::Easy);
    const auto r = demonstrate(task(), p, cfg, rng);
    ASSERT_GE(r.size(), 4u);
    EXPECT_EQ(r.back(), v.eos());
    std::size_t k = 0;
    EXPECT_TRUE(task().digit_value(r[k++]));
    while (is_filler(r[k])) {
      ++k;
      EXPECT_TRUE(task().digit_value(r[k++]));
    }
    EXPECT_EQ(r[k++], v.sep());
    EXPECT_TRUE(task().digit_value(r[k++]));
    if (k + 1 < r.size()) { EXPECT_TRUE(is_filler(r[k++])); }
    EXPECT_EQ(k + 1, r.size());
  }
}

TEST(BasePolicy, FitsDemonstrations) {
  const auto emb = std::make_shared<const EmbeddingTable>(EmbeddingTable::one_hot(task().vocab()->size()));
  DemonstratorConfig cfg;
  cfg.p_correct_first = 1.0;
  cfg.p_continue = 0.0;
  cfg.p_stop_after_answer = 1.0;
  const auto problems = task().enumerate(Difficulty::Easy);
  const auto p = fit_base_policy(task(), emb, 3, problems, cfg, 1);
  const auto q = seven();
  // Always "d => d <eos>", so the first token is the right digit with near certainty.
  const auto d = p.distribution(q.question);
  EXPECT_GT(d[task().digit(7)], 0.99);
  double s = 0.0;
  for (double x : d.probs) s += x;
  EXPECT_NEAR(s, 1.0, 1e-9);
}
