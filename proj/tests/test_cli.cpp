#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "rose/cli.hpp"

using namespace rose;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = rose::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

const std::vector<std::string> kSmall = {"steps=2", "batch_size=4", "group_size=4", "heldout_size=6", "eval_k=2",
                                         "eval_every=1", "checkpoint_every=1"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& more) {
  a.insert(a.end(), more.begin(), more.end());
  return a;
}

void expect_valid_lines(const fs::path& p, const RecordSchema& schema, std::size_t expected) {
  const auto rows = read_jsonl(p);
  EXPECT_EQ(rows.size(), expected) << p;
  for (const auto& r : rows) EXPECT_TRUE(validate_record(r, schema).empty()) << r.dump();
}

}  // namespace

TEST(Cli, HelpExitsZero) {
  const auto r = invoke({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("rollout"), std::string::npos);
  EXPECT_EQ(invoke({}).code, rose::cli::kExitConfigError);
  EXPECT_EQ(invoke({"bogus"}).code, rose::cli::kExitConfigError);
}

TEST(Cli, TrainWritesValidArtifacts) {
  const auto dir = fixture::temp_dir("train");
  const auto r = invoke(with({"train", "--out", dir.string()}, kSmall));
  ASSERT_EQ(r.code, 0) << r.err;
  expect_valid_lines(dir / "metrics.jsonl", metrics_schema(), 3);
  expect_valid_lines(dir / "heldout.jsonl", problem_schema(), 6);
  EXPECT_TRUE(fs::exists(dir / "checkpoints" / "step_000001.json"));
  EXPECT_TRUE(fs::exists(dir / "checkpoints" / "step_000002.json"));
  EXPECT_NO_THROW(load_checkpoint(dir / "checkpoint.json"));
  const auto snap = load_config(dir / "config.json");
  EXPECT_EQ(snap.steps, 2u);
  EXPECT_EQ(snap.batch_size, 4u);
}

TEST(Cli, ConfigSnapshotReproducesTheRun) {
  const auto a = fixture::temp_dir("snap_a"), b = fixture::temp_dir("snap_b");
  ASSERT_EQ(invoke(with({"train", "--out", a.string()}, kSmall)).code, 0);
  ASSERT_EQ(invoke({"train", "--out", b.string(), "--config", (a / "config.json").string()}).code, 0);
  EXPECT_EQ(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
  EXPECT_EQ(slurp(a / "checkpoint.json"), slurp(b / "checkpoint.json"));
  EXPECT_EQ(slurp(a / "config.json"), slurp(b / "config.json"));
}

TEST(Cli, RolloutIsByteIdenticalAcrossRuns) {
  const auto a = fixture::temp_dir("ro_a"), b = fixture::temp_dir("ro_b");
  ASSERT_EQ(invoke({"rollout", "--out", a.string(), "--problems", "5", "heldout_size=5"}).code, 0);
  ASSERT_EQ(invoke({"rollout", "--out", b.string(), "--problems", "5", "heldout_size=5"}).code, 0);
  const auto text = slurp(a / "rollouts.jsonl");
  EXPECT_FALSE(text.empty());
  EXPECT_EQ(text, slurp(b / "rollouts.jsonl"));
  expect_valid_lines(a / "rollouts.jsonl", rollout_schema(), 5 * 8);
  expect_valid_lines(a / "problems.jsonl", problem_schema(), 5);
}

TEST(Cli, EpsilonOneGivesOnlyIndependentSamples) {
  const auto dir = fixture::temp_dir("eps1");
  ASSERT_EQ(invoke({"rollout", "--out", dir.string(), "--problems", "6", "epsilon=1", "heldout_size=6"}).code, 0);
  for (const auto& r : read_jsonl(dir / "rollouts.jsonl")) {
    EXPECT_TRUE(r["parent_response_id"].is_null());
    EXPECT_TRUE(r["branch_position"].is_null());
  }
  const auto zero = fixture::temp_dir("eps0");
  ASSERT_EQ(invoke({"rollout", "--out", zero.string(), "--problems", "6", "epsilon=0", "heldout_size=6"}).code, 0);
  std::size_t branched = 0;
  for (const auto& r : read_jsonl(zero / "rollouts.jsonl")) branched += !r["parent_response_id"].is_null();
  EXPECT_EQ(branched, 6u * 7u);
}

TEST(Cli, DottedOverrideUsesLastSegment) {
  const auto dir = fixture::temp_dir("dotted");
  ASSERT_EQ(invoke({"rollout", "--out", dir.string(), "--problems", "2", "rollout.epsilon=1", "heldout_size=2"}).code, 0);
  EXPECT_EQ(load_config(dir / "config.json").epsilon, 1.0);
}

TEST(Cli, MalformedConfigsNameTheKey) {
  const auto dir = fixture::temp_dir("badcfg");
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream(dir / name) << text;
    return (dir / name).string();
  };
  auto r = invoke({"eval", "--config", write("unknown.json", R"({"bogus_key": 1})")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("bogus_key"), std::string::npos) << r.err;

  r = invoke({"eval", "--config", write("type.json", R"({"epsilon": "lots"})")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("epsilon"), std::string::npos) << r.err;

  r = invoke({"eval", "--config", write("range.json", R"({"epsilon": 1.5})")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("epsilon"), std::string::npos) << r.err;

  r = invoke({"eval", "--config", write("enum.json", R"({"branching_metric": "vibes"})")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("branching_metric"), std::string::npos) << r.err;

  r = invoke({"eval", "--config", write("broken.json", "{\"epsilon\": ")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("not valid JSON"), std::string::npos) << r.err;

  r = invoke({"eval", "--config", (dir / "missing.json").string()});
  EXPECT_EQ(r.code, 2);

  r = invoke({"eval", "group_sizee=3"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("group_sizee"), std::string::npos) << r.err;

  r = invoke({"eval", "epsilon"});
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, MissingCheckpointIsRuntimeError) {
  const auto dir = fixture::temp_dir("nockpt");
  const auto r = invoke({"eval", "--out", dir.string(), "--checkpoint", (dir / "nope.json").string(), "heldout_size=4"});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("nope.json"), std::string::npos);
}

TEST(Cli, EvalOfTrainedCheckpoint) {
  const auto t = fixture::temp_dir("ev_train"), e = fixture::temp_dir("ev_eval");
  ASSERT_EQ(invoke(with({"train", "--out", t.string()}, kSmall)).code, 0);
  const auto r = invoke(with({"eval", "--out", e.string(), "--checkpoint", (t / "checkpoint.json").string()}, kSmall));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(e / "eval.json"));
  EXPECT_TRUE(validate_record(j, eval_schema()).empty()) << j.dump();
  // The final training row evaluates the same policy on the same problems with the same seed.
  const auto last = read_jsonl(t / "metrics.jsonl").back();
  EXPECT_EQ(j["pass_at_k"], last["pass_at_k"]);
  EXPECT_EQ(j["accuracy"], last["eval_accuracy"]);
}

TEST(Cli, AnalyzeSummarizesRolloutDumps) {
  const auto a = fixture::temp_dir("an_a"), b = fixture::temp_dir("an_b"), out = fixture::temp_dir("an_out");
  ASSERT_EQ(invoke({"rollout", "--out", a.string(), "--problems", "4", "heldout_size=4"}).code, 0);
  ASSERT_EQ(invoke({"rollout", "--out", b.string(), "--problems", "4", "heldout_size=4", "epsilon=1"}).code, 0);
  const auto r = invoke({"analyze", "--out", out.string(), "--run", a.string(), "--run", b.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(out / "analysis.json"));
  ASSERT_EQ(j.size(), 2u);
  EXPECT_EQ(j[0]["groups"], 4);
  EXPECT_EQ(j[0]["responses"], 32);
  EXPECT_EQ(j[1]["branch_fraction"], 0.0);
  EXPECT_GT(j[0]["branch_fraction"].get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(out / "analysis.md"));
  EXPECT_EQ(invoke({"analyze", "--out", out.string(), "--run", (out / "nowhere").string()}).code, 2);
}

TEST(Cli, AblateRowsMatchSchema) {
  const auto dir = fixture::temp_dir("ablate");
  const auto r = invoke(with({"ablate", "--out", dir.string(), "--grid", "components", "--seeds", "1"},
                          {"steps=1", "batch_size=2", "group_size=4", "heldout_size=4", "eval_k=2"}));
  ASSERT_EQ(r.code, 0) << r.err;
  expect_valid_lines(dir / "ablation.jsonl", ablation_schema(), 4);
  EXPECT_NE(slurp(dir / "ablation.md").find("no_advantage_estimation"), std::string::npos);
  EXPECT_EQ(invoke({"ablate", "--out", dir.string(), "--grid", "colour"}).code, 2);
}

TEST(Cli, ConfigJsonRoundTrip) {
  TrainConfig c;
  c.epsilon = 0.25;
  c.branching_metric = BranchMetric::Random;
  c.advantage_mode = AdvantageMode::GroupMean;
  c.sd_include_diagonal = false;
  c.seed = 123456789012345ULL;
  const auto j = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(nlohmann::json::parse(j.dump()))), j);
  EXPECT_EQ(j.size(), config_fields().size());
}

TEST(Binary, OutputRootEnvironmentVariable) {
  const auto root = fixture::temp_dir("envroot");
  const std::string cmd = "ROSE_OUTPUT_ROOT='" + root.string() + "' '" + ROSE_CLI_PATH +
                          "' rollout --problems 2 heldout_size=2 > /dev/null";
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0);
  EXPECT_TRUE(fs::exists(root / "rollout" / "rollouts.jsonl"));
}

TEST(Binary, ExitCodes) {
  const auto root = fixture::temp_dir("bincodes");
  auto status_of = [&](const std::string& args) {
    const int s = std::system(("'" + std::string(ROSE_CLI_PATH) + "' " + args + " > /dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  EXPECT_EQ(status_of("--help"), 0);
  EXPECT_EQ(status_of("eval --out '" + root.string() + "' no_such_key=1"), 2);
  EXPECT_EQ(status_of("eval --out '" + root.string() + "' --checkpoint '" + (root / "x.json").string() + "'"), 3);
}
