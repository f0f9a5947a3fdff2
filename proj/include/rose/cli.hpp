#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rose/checkpoint.hpp"
#include "rose/config.hpp"
#include "rose/credit.hpp"
#include "rose/jsonl.hpp"
#include "rose/trainer.hpp"

namespace rose::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfigError = 2;
inline constexpr int kExitRuntimeError = 3;

inline constexpr const char* kOutputRootEnv = "ROSE_OUTPUT_ROOT";

namespace fs = std::filesystem;

struct CommonArgs {
  std::string config;
  std::string out;
  std::vector<std::string> overrides;
};

inline TrainConfig resolve_config(const CommonArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_config(a.config);
  return apply_overrides(cfg, a.overrides);
}

// --out wins; otherwise $ROSE_OUTPUT_ROOT/<subcommand>, otherwise runs/<subcommand>.
inline fs::path output_dir(const std::string& out, std::string_view subcommand) {
  if (!out.empty()) return out;
  const char* root = std::getenv(kOutputRootEnv);
  return fs::path(root && *root ? root : "runs") / subcommand;
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

inline void write_config_snapshot(const fs::path& dir, const TrainConfig& cfg) {
  write_text(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
}

inline void write_problems(const fs::path& path, const ArithmeticTask& task, std::span<const Problem> problems) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  for (const auto& p : problems) write_jsonl(f, task.problem_to_json(p));
}

// Checkpoint if given (must exist and match the task vocabulary), else the config's initial policy.
inline PolicyParams policy_for(const std::string& checkpoint, const Experiment& ex) {
  if (checkpoint.empty()) return ex.initial;
  if (!fs::exists(checkpoint)) throw CheckpointError("checkpoint not found: " + checkpoint);
  PolicyParams p = load_checkpoint(checkpoint);
  if (!(p.vocab() == *ex.task.vocab()))
    throw CheckpointError("checkpoint vocabulary does not match the configured task");
  return p;
}

inline std::string fmt(double v, int digits = 3) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

inline std::string fmt(const nlohmann::json& v, int digits = 3) {
  return v.is_number() ? fmt(v.get<double>(), digits) : std::string("-");
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline int cmd_train(const CommonArgs& a, std::ostream& out) {
  const TrainConfig cfg = resolve_config(a);
  const fs::path dir = output_dir(a.out, "train");
  fs::create_directories(dir / "checkpoints");
  write_config_snapshot(dir, cfg);
  const Experiment ex = make_experiment(cfg);
  write_problems(dir / "heldout.jsonl", ex.task, ex.heldout);

  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary);
  TrainHooks hooks;
  hooks.on_step = [&](const StepMetrics& m) {
    write_jsonl(metrics, to_json(m));
    metrics.flush();
    if (m.warning) out << "step " << m.step << ": warning: " << *m.warning << "\n";
    if (m.eval) out << "step " << m.step << ": pass@" << m.eval->k << " " << fmt(m.eval->pass_at_k) << "\n";
  };
  hooks.on_checkpoint = [&](std::size_t step, const PolicyParams& p) {
    std::ostringstream name;
    name << "step_" << std::setw(6) << std::setfill('0') << step << ".json";
    save_checkpoint(p, dir / "checkpoints" / name.str());
  };
  const TrainResult res = train(cfg, ex, hooks);
  save_checkpoint(res.policy, dir / "checkpoint.json");
  out << "wrote " << (dir / "checkpoint.json").string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

inline int cmd_eval(const CommonArgs& a, const std::string& checkpoint, std::ostream& out) {
  const TrainConfig cfg = resolve_config(a);
  const Experiment ex = make_experiment(cfg);
  const PolicyParams policy = policy_for(checkpoint, ex);
  const fs::path dir = output_dir(a.out, "eval");
  fs::create_directories(dir);
  write_config_snapshot(dir, cfg);
  write_problems(dir / "problems.jsonl", ex.task, ex.heldout);
  const EvalReport rep = evaluate(policy, ex.heldout, ex.task.reward_rule(), eval_settings(cfg));
  write_text(dir / "eval.json", to_json(rep).dump(2) + "\n");
  out << "pass@" << rep.k << " " << fmt(rep.pass_at_k, 4) << " over " << rep.problems << " problems\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// rollout
// ---------------------------------------------------------------------------

inline int cmd_rollout(const CommonArgs& a, const std::string& checkpoint, std::size_t n_problems, std::ostream& out) {
  const TrainConfig cfg = resolve_config(a);
  const Experiment ex = make_experiment(cfg);
  const PolicyParams policy = policy_for(checkpoint, ex);
  const fs::path dir = output_dir(a.out, "rollout");
  fs::create_directories(dir);
  write_config_snapshot(dir, cfg);

  std::vector<Problem> problems(ex.heldout.begin(), ex.heldout.begin() + std::min(n_problems, ex.heldout.size()));
  write_problems(dir / "problems.jsonl", ex.task, problems);
  std::vector<std::uint64_t> seeds;
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < problems.size(); ++i) {
    seeds.push_back(derive_seed(cfg.seed, {stream::kRollout, ~0ULL, i}));
    ids.push_back(i);
  }
  auto trees = rollout_problems(policy, problems, ex.task.reward_rule(), cfg.rollout_config(), seeds, ids, cfg.workers);

  std::ofstream f(dir / "rollouts.jsonl", std::ios::binary);
  std::size_t responses = 0;
  for (auto& t : trees) {
    const AdvantageMap adv = estimate_advantages(t, cfg.alpha, cfg.advantage_mode);
    for (const Response& r : t.responses()) {
      write_jsonl(f, rollout_record(t, r, policy.vocab(), &adv));
      ++responses;
    }
  }
  out << "wrote " << responses << " responses for " << trees.size() << " problems to "
      << (dir / "rollouts.jsonl").string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

// Diversity and length summary of one rollout dump.
inline nlohmann::json summarize_dump(const std::vector<nlohmann::json>& records, const TrainConfig& cfg) {
  const ArithmeticTask task(cfg.filler_count);
  const auto emb = make_embeddings(cfg, task);
  std::map<std::size_t, std::vector<const nlohmann::json*>> groups;
  for (const auto& r : records) {
    if (const auto errs = validate_record(r, rollout_schema()); !errs.empty())
      throw std::runtime_error("rollout record: " + errs.front());
    groups[r["question_id"].get<std::size_t>()].push_back(&r);
  }
  double length = 0, correct = 0, correct_length = 0, duplicates = 0, branches = 0, sim = 0, branch_h = 0;
  std::size_t sim_groups = 0;
  std::vector<std::size_t> hist(kDiversityBins, 0);
  for (const auto& [qid, rs] : groups) {
    std::vector<TokenSeq> seqs;
    for (const auto* r : rs) {
      TokenSeq s;
      for (const auto& sym : (*r)["tokens"]) s.push_back(task.vocab()->require(sym.get<std::string>()));
      length += static_cast<double>(s.size());
      if ((*r)["reward"] == 1) {
        ++correct;
        correct_length += static_cast<double>(s.size());
      }
      duplicates += (*r)["duplicate"].get<bool>();
      if (!(*r)["parent_response_id"].is_null()) {
        ++branches;
        const auto parent = (*r)["parent_response_id"].get<std::size_t>();
        const auto pos = (*r)["branch_position"].get<std::size_t>();
        branch_h += (*rs.at(parent))["entropy"].at(pos).get<double>();
      }
      seqs.push_back(std::move(s));
    }
    if (seqs.size() >= 2) {
      const auto d = diversity_stats(seqs, *emb);
      sim += d.mean_similarity;
      ++sim_groups;
      for (std::size_t b = 0; b < hist.size(); ++b) hist[b] += d.histogram[b];
    }
  }
  const double n = static_cast<double>(records.size());
  nlohmann::json j = {{"groups", groups.size()},
                      {"responses", records.size()},
                      {"branching_metric", std::string(to_string(cfg.branching_metric))},
                      {"epsilon", cfg.epsilon},
                      {"alpha", cfg.alpha},
                      {"mean_length", n ? length / n : 0.0},
                      {"correct_fraction", n ? correct / n : 0.0},
                      {"mean_correct_length", nullptr},
                      {"duplicate_fraction", n ? duplicates / n : 0.0},
                      {"branch_fraction", n ? branches / n : 0.0},
                      {"mean_branch_entropy", nullptr},
                      {"mean_pairwise_similarity", nullptr},
                      {"similarity_histogram", hist}};
  if (correct > 0) j["mean_correct_length"] = correct_length / correct;
  if (branches > 0) j["mean_branch_entropy"] = branch_h / branches;
  if (sim_groups > 0) j["mean_pairwise_similarity"] = sim / static_cast<double>(sim_groups);
  return j;
}

inline int cmd_analyze(const CommonArgs& a, const std::vector<std::string>& runs, std::ostream& out) {
  if (runs.empty()) throw ConfigError("analyze: at least one --run directory is required");
  nlohmann::json summaries = nlohmann::json::array();
  std::ostringstream table;
  table << "| run | metric | epsilon | alpha | groups | mean len | correct | correct len | similarity | duplicates | branch H |\n"
        << "|---|---|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& run : runs) {
    const fs::path rdir(run);
    TrainConfig cfg = load_config(rdir / "config.json");
    cfg = apply_overrides(cfg, a.overrides);
    nlohmann::json s = summarize_dump(read_jsonl(rdir / "rollouts.jsonl"), cfg);
    s["run"] = run;
    table << "| " << run << " | " << s["branching_metric"].get<std::string>() << " | " << fmt(s["epsilon"], 2) << " | "
          << fmt(s["alpha"], 2) << " | " << s["groups"] << " | " << fmt(s["mean_length"], 2) << " | "
          << fmt(s["correct_fraction"]) << " | " << fmt(s["mean_correct_length"], 2) << " | "
          << fmt(s["mean_pairwise_similarity"], 4) << " | " << fmt(s["duplicate_fraction"]) << " | "
          << fmt(s["mean_branch_entropy"]) << " |\n";
    summaries.push_back(std::move(s));
  }
  const fs::path dir = output_dir(a.out, "analyze");
  fs::create_directories(dir);
  write_text(dir / "analysis.json", summaries.dump(2) + "\n");
  write_text(dir / "analysis.md", table.str());
  out << table.str();
  return kExitOk;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblationSetting {
  std::string grid;
  std::string label;
  std::vector<std::string> overrides;
};

inline std::vector<AblationSetting> ablation_grid(const std::string& grid) {
  std::vector<AblationSetting> out;
  if (grid == "metric" || grid == "all")
    for (const char* m : {"generation_entropy", "semantic_divergence", "semantic_entropy", "random"})
      out.push_back({"metric", m, {std::string("branching_metric=") + m}});
  if (grid == "epsilon" || grid == "all")
    for (const char* e : {"0", "0.3", "0.5", "0.7", "1"}) out.push_back({"epsilon", e, {std::string("epsilon=") + e}});
  if (grid == "alpha" || grid == "all")
    for (const char* v : {"0", "1", "2", "3", "10"}) out.push_back({"alpha", v, {std::string("alpha=") + v}});
  if (grid == "components" || grid == "all") {
    out.push_back({"components", "full", {}});
    out.push_back({"components", "no_epsilon_exploration", {"epsilon=0"}});
    out.push_back({"components", "random_branching", {"branching_metric=random"}});
    out.push_back({"components", "no_advantage_estimation", {"advantage_mode=group_mean"}});
  }
  if (out.empty()) throw ConfigError("ablate: unknown grid '" + grid + "' (metric, epsilon, alpha, components, all)");
  return out;
}

inline nlohmann::json ablation_row(const AblationSetting& s, std::uint64_t seed, const TrainResult& res) {
  const StepMetrics& first = res.log.front();
  const StepMetrics& last = res.log.back();
  double sim = 0.0;
  std::size_t n = 0;
  for (const auto& m : res.log)
    if (m.mean_pairwise_similarity) {
      sim += *m.mean_pairwise_similarity;
      ++n;
    }
  nlohmann::json j = {{"grid", s.grid},
                      {"setting", s.label},
                      {"seed", seed},
                      {"initial_pass_at_k", first.eval->pass_at_k},
                      {"pass_at_k", last.eval->pass_at_k},
                      {"eval_accuracy", last.eval->accuracy},
                      {"eval_mean_length", last.eval->mean_length},
                      {"eval_mean_correct_length", nullptr},
                      {"mean_pairwise_similarity", nullptr}};
  if (last.eval->mean_correct_length) j["eval_mean_correct_length"] = *last.eval->mean_correct_length;
  if (n) j["mean_pairwise_similarity"] = sim / static_cast<double>(n);
  return j;
}

inline std::string ablation_table(const std::vector<nlohmann::json>& rows) {
  struct Acc {
    double pass = 0, gain = 0, clen = 0, sim = 0;
    std::size_t n = 0, nclen = 0, nsim = 0;
  };
  std::vector<std::pair<std::string, Acc>> acc;  // first-seen order
  for (const auto& r : rows) {
    const std::string key = r["grid"].get<std::string>() + "\t" + r["setting"].get<std::string>();
    auto it = std::find_if(acc.begin(), acc.end(), [&](const auto& p) { return p.first == key; });
    if (it == acc.end()) it = acc.insert(acc.end(), {key, Acc{}});
    Acc& x = it->second;
    x.pass += r["pass_at_k"].get<double>();
    x.gain += r["pass_at_k"].get<double>() - r["initial_pass_at_k"].get<double>();
    ++x.n;
    if (r["eval_mean_correct_length"].is_number()) x.clen += r["eval_mean_correct_length"].get<double>(), ++x.nclen;
    if (r["mean_pairwise_similarity"].is_number()) x.sim += r["mean_pairwise_similarity"].get<double>(), ++x.nsim;
  }
  std::ostringstream t;
  t << "| grid | setting | seeds | pass@k | gain | correct len | similarity |\n|---|---|---|---|---|---|---|\n";
  for (const auto& [key, x] : acc) {
    const auto tab = key.find('\t');
    t << "| " << key.substr(0, tab) << " | " << key.substr(tab + 1) << " | " << x.n << " | "
      << fmt(x.pass / static_cast<double>(x.n)) << " | " << fmt(x.gain / static_cast<double>(x.n)) << " | "
      << (x.nclen ? fmt(x.clen / static_cast<double>(x.nclen), 2) : "-") << " | "
      << (x.nsim ? fmt(x.sim / static_cast<double>(x.nsim), 4) : "-") << " |\n";
  }
  return t.str();
}

inline int cmd_ablate(const CommonArgs& a, const std::vector<std::string>& grids, std::size_t seeds,
                      std::ostream& out) {
  const TrainConfig base = resolve_config(a);
  std::vector<AblationSetting> settings;
  for (const auto& g : grids.empty() ? std::vector<std::string>{"all"} : grids)
    for (auto& s : ablation_grid(g)) settings.push_back(std::move(s));
  std::vector<TrainConfig> configs;
  for (const auto& s : settings) configs.push_back(apply_overrides(base, s.overrides));  // fail fast on bad settings

  const fs::path dir = output_dir(a.out, "ablate");
  fs::create_directories(dir);
  write_config_snapshot(dir, base);
  std::ofstream f(dir / "ablation.jsonl", std::ios::binary);
  std::vector<nlohmann::json> rows;
  for (std::size_t i = 0; i < settings.size(); ++i) {
    for (std::uint64_t s = 0; s < seeds; ++s) {
      TrainConfig cfg = configs[i];
      cfg.seed = base.seed + s;
      auto row = ablation_row(settings[i], cfg.seed, train(cfg));
      write_jsonl(f, row);
      f.flush();
      out << settings[i].grid << " " << settings[i].label << " seed " << cfg.seed << ": pass@" << cfg.eval_k << " "
          << fmt(row["pass_at_k"]) << "\n";
      rows.push_back(std::move(row));
    }
  }
  const std::string table = ablation_table(rows);
  write_text(dir / "ablation.md", table);
  out << table;
  return kExitOk;
}

// ---------------------------------------------------------------------------
// entry point
// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Tree-structured RL rollouts with semantic-entropy branching on toy arithmetic tasks", "rose"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string checkpoint;
  std::size_t n_problems = 32;
  std::vector<std::string> runs;
  std::vector<std::string> grids;
  std::size_t seeds = 5;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "flat JSON config; keys are TrainConfig field names");
    sub->add_option("--out", common.out, std::string("output directory (default $") + kOutputRootEnv + "/<command>)");
    sub->add_option("overrides", common.overrides, "key=value overrides, applied after --config");
  };
  auto* train_cmd = app.add_subcommand("train", "train a policy; writes metrics.jsonl and checkpoints");
  add_common(train_cmd);
  auto* eval_cmd = app.add_subcommand("eval", "pass@k on the held-out problems");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint, "policy checkpoint (default: the configured initial policy)");
  auto* rollout_cmd = app.add_subcommand("rollout", "dump rollout trees for a fixed problem set as JSONL");
  add_common(rollout_cmd);
  rollout_cmd->add_option("--checkpoint", checkpoint, "policy checkpoint (default: the configured initial policy)");
  rollout_cmd->add_option("--problems", n_problems, "number of held-out problems to roll out")->check(CLI::PositiveNumber);
  auto* analyze_cmd = app.add_subcommand("analyze", "diversity and length tables from rollout dumps");
  add_common(analyze_cmd);
  analyze_cmd->add_option("--run", runs, "directory holding config.json and rollouts.jsonl (repeatable)")->required();
  auto* ablate_cmd = app.add_subcommand("ablate", "run ablation grids over seeds and tabulate");
  add_common(ablate_cmd);
  ablate_cmd->add_option("--grid", grids, "metric, epsilon, alpha, components or all (repeatable)");
  ablate_cmd->add_option("--seeds", seeds, "seeds per setting")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfigError;
  }

  try {
    if (*train_cmd) return cmd_train(common, out);
    if (*eval_cmd) return cmd_eval(common, checkpoint, out);
    if (*rollout_cmd) return cmd_rollout(common, checkpoint, n_problems, out);
    if (*analyze_cmd) return cmd_analyze(common, runs, out);
    if (*ablate_cmd) return cmd_ablate(common, grids, seeds, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntimeError;
  }
  return kExitRuntimeError;
}

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"rose"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace rose::cli
