#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rose/credit.hpp"
#include "rose/objective.hpp"
#include "rose/rollout.hpp"
#include "rose/tasks.hpp"

namespace rose {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OptimizerKind { Sgd, Adam };

inline std::string_view to_string(OptimizerKind o) { return o == OptimizerKind::Sgd ? "sgd" : "adam"; }

inline std::optional<OptimizerKind> parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  return std::nullopt;
}

enum class EmbeddingPreset { SynonymSimplex, SynonymClusters, Gaussian, OneHot };

inline std::string_view to_string(EmbeddingPreset e) {
  switch (e) {
    case EmbeddingPreset::SynonymSimplex: return "synonym_simplex";
    case EmbeddingPreset::SynonymClusters: return "synonym_clusters";
    case EmbeddingPreset::Gaussian: return "gaussian";
    case EmbeddingPreset::OneHot: return "one_hot";
  }
  return "unknown";
}

inline std::optional<EmbeddingPreset> parse_embedding_preset(std::string_view s) {
  for (auto e : {EmbeddingPreset::SynonymSimplex, EmbeddingPreset::SynonymClusters, EmbeddingPreset::Gaussian, EmbeddingPreset::OneHot})
    if (to_string(e) == s) return e;
  return std::nullopt;
}

enum class InitKind { Base, Uniform };

inline std::string_view to_string(InitKind i) { return i == InitKind::Base ? "base" : "uniform"; }

inline std::optional<InitKind> parse_init(std::string_view s) {
  if (s == "base") return InitKind::Base;
  if (s == "uniform") return InitKind::Uniform;
  return std::nullopt;
}

// Every hyperparameter of a run. Field names are the config-file keys.
struct TrainConfig {
  // run
  std::uint64_t seed = 0;
  std::size_t steps = 200;
  std::size_t batch_size = 32;
  std::size_t workers = 1;
  // rollout
  std::size_t group_size = 8;
  double epsilon = 0.5;
  std::size_t max_len = 16;
  double rollout_temperature = 1.0;
  double rollout_top_p = 1.0;
  std::size_t dedupe_budget = 4;
  double retry_budget = 2.0;  // extra questions per batch, as a multiple of batch_size
  BranchMetric branching_metric = BranchMetric::SemanticEntropy;
  std::size_t semantic_top_k = 20;
  bool sd_include_diagonal = true;
  // credit
  double alpha = 1.0;
  AdvantageMode advantage_mode = AdvantageMode::Tree;
  // objective / optimizer
  double clip_epsilon = 0.2;
  double beta = 0.001;
  double learning_rate = 10.0;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  std::size_t inner_updates = 1;
  // evaluation
  double eval_temperature = 0.6;
  double eval_top_p = 0.95;
  std::size_t eval_k = 8;
  std::size_t eval_every = 10;
  std::size_t heldout_size = 80;
  std::size_t checkpoint_every = 50;
  // environment
  Difficulty difficulty = Difficulty::Easy;
  std::size_t context_order = 3;
  std::size_t filler_count = 6;
  EmbeddingPreset embedding_preset = EmbeddingPreset::SynonymSimplex;
  std::size_t embedding_dim = 16;  // gaussian presets only
  std::uint64_t embedding_seed = 7;
  InitKind init = InitKind::Base;
  std::uint64_t init_seed = 1;
  double demo_p_correct_first = 0.3;
  double demo_p_copy = 1.0;
  double demo_p_continue = 0.8;
  std::size_t demo_max_steps = 5;
  double demo_p_stop = 0.1;
  double demo_smoothing = 0.01;

  RolloutConfig rollout_config() const {
    RolloutConfig r;
    r.group_size = group_size;
    r.epsilon = epsilon;
    r.max_len = max_len;
    r.metrics = MetricConfig{semantic_top_k, sd_include_diagonal};
    r.temperature = rollout_temperature;
    r.top_p = rollout_top_p;
    r.dedupe_budget = dedupe_budget;
    r.metric = branching_metric;
    return r;
  }

  ObjectiveConfig objective_config() const { return {clip_epsilon, beta}; }

  DemonstratorConfig demonstrator_config() const {
    DemonstratorConfig d;
    d.p_correct_first = demo_p_correct_first;
    d.p_copy = demo_p_copy;
    d.p_continue = demo_p_continue;
    d.max_steps = demo_max_steps;
    d.p_stop_after_answer = demo_p_stop;
    d.smoothing = demo_smoothing;
    return d;
  }

  void validate() const;
};

namespace detail {

template <class T>
T parse_enum(const nlohmann::json& v, std::string_view key, std::optional<T> (*parse)(std::string_view)) {
  if (!v.is_string()) throw ConfigError("config key '" + std::string(key) + "': expected a string");
  if (auto e = parse(v.get<std::string>())) return *e;
  throw ConfigError("config key '" + std::string(key) + "': unknown value '" + v.get<std::string>() + "'");
}

inline void assign(double& dst, const nlohmann::json& v, std::string_view key) {
  if (!v.is_number()) throw ConfigError("config key '" + std::string(key) + "': expected a number");
  dst = v.get<double>();
}

inline void assign(std::size_t& dst, const nlohmann::json& v, std::string_view key) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
    throw ConfigError("config key '" + std::string(key) + "': expected a non-negative integer");
  dst = v.get<std::size_t>();
}

inline void assign(bool& dst, const nlohmann::json& v, std::string_view key) {
  if (!v.is_boolean()) throw ConfigError("config key '" + std::string(key) + "': expected true or false");
  dst = v.get<bool>();
}

inline void assign(BranchMetric& dst, const nlohmann::json& v, std::string_view key) { dst = parse_enum(v, key, &parse_branch_metric); }
inline void assign(AdvantageMode& dst, const nlohmann::json& v, std::string_view key) { dst = parse_enum(v, key, &parse_advantage_mode); }
inline void assign(OptimizerKind& dst, const nlohmann::json& v, std::string_view key) { dst = parse_enum(v, key, &parse_optimizer); }
inline void assign(Difficulty& dst, const nlohmann::json& v, std::string_view key) { dst = parse_enum(v, key, &parse_difficulty); }
inline void assign(EmbeddingPreset& dst, const nlohmann::json& v, std::string_view key) { dst = parse_enum(v, key, &parse_embedding_preset); }
inline void assign(InitKind& dst, const nlohmann::json& v, std::string_view key) { dst = parse_enum(v, key, &parse_init); }

template <class T>
nlohmann::json emit(const T& v) {
  if constexpr (std::is_arithmetic_v<T>) {
    return v;
  } else {
    return std::string(to_string(v));
  }
}

}  // namespace detail

struct ConfigField {
  std::string_view name;
  std::function<void(TrainConfig&, const nlohmann::json&)> set;
  std::function<nlohmann::json(const TrainConfig&)> get;
};

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    auto add = [&f](std::string_view name, auto member) {
      f.push_back({name,
                   [name, member](TrainConfig& c, const nlohmann::json& v) { detail::assign(c.*member, v, name); },
                   [member](const TrainConfig& c) { return detail::emit(c.*member); }});
    };
    add("seed", &TrainConfig::seed);
    add("steps", &TrainConfig::steps);
    add("batch_size", &TrainConfig::batch_size);
    add("workers", &TrainConfig::workers);
    add("group_size", &TrainConfig::group_size);
    add("epsilon", &TrainConfig::epsilon);
    add("max_len", &TrainConfig::max_len);
    add("rollout_temperature", &TrainConfig::rollout_temperature);
    add("rollout_top_p", &TrainConfig::rollout_top_p);
    add("dedupe_budget", &TrainConfig::dedupe_budget);
    add("retry_budget", &TrainConfig::retry_budget);
    add("branching_metric", &TrainConfig::branching_metric);
    add("semantic_top_k", &TrainConfig::semantic_top_k);
    add("sd_include_diagonal", &TrainConfig::sd_include_diagonal);
    add("alpha", &TrainConfig::alpha);
    add("advantage_mode", &TrainConfig::advantage_mode);
    add("clip_epsilon", &TrainConfig::clip_epsilon);
    add("beta", &TrainConfig::beta);
    add("learning_rate", &TrainConfig::learning_rate);
    add("optimizer", &TrainConfig::optimizer);
    add("inner_updates", &TrainConfig::inner_updates);
    add("eval_temperature", &TrainConfig::eval_temperature);
    add("eval_top_p", &TrainConfig::eval_top_p);
    add("eval_k", &TrainConfig::eval_k);
    add("eval_every", &TrainConfig::eval_every);
    add("heldout_size", &TrainConfig::heldout_size);
    add("checkpoint_every", &TrainConfig::checkpoint_every);
    add("difficulty", &TrainConfig::difficulty);
    add("context_order", &TrainConfig::context_order);
    add("filler_count", &TrainConfig::filler_count);
    add("embedding_preset", &TrainConfig::embedding_preset);
    add("embedding_dim", &TrainConfig::embedding_dim);
    add("embedding_seed", &TrainConfig::embedding_seed);
    add("init", &TrainConfig::init);
    add("init_seed", &TrainConfig::init_seed);
    add("demo_p_correct_first", &TrainConfig::demo_p_correct_first);
    add("demo_p_copy", &TrainConfig::demo_p_copy);
    add("demo_p_continue", &TrainConfig::demo_p_continue);
    add("demo_max_steps", &TrainConfig::demo_max_steps);
    add("demo_p_stop", &TrainConfig::demo_p_stop);
    add("demo_smoothing", &TrainConfig::demo_smoothing);
    return f;
  }();
  return fields;
}

inline const ConfigField* find_config_field(std::string_view name) {
  for (const auto& f : config_fields())
    if (f.name == name) return &f;
  return nullptr;
}

inline void TrainConfig::validate() const {
  auto bad = [](std::string_view key, std::string_view why) {
    throw ConfigError("config key '" + std::string(key) + "': " + std::string(why));
  };
  if (steps > 1'000'000) bad("steps", "unreasonably large");
  if (batch_size < 1) bad("batch_size", "must be >= 1");
  if (workers < 1) bad("workers", "must be >= 1");
  if (group_size < 1) bad("group_size", "must be >= 1");
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) bad("epsilon", "must be in [0, 1]");
  if (max_len < 1) bad("max_len", "must be >= 1");
  if (!(rollout_temperature >= 0.0)) bad("rollout_temperature", "must be >= 0");
  if (!(rollout_top_p > 0.0 && rollout_top_p <= 1.0)) bad("rollout_top_p", "must be in (0, 1]");
  if (!(retry_budget >= 0.0)) bad("retry_budget", "must be >= 0");
  if (semantic_top_k < 1) bad("semantic_top_k", "must be >= 1");
  if (!(alpha >= 0.0)) bad("alpha", "must be >= 0");
  if (!(clip_epsilon > 0.0)) bad("clip_epsilon", "must be > 0");
  if (!(beta >= 0.0)) bad("beta", "must be >= 0");
  if (!(learning_rate >= 0.0)) bad("learning_rate", "must be >= 0");
  if (inner_updates < 1) bad("inner_updates", "must be >= 1");
  if (!(eval_temperature >= 0.0)) bad("eval_temperature", "must be >= 0");
  if (!(eval_top_p > 0.0 && eval_top_p <= 1.0)) bad("eval_top_p", "must be in (0, 1]");
  if (eval_k < 1) bad("eval_k", "must be >= 1");
  if (heldout_size < 1) bad("heldout_size", "must be >= 1");
  if (context_order < 1 || context_order > 8) bad("context_order", "must be in [1, 8]");
  if (filler_count < 1 || filler_count > ArithmeticTask::kFillerWords.size()) bad("filler_count", "must be in [1, 8]");
  if (embedding_dim < 1) bad("embedding_dim", "must be >= 1");
  for (auto [key, v] : {std::pair{"demo_p_correct_first", demo_p_correct_first}, std::pair{"demo_p_copy", demo_p_copy},
                        std::pair{"demo_p_continue", demo_p_continue}, std::pair{"demo_p_stop", demo_p_stop}})
    if (!(v >= 0.0 && v <= 1.0)) bad(key, "must be a probability");
  if (!(demo_smoothing > 0.0)) bad("demo_smoothing", "must be > 0");
}

inline nlohmann::json config_to_json(const TrainConfig& c) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& f : config_fields()) out[std::string(f.name)] = f.get(c);
  return out;
}

// Applies the keys of a flat JSON object on top of `base`. Unknown keys and
// type mismatches are rejected with the offending key in the message.
inline TrainConfig config_from_json(const nlohmann::json& doc, TrainConfig base = {}) {
  if (!doc.is_object()) throw ConfigError("config: top level must be an object of key/value pairs");
  for (const auto& [key, value] : doc.items()) {
    const ConfigField* f = find_config_field(key);
    if (!f) throw ConfigError("config: unknown key '" + key + "'");
    f->set(base, value);
  }
  base.validate();
  return base;
}

inline TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + ex.what());
  }
  return config_from_json(doc, std::move(base));
}

// "key=value"; the value is read as JSON when it parses (numbers, booleans),
// otherwise as a bare string. Dotted keys are accepted and their last segment
// names the field, so "rollout.epsilon=1" and "epsilon=1" are equivalent.
inline void apply_override(TrainConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0)
    throw ConfigError("override '" + std::string(assignment) + "': expected key=value");
  std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  if (const auto dot = key.rfind('.'); dot != std::string::npos) key = key.substr(dot + 1);
  const ConfigField* f = find_config_field(key);
  if (!f) throw ConfigError("override: unknown key '" + key + "'");
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  f->set(cfg, value);
}

inline TrainConfig apply_overrides(TrainConfig cfg, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

}  // namespace rose
