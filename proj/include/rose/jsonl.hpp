#pragma once

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rose/credit.hpp"
#include "rose/rollout.hpp"
#include "rose/trainer.hpp"

namespace rose {

// One JSON document per line, compact, keys sorted (nlohmann's default).
inline void write_jsonl(std::ostream& out, const nlohmann::json& record) { out << record.dump() << '\n'; }

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& ex) {
      throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": " + ex.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

// One record per response. parent_response_id and branch_position are null
// for responses started at the root; advantages are null when not computed.
inline nlohmann::json rollout_record(const RolloutTree& tree, const Response& r, const Vocab& vocab,
                                     const AdvantageMap* adv) {
  using nlohmann::json;
  std::vector<std::string> tokens;
  std::vector<double> h, sd, se;
  for (TokenId t : r.tokens) tokens.push_back(vocab.symbol(t));
  for (const auto& m : r.metrics) {
    h.push_back(m.entropy);
    sd.push_back(m.divergence);
    se.push_back(m.semantic);
  }
  json j = {{"question_id", tree.question_id()},
            {"response_id", r.id},
            {"parent_response_id", r.parent_id ? json(*r.parent_id) : json(nullptr)},
            {"branch_position", r.branch_position ? json(*r.branch_position) : json(nullptr)},
            {"origin", std::string(to_string(r.origin))},
            {"tokens", tokens},
            {"reward", r.reward ? json(*r.reward) : json(nullptr)},
            {"boundaries", r.boundaries},
            {"entropy", h},
            {"semantic_divergence", sd},
            {"semantic_entropy", se},
            {"logprobs", r.logprobs},
            {"advantages", nullptr},
            {"duplicate", r.duplicate},
            {"truncated", r.termination == Termination::Truncated}};
  if (adv) j["advantages"] = adv->per_token.at(r.id);
  return j;
}

// ---------------------------------------------------------------------------
// Schemas
// ---------------------------------------------------------------------------

enum class FieldType { Integer, Number, String, Boolean, IntArray, NumberArray, StringArray, Object };

struct FieldSchema {
  std::string name;
  FieldType type;
  bool nullable = false;
};

using RecordSchema = std::vector<FieldSchema>;

namespace detail {

inline bool array_of(const nlohmann::json& v, bool (nlohmann::json::*pred)() const noexcept) {
  if (!v.is_array()) return false;
  for (const auto& e : v)
    if (!(e.*pred)()) return false;
  return true;
}

inline bool has_type(const nlohmann::json& v, FieldType t) {
  switch (t) {
    case FieldType::Integer: return v.is_number_integer();
    case FieldType::Number: return v.is_number();
    case FieldType::String: return v.is_string();
    case FieldType::Boolean: return v.is_boolean();
    case FieldType::IntArray: return array_of(v, &nlohmann::json::is_number_integer);
    case FieldType::NumberArray: return array_of(v, &nlohmann::json::is_number);
    case FieldType::StringArray: return array_of(v, &nlohmann::json::is_string);
    case FieldType::Object: return v.is_object();
  }
  return false;
}

}  // namespace detail

// Empty result means valid. Extra keys are errors too, so a renamed field is caught.
inline std::vector<std::string> validate_record(const nlohmann::json& record, const RecordSchema& schema) {
  std::vector<std::string> errors;
  if (!record.is_object()) return {"record is not an object"};
  for (const auto& f : schema) {
    auto it = record.find(f.name);
    if (it == record.end()) {
      errors.push_back("missing field '" + f.name + "'");
    } else if (it->is_null()) {
      if (!f.nullable) errors.push_back("field '" + f.name + "' is null");
    } else if (!detail::has_type(*it, f.type)) {
      errors.push_back("field '" + f.name + "' has the wrong type");
    }
  }
  for (const auto& [key, _] : record.items()) {
    bool known = false;
    for (const auto& f : schema) known = known || f.name == key;
    if (!known) errors.push_back("unexpected field '" + key + "'");
  }
  return errors;
}

inline const RecordSchema& rollout_schema() {
  using enum FieldType;
  static const RecordSchema s = {
      {"question_id", Integer},          {"response_id", Integer},       {"parent_response_id", Integer, true},
      {"branch_position", Integer, true}, {"origin", String},             {"tokens", StringArray},
      {"reward", Integer, true},          {"boundaries", IntArray},       {"entropy", NumberArray},
      {"semantic_divergence", NumberArray}, {"semantic_entropy", NumberArray}, {"logprobs", NumberArray},
      {"advantages", NumberArray, true},  {"duplicate", Boolean},         {"truncated", Boolean}};
  return s;
}

inline const RecordSchema& metrics_schema() {
  using enum FieldType;
  static const RecordSchema s = {{"step", Integer},
                                 {"mean_reward", Number, true},
                                 {"rollout_mean_length", Number, true},
                                 {"mean_pairwise_similarity", Number, true},
                                 {"loss", Number, true},
                                 {"kl", Number, true},
                                 {"clip_fraction", Number, true},
                                 {"groups_rolled", Integer},
                                 {"groups_kept", Integer},
                                 {"skipped", Boolean},
                                 {"pass_at_k", Number, true},
                                 {"eval_accuracy", Number, true},
                                 {"eval_mean_length", Number, true},
                                 {"eval_mean_correct_length", Number, true},
                                 {"warning", String, true}};
  return s;
}

inline const RecordSchema& problem_schema() {
  using enum FieldType;
  static const RecordSchema s = {
      {"question_tokens", StringArray}, {"answer_tokens", StringArray}, {"difficulty", String}, {"seed", Integer}};
  return s;
}

inline const RecordSchema& eval_schema() {
  using enum FieldType;
  static const RecordSchema s = {{"pass_at_k", Number},    {"k", Integer},        {"accuracy", Number},
                                 {"mean_length", Number},  {"problems", Integer}, {"mean_correct_length", Number, true}};
  return s;
}

inline const RecordSchema& ablation_schema() {
  using enum FieldType;
  static const RecordSchema s = {{"grid", String},
                                 {"setting", String},
                                 {"seed", Integer},
                                 {"initial_pass_at_k", Number},
                                 {"pass_at_k", Number},
                                 {"eval_accuracy", Number},
                                 {"eval_mean_length", Number},
                                 {"eval_mean_correct_length", Number, true},
                                 {"mean_pairwise_similarity", Number, true}};
  return s;
}

}  // namespace rose
