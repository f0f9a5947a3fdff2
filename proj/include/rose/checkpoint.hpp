#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rose/policy.hpp"

namespace rose {

inline constexpr const char* kCheckpointFormat = "rose-policy";
inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Self-describing policy snapshot. Rows are written in ascending key order so
// that equal parameters always serialize to equal bytes; doubles are printed
// in shortest round-trip form, which makes load(save(p)) bit-exact.
inline nlohmann::json policy_to_json(const PolicyParams& policy) {
  using nlohmann::json;
  const Vocab& vocab = policy.vocab();
  json out;
  out["format"] = kCheckpointFormat;
  out["version"] = kCheckpointVersion;
  out["vocab"] = {{"symbols", vocab.symbols()},
                  {"bos", vocab.symbol(vocab.bos())},
                  {"eos", vocab.symbol(vocab.eos())},
                  {"sep", vocab.symbol(vocab.sep())}};
  out["context_order"] = policy.context_order();

  const EmbeddingTable& emb = policy.embeddings();
  json rows = json::array();
  for (std::size_t r = 0; r < emb.rows(); ++r) {
    auto row = emb.row(token_at(r));
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  out["embeddings"] = {{"dim", emb.dim()}, {"rows", std::move(rows)}};

  std::vector<ContextKey> keys;
  keys.reserve(policy.row_count());
  for (const auto& [k, _] : policy.table()) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  json logits = json::array();
  for (ContextKey k : keys) {
    std::vector<std::string> ctx;
    for (TokenId t : policy.window(k)) ctx.push_back(vocab.symbol(t));
    auto row = policy.logits(k);
    logits.push_back({{"context", std::move(ctx)}, {"values", std::vector<double>(row.begin(), row.end())}});
  }
  out["logits"] = std::move(logits);
  return out;
}

inline PolicyParams policy_from_json(const nlohmann::json& in) {
  try {
    if (in.at("format").get<std::string>() != kCheckpointFormat)
      throw CheckpointError("checkpoint: unexpected format tag");
    if (in.at("version").get<int>() != kCheckpointVersion)
      throw CheckpointError("checkpoint: unsupported version " + in.at("version").dump());

    const auto& v = in.at("vocab");
    auto vocab = std::make_shared<const Vocab>(v.at("symbols").get<std::vector<std::string>>(),
                                               v.at("bos").get<std::string>(),
                                               v.at("eos").get<std::string>(),
                                               v.at("sep").get<std::string>());

    const auto& e = in.at("embeddings");
    const auto dim = e.at("dim").get<std::size_t>();
    std::vector<double> data;
    std::size_t rows = 0;
    for (const auto& row : e.at("rows")) {
      auto values = row.get<std::vector<double>>();
      if (values.size() != dim) throw CheckpointError("checkpoint: embedding row has wrong dimension");
      data.insert(data.end(), values.begin(), values.end());
      ++rows;
    }
    auto embeddings = std::make_shared<const EmbeddingTable>(rows, dim, std::move(data));

    PolicyParams policy(vocab, embeddings, in.at("context_order").get<std::size_t>());
    for (const auto& entry : in.at("logits")) {
      TokenSeq ctx;
      for (const auto& s : entry.at("context")) ctx.push_back(vocab->require(s.get<std::string>()));
      if (ctx.size() > policy.context_order()) throw CheckpointError("checkpoint: context longer than order");
      auto values = entry.at("values").get<std::vector<double>>();
      if (values.size() != vocab->size()) throw CheckpointError("checkpoint: logit row has wrong width");
      for (double x : values)
        if (!std::isfinite(x)) throw CheckpointError("checkpoint: non-finite logit");
      auto dst = policy.mutable_logits(policy.key_for(ctx));
      std::copy(values.begin(), values.end(), dst.begin());
    }
    return policy;
  } catch (const nlohmann::json::exception& ex) {
    throw CheckpointError(std::string("checkpoint: malformed document: ") + ex.what());
  } catch (const std::invalid_argument& ex) {
    throw CheckpointError(std::string("checkpoint: ") + ex.what());
  }
}

inline void save_checkpoint(const PolicyParams& policy, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("checkpoint: cannot write " + path.string());
  out << policy_to_json(policy).dump() << '\n';
}

inline PolicyParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot read " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& ex) {
    throw CheckpointError(std::string("checkpoint: parse error: ") + ex.what());
  }
  return policy_from_json(doc);
}

}  // namespace rose
