#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "rose/rollout.hpp"

namespace rose {

// Mean reward over a node's traversal set, kept as an exact count pair.
struct NodeValue {
  std::size_t successes = 0;
  std::size_t visits = 0;

  double value() const { return static_cast<double>(successes) / static_cast<double>(visits); }
};

struct AdvantageMap {
  std::vector<std::vector<double>> per_token;  // indexed by response id
  std::vector<bool> calibrated;
  std::vector<std::optional<std::size_t>> divergence_pivot;  // b_c for calibrated responses

  std::size_t size() const noexcept { return per_token.size(); }
};

inline std::vector<NodeValue> node_values(const RolloutTree& tree) {
  std::vector<NodeValue> out(tree.nodes().size());
  for (const TreeNode& n : tree.nodes()) {
    if (n.omega.empty()) throw std::logic_error("node_values: empty traversal set");
    NodeValue v{0, n.omega.size()};
    for (std::size_t id : n.omega) {
      const auto& r = tree.response(id).reward;
      if (!r) throw std::logic_error("node_values: response without reward");
      v.successes += static_cast<std::size_t>(*r);
    }
    out[n.id] = v;
  }
  return out;
}

// Stores V-hat on the tree nodes.
inline void assign_node_values(RolloutTree& tree, const std::vector<NodeValue>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) tree.set_node_value(i, values[i].value());
}

// Token t of segment (b_{j-1}, b_j] (1-based) gets V(b_j) - V(b_{j-1}).
inline AdvantageMap segment_advantages(const RolloutTree& tree, const std::vector<NodeValue>& values) {
  if (values.size() != tree.nodes().size()) throw std::invalid_argument("segment_advantages: value count mismatch");
  AdvantageMap out;
  out.per_token.resize(tree.size());
  out.calibrated.assign(tree.size(), false);
  out.divergence_pivot.assign(tree.size(), std::nullopt);
  for (const Response& r : tree.responses()) {
    auto& adv = out.per_token[r.id];
    adv.resize(r.length());
    const auto path = tree.path(r.id);
    for (std::size_t j = 1; j < path.size(); ++j) {
      const double a = values[path[j]].value() - values[path[j - 1]].value();
      for (std::size_t t = tree.nodes()[path[j - 1]].prefix_len; t < tree.nodes()[path[j]].prefix_len; ++t) adv[t] = a;
    }
  }
  return out;
}

// Shortest correct response; ties go to the smallest id.
inline std::optional<std::size_t> shortest_correct(const RolloutTree& tree) {
  std::optional<std::size_t> best;
  for (const Response& r : tree.responses()) {
    if (!r.reward) throw std::logic_error("length_calibration: response without reward");
    if (*r.reward == 1 && (!best || r.length() < tree.response(*best).length())) best = r.id;
  }
  return best;
}

// For every correct response o_c other than the shortest correct o_s, with
// b_c the prefix length of the deepest node shared with o_s, tokens past b_c get
// A <- A - |A| (1 - ((|o_s| - b_c) / (|o_c| - b_c))^alpha).
inline AdvantageMap length_calibration(const RolloutTree& tree, AdvantageMap adv, double alpha) {
  if (!(alpha >= 0.0)) throw std::invalid_argument("length_calibration: alpha must be >= 0");
  if (adv.size() != tree.size()) throw std::invalid_argument("length_calibration: advantage map size mismatch");
  const auto shortest = shortest_correct(tree);
  if (!shortest) return adv;
  const Response& os = tree.response(*shortest);
  for (const Response& oc : tree.responses()) {
    if (oc.id == os.id || *oc.reward != 1 || oc.length() == os.length()) continue;
    const std::size_t bc = tree.nodes()[tree.deepest_shared_node(os.id, oc.id)].prefix_len;
    if (oc.length() <= bc || os.length() < bc) continue;
    const double ratio = static_cast<double>(os.length() - bc) / static_cast<double>(oc.length() - bc);
    const double shrink = 1.0 - std::pow(ratio, alpha);
    auto& a = adv.per_token[oc.id];
    for (std::size_t t = bc; t < a.size(); ++t) a[t] -= std::abs(a[t]) * shrink;
    adv.calibrated[oc.id] = true;
    adv.divergence_pivot[oc.id] = bc;
  }
  return adv;
}

enum class AdvantageMode { Tree, GroupMean };

inline std::string_view to_string(AdvantageMode m) { return m == AdvantageMode::Tree ? "tree" : "group_mean"; }

inline std::optional<AdvantageMode> parse_advantage_mode(std::string_view s) {
  if (s == "tree") return AdvantageMode::Tree;
  if (s == "group_mean") return AdvantageMode::GroupMean;
  return std::nullopt;
}

// Response-level r - mean(r) on every token, ignoring the tree.
inline AdvantageMap group_mean_advantages(const RolloutTree& tree) {
  double sum = 0.0;
  for (const Response& r : tree.responses()) {
    if (!r.reward) throw std::logic_error("group_mean_advantages: response without reward");
    sum += *r.reward;
  }
  const double mean = sum / static_cast<double>(tree.size());
  AdvantageMap out;
  out.calibrated.assign(tree.size(), false);
  out.divergence_pivot.assign(tree.size(), std::nullopt);
  for (const Response& r : tree.responses()) out.per_token.emplace_back(r.length(), *r.reward - mean);
  return out;
}

// node values -> segment advantages -> length calibration.
inline AdvantageMap estimate_advantages(RolloutTree& tree, double alpha, AdvantageMode mode = AdvantageMode::Tree) {
  const auto values = node_values(tree);
  assign_node_values(tree, values);
  if (mode == AdvantageMode::GroupMean) return group_mean_advantages(tree);
  return length_calibration(tree, segment_advantages(tree, values), alpha);
}

}  // namespace rose
