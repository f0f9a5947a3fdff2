#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rose/metrics.hpp"
#include "rose/policy.hpp"
#include "rose/random.hpp"

namespace rose {

enum class BranchMetric { SemanticEntropy, GenerationEntropy, SemanticDivergence, Random };

inline std::string_view to_string(BranchMetric m) {
  switch (m) {
    case BranchMetric::SemanticEntropy: return "semantic_entropy";
    case BranchMetric::GenerationEntropy: return "generation_entropy";
    case BranchMetric::SemanticDivergence: return "semantic_divergence";
    case BranchMetric::Random: return "random";
  }
  return "unknown";
}

inline std::optional<BranchMetric> parse_branch_metric(std::string_view s) {
  for (auto m : {BranchMetric::SemanticEntropy, BranchMetric::GenerationEntropy,
                 BranchMetric::SemanticDivergence, BranchMetric::Random})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

struct RolloutConfig {
  std::size_t group_size = 8;
  double epsilon = 0.5;
  std::size_t max_len = 16;
  MetricConfig metrics;
  double temperature = 1.0;
  double top_p = 1.0;
  std::size_t dedupe_budget = 4;
  BranchMetric metric = BranchMetric::SemanticEntropy;

  void validate() const {
    if (group_size < 1) throw std::invalid_argument("rollout: group_size must be >= 1");
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("rollout: epsilon must be in [0, 1]");
    if (max_len < 1) throw std::invalid_argument("rollout: max_len must be >= 1");
    if (metrics.top_k < 1) throw std::invalid_argument("rollout: semantic top-k must be >= 1");
    if (!(temperature >= 0.0)) throw std::invalid_argument("rollout: temperature must be >= 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("rollout: top_p must be in (0, 1]");
  }
};

enum class Termination { Eos, Truncated };

// How a response entered its group.
enum class Origin { First, Restart, ForcedRestart, Branch };

inline std::string_view to_string(Origin o) {
  switch (o) {
    case Origin::First: return "first";
    case Origin::Restart: return "restart";
    case Origin::ForcedRestart: return "forced_restart";
    case Origin::Branch: return "branch";
  }
  return "unknown";
}

struct Response {
  std::size_t id = 0;
  TokenSeq tokens;
  std::vector<double> logprobs;  // under the sampling policy, one per token
  std::vector<PositionMetrics> metrics;
  Termination termination = Termination::Eos;
  std::optional<int> reward;
  std::vector<std::size_t> boundaries;  // prefix lengths of the nodes on the response's path
  Origin origin = Origin::First;
  std::optional<std::size_t> parent_id;
  std::optional<std::size_t> branch_position;  // pivot prefix length when origin == Branch
  bool duplicate = false;

  std::size_t length() const noexcept { return tokens.size(); }
};

// Position p of response r: regenerating from it keeps tokens [0, p) and
// resamples token p onward, so the pivot node sits at prefix length p.
struct BranchPoint {
  std::size_t response = 0;
  std::size_t position = 0;
  auto operator<=>(const BranchPoint&) const = default;
};

using UsedPositions = std::set<BranchPoint>;

struct TreeNode {
  std::size_t id = 0;
  std::optional<std::size_t> parent;
  std::size_t prefix_len = 0;
  std::vector<std::size_t> children;
  std::vector<std::size_t> omega;  // ids of responses whose path passes through this node, ascending
  std::optional<std::size_t> leaf_of;
  double value = std::numeric_limits<double>::quiet_NaN();
};

// Prefix-sharing trie over one question's responses. Node 0 is the root
// (prefix length 0); every response ends in its own leaf.
class RolloutTree {
 public:
  RolloutTree() : RolloutTree(0, {}) {}

  RolloutTree(std::size_t question_id, TokenSeq question)
      : question_id_(question_id), question_(std::move(question)) {
    nodes_.push_back(TreeNode{});
  }

  std::size_t question_id() const noexcept { return question_id_; }
  const TokenSeq& question() const noexcept { return question_; }
  const std::vector<TreeNode>& nodes() const noexcept { return nodes_; }
  const std::vector<Response>& responses() const noexcept { return responses_; }
  const Response& response(std::size_t id) const { return responses_.at(id); }
  const UsedPositions& used_positions() const noexcept { return used_; }
  std::size_t size() const noexcept { return responses_.size(); }
  static constexpr std::size_t root() noexcept { return 0; }

  void mark_used(BranchPoint p) {
    if (!used_.insert(p).second) throw std::logic_error("tree: branch position used twice");
  }

  void set_reward(std::size_t id, int reward) {
    if (reward != 0 && reward != 1) throw std::invalid_argument("tree: reward must be 0 or 1");
    responses_.at(id).reward = reward;
  }

  void set_node_value(std::size_t node, double value) { nodes_.at(node).value = value; }

  std::size_t leaf(std::size_t response) const { return leaves_.at(response); }

  // Node ids from the root to the response's leaf.
  std::vector<std::size_t> path(std::size_t response) const {
    std::vector<std::size_t> out;
    for (std::optional<std::size_t> n = leaf(response); n; n = nodes_[*n].parent) out.push_back(*n);
    std::reverse(out.begin(), out.end());
    return out;
  }

  std::size_t deepest_shared_node(std::size_t a, std::size_t b) const {
    const auto pa = path(a);
    const auto pb = path(b);
    std::size_t shared = root();
    for (std::size_t i = 0; i < std::min(pa.size(), pb.size()) && pa[i] == pb[i]; ++i) shared = pa[i];
    return shared;
  }

  std::size_t add_root_response(Response r) {
    r.parent_id.reset();
    r.branch_position.reset();
    return attach(std::move(r), root());
  }

  std::size_t add_branch_response(Response r, std::size_t parent_response, std::size_t pivot) {
    const Response& parent = responses_.at(parent_response);
    if (pivot >= parent.length()) throw std::logic_error("tree: pivot must lie inside the parent response");
    if (r.length() <= pivot || !std::equal(parent.tokens.begin(), parent.tokens.begin() + static_cast<std::ptrdiff_t>(pivot), r.tokens.begin()))
      throw std::logic_error("tree: branch response does not extend the parent prefix");
    r.parent_id = parent_response;
    r.branch_position = pivot;
    return attach(std::move(r), pivot_node(parent_response, pivot));
  }

  // Throws std::logic_error describing the first violated structural invariant.
  void check_invariants() const {
    auto fail = [](const std::string& what) { throw std::logic_error("tree invariant: " + what); };
    const TreeNode& root_node = nodes_.at(root());
    if (root_node.parent || root_node.prefix_len != 0) fail("root must be parentless at prefix 0");
    if (root_node.omega.size() != responses_.size()) fail("root traversal set must hold every response");

    for (const TreeNode& n : nodes_) {
      if (n.id != 0) {
        if (!n.parent) fail("non-root node without parent");
        const TreeNode& p = nodes_.at(*n.parent);
        if (n.prefix_len <= p.prefix_len) fail("child prefix must exceed parent prefix");
        if (std::find(p.children.begin(), p.children.end(), n.id) == p.children.end()) fail("parent/child link broken");
      }
      if (n.leaf_of) {
        if (!n.children.empty()) fail("leaf with children");
        if (n.omega != std::vector<std::size_t>{*n.leaf_of}) fail("leaf traversal set must be its own response");
        if (n.prefix_len != responses_.at(*n.leaf_of).length()) fail("leaf prefix must equal response length");
      } else if (!n.children.empty()) {
        std::vector<std::size_t> uni;
        for (std::size_t c : n.children) uni.insert(uni.end(), nodes_[c].omega.begin(), nodes_[c].omega.end());
        std::sort(uni.begin(), uni.end());
        if (uni != n.omega) fail("internal traversal set must equal the union of its children");
      } else if (n.id != 0) {
        fail("internal node without children");
      }
      for (std::size_t i : n.omega) {
        const auto& a = responses_.at(n.omega.front()).tokens;
        const auto& b = responses_.at(i).tokens;
        if (a.size() < n.prefix_len || b.size() < n.prefix_len ||
            !std::equal(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(n.prefix_len), b.begin()))
          fail("responses through a node must share its prefix");
      }
    }

    for (const Response& r : responses_) {
      if (r.logprobs.size() != r.length() || r.metrics.size() != r.length())
        fail("per-token annotations must match response length");
      std::vector<std::size_t> expect;
      for (std::size_t n : path(r.id)) expect.push_back(nodes_[n].prefix_len);
      if (r.boundaries != expect) fail("boundaries must follow the root-to-leaf path");
      if (r.boundaries.front() != 0 || r.boundaries.back() != r.length()) fail("boundaries must span the response");
      if (std::adjacent_find(r.boundaries.begin(), r.boundaries.end(), std::greater_equal<>{}) != r.boundaries.end())
        fail("boundaries must be strictly increasing");
    }
  }

 private:
  // Node at prefix length `prefix` on the response's path, splitting an edge if needed.
  std::size_t pivot_node(std::size_t response, std::size_t prefix) {
    const auto p = path(response);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (nodes_[p[i]].prefix_len == prefix) return p[i];
      if (nodes_[p[i]].prefix_len > prefix) {
        const std::size_t upper = p[i - 1];
        const std::size_t lower = p[i];
        TreeNode mid;
        mid.id = nodes_.size();
        mid.parent = upper;
        mid.prefix_len = prefix;
        mid.children = {lower};
        mid.omega = nodes_[lower].omega;
        nodes_.push_back(std::move(mid));
        std::replace(nodes_[upper].children.begin(), nodes_[upper].children.end(), lower, nodes_.back().id);
        nodes_[lower].parent = nodes_.back().id;
        return nodes_.back().id;
      }
    }
    throw std::logic_error("tree: prefix beyond response leaf");
  }

  std::size_t attach(Response r, std::size_t under) {
    r.id = responses_.size();
    if (r.length() <= nodes_[under].prefix_len) throw std::logic_error("tree: empty continuation");
    TreeNode leaf_node;
    leaf_node.id = nodes_.size();
    leaf_node.parent = under;
    leaf_node.prefix_len = r.length();
    leaf_node.omega = {r.id};
    leaf_node.leaf_of = r.id;
    nodes_[under].children.push_back(leaf_node.id);
    for (std::optional<std::size_t> n = under; n; n = nodes_[*n].parent) nodes_[*n].omega.push_back(r.id);
    leaves_.push_back(leaf_node.id);
    nodes_.push_back(std::move(leaf_node));
    responses_.push_back(std::move(r));
    for (Response& resp : responses_) {
      resp.boundaries.clear();
      for (std::size_t n : path(resp.id)) resp.boundaries.push_back(nodes_[n].prefix_len);
    }
    return responses_.back().id;
  }

  std::size_t question_id_ = 0;
  TokenSeq question_;
  std::vector<TreeNode> nodes_;
  std::vector<Response> responses_;
  std::vector<std::size_t> leaves_;
  UsedPositions used_;
};

// ---------------------------------------------------------------------------
// Branch selection
// ---------------------------------------------------------------------------

inline double metric_value(const PositionMetrics& m, BranchMetric metric) {
  switch (metric) {
    case BranchMetric::SemanticEntropy: return m.semantic;
    case BranchMetric::GenerationEntropy: return m.entropy;
    case BranchMetric::SemanticDivergence: return m.divergence;
    case BranchMetric::Random: return 0.0;
  }
  return 0.0;
}

// Argmax of the metric over every unused (response, position); ties go to
// the smaller response id, then the smaller position. The random selector
// draws uniformly over the same candidate set and needs `rng`.
inline std::optional<BranchPoint> select_branch_position(std::span<const Response> responses,
                                                         const UsedPositions& used, BranchMetric metric,
                                                         Rng* rng = nullptr) {
  if (metric == BranchMetric::Random) {
    if (!rng) throw std::invalid_argument("select_branch_position: random selector needs an rng");
    std::vector<BranchPoint> candidates;
    for (const Response& r : responses)
      for (std::size_t p = 0; p < r.metrics.size(); ++p)
        if (!used.contains({r.id, p})) candidates.push_back({r.id, p});
    if (candidates.empty()) return std::nullopt;
    return candidates[uniform_index(*rng, candidates.size())];
  }

  std::optional<BranchPoint> best;
  double best_value = -std::numeric_limits<double>::infinity();
  for (const Response& r : responses) {
    for (std::size_t p = 0; p < r.metrics.size(); ++p) {
      if (used.contains({r.id, p})) continue;
      const double v = metric_value(r.metrics[p], metric);
      if (!best || v > best_value) {
        best = BranchPoint{r.id, p};
        best_value = v;
      }
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

// Annotated prefix copied from an existing response.
struct PrefixView {
  std::span<const TokenId> tokens;
  std::span<const double> logprobs;
  std::span<const PositionMetrics> metrics;

  static PrefixView of(const Response& r, std::size_t len) {
    return {std::span(r.tokens).first(len), std::span(r.logprobs).first(len), std::span(r.metrics).first(len)};
  }
};

// Samples a continuation of `prefix` until EOS or max_len. Prefix annotations
// are copied; new positions are annotated from the same distribution the
// token was drawn from.
template <AutoregressivePolicy P>
Response extend_from(std::span<const TokenId> question, PrefixView prefix, const P& policy,
                     const RolloutConfig& cfg, Rng& rng) {
  if (prefix.logprobs.size() != prefix.tokens.size() || prefix.metrics.size() != prefix.tokens.size())
    throw std::invalid_argument("extend_from: prefix annotations misaligned");
  Response r;
  r.tokens.assign(prefix.tokens.begin(), prefix.tokens.end());
  r.logprobs.assign(prefix.logprobs.begin(), prefix.logprobs.end());
  r.metrics.assign(prefix.metrics.begin(), prefix.metrics.end());

  TokenSeq ctx(question.begin(), question.end());
  ctx.insert(ctx.end(), r.tokens.begin(), r.tokens.end());
  const TokenId eos = policy.vocab().eos();

  if (r.length() >= cfg.max_len) {
    r.termination = Termination::Truncated;
    return r;
  }
  while (true) {
    const TokenDistribution dist = policy.distribution(ctx);
    r.metrics.push_back(position_metrics(dist.probs, policy.embeddings(), cfg.metrics));
    const TokenId t = sample_token(dist, cfg.temperature, cfg.top_p, rng);
    r.logprobs.push_back(policy.logprob(ctx, t));
    r.tokens.push_back(t);
    ctx.push_back(t);
    if (t == eos) {
      r.termination = Termination::Eos;
      break;
    }
    if (r.length() >= cfg.max_len) {
      r.termination = Termination::Truncated;
      break;
    }
  }
  return r;
}

// Unannotated prefix: annotations are recomputed, which matches copying them
// from a parent generated by the same frozen policy.
template <AutoregressivePolicy P>
Response extend_from(std::span<const TokenId> question, std::span<const TokenId> prefix, const P& policy,
                     const RolloutConfig& cfg, Rng& rng) {
  std::vector<double> lps;
  TokenSeq ctx(question.begin(), question.end());
  for (TokenId t : prefix) {
    lps.push_back(policy.logprob(ctx, t));
    ctx.push_back(t);
  }
  const auto metrics = annotate_response(policy, question, prefix, cfg.metrics);
  return extend_from(question, PrefixView{prefix, lps, metrics}, policy, cfg, rng);
}

// Builds one question's group of `group_size` responses. The first response
// starts from scratch; each later one restarts from the root with probability
// epsilon and otherwise regenerates from the highest-metric unused position
// across all responses so far. Whole-response duplicates are resampled up to
// `dedupe_budget` times, then kept and flagged.
template <AutoregressivePolicy P>
RolloutTree rollout_group(std::span<const TokenId> question, std::size_t question_id, const P& policy,
                          const RolloutConfig& cfg, Rng& rng) {
  cfg.validate();
  RolloutTree tree(question_id, TokenSeq(question.begin(), question.end()));

  auto is_duplicate = [&](const Response& r) {
    return std::any_of(tree.responses().begin(), tree.responses().end(),
                       [&](const Response& o) { return o.tokens == r.tokens; });
  };

  for (std::size_t i = 0; i < cfg.group_size; ++i) {
    Origin origin = Origin::First;
    std::optional<BranchPoint> branch;
    if (i > 0) {
      const bool restart = uniform01(rng) < cfg.epsilon;
      if (restart) {
        origin = Origin::Restart;
      } else {
        branch = select_branch_position(tree.responses(), tree.used_positions(), cfg.metric, &rng);
        origin = branch ? Origin::Branch : Origin::ForcedRestart;
      }
    }

    auto generate = [&] {
      if (!branch) return extend_from(question, PrefixView{}, policy, cfg, rng);
      return extend_from(question, PrefixView::of(tree.response(branch->response), branch->position), policy, cfg, rng);
    };

    Response r = generate();
    for (std::size_t attempt = 0; i > 0 && attempt < cfg.dedupe_budget && is_duplicate(r); ++attempt) r = generate();
    r.duplicate = i > 0 && is_duplicate(r);
    r.origin = origin;

    if (branch) {
      tree.mark_used(*branch);
      tree.add_branch_response(std::move(r), branch->response, branch->position);
    } else {
      tree.add_root_response(std::move(r));
    }
  }
  return tree;
}

inline bool rewards_all_equal(const RolloutTree& tree) {
  const auto& rs = tree.responses();
  for (const Response& r : rs)
    if (!r.reward) throw std::logic_error("dynamic_filter: response without reward");
  return std::all_of(rs.begin(), rs.end(), [&](const Response& r) { return *r.reward == *rs.front().reward; });
}

// Drops groups whose responses all received the same reward; order is kept.
inline std::vector<RolloutTree> dynamic_filter(std::vector<RolloutTree> trees) {
  std::vector<RolloutTree> kept;
  kept.reserve(trees.size());
  for (RolloutTree& t : trees)
    if (!rewards_all_equal(t)) kept.push_back(std::move(t));
  return kept;
}

}  // namespace rose
