#pragma once

// Graph-to-text prompts. Nodes are written in the incident style: one line with the node's class
// and connections, one line with its words.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cfx/dataset.hpp"
#include "cfx/explainers.hpp"
#include "cfx/graph.hpp"
#include "cfx/metrics.hpp"

namespace cfx {

/// Bumped whenever any prompt text below changes; recorded in every run log.
inline constexpr const char* kTemplateVersion = "incident-v1";

class PromptError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct PromptBundle {
  std::string system_text;
  std::string user_text;
  NodeId target = 0;
  GroundTruth ground_truth;  // kept next to the prompt, never written into it

  friend bool operator==(const PromptBundle&, const PromptBundle&) = default;
};

namespace detail {

template <class Range>
std::string join(const Range& items, const char* sep) {
  std::ostringstream out;
  bool first = true;
  for (const auto& x : items) {
    if (!first) out << sep;
    out << x;
    first = false;
  }
  return out.str();
}

}  // namespace detail

/// Serializes `nodes` (connections restricted to the same set). `target_class` overrides the
/// class shown for the target, which is how the predicted and flipped classes are conveyed.
inline std::string serialize_incident(const GraphView& view, const std::set<NodeId>& nodes, NodeId target,
                                      std::optional<ClassId> target_class = std::nullopt) {
  if (!nodes.contains(target)) {
    throw PromptError("target " + std::to_string(target) + " is not in the serialized node set");
  }
  const auto& names = view.base().class_names();
  std::ostringstream out;
  for (NodeId v : nodes) {
    check_node(view, v);
    const ClassId c = v == target && target_class ? *target_class : view.base().labels()[v];
    if (c >= names.size()) throw PromptError("class id " + std::to_string(c) + " has no name");

    std::vector<NodeId> adj;
    for (NodeId u : neighbors(view, v)) {
      if (nodes.contains(u)) adj.push_back(u);
    }
    if (v == target) out << "[TARGET] ";
    out << "Node " << v << " (class: " << names[c] << ") is connected to ";
    if (adj.empty()) {
      out << "no other nodes.\n";
    } else {
      out << "nodes " << detail::join(adj, ", ") << ".\n";
    }

    const auto words = words_for_node(view, v);
    out << "Node " << v << (words.empty() ? " has no words.\n" : " has words: " + detail::join(words, ", ") + ".\n");
  }
  return out.str();
}

inline std::string build_system_prompt() {
  return "You are an assistant that explains the decisions of a graph neural network that classifies "
         "the nodes of a citation graph. Each node is a scientific paper, each edge is a citation, and each "
         "node carries a set of words that occur in the paper. The network predicts the topic class of a "
         "node from its own words and from the words and classes of the papers around it.\n"
         "A counterfactual explanation shows a minimal change to the input that makes the network change its "
         "prediction for one target node. In this task the change is either the removal of some citations "
         "(edges) or the removal of some words from a paper. Comparing the original graph with the "
         "counterfactual graph reveals which parts of the input the prediction depends on.\n"
         "You will receive both graphs in text form. Explain the change in plain language for a reader who "
         "does not know machine learning, and then report the requested facts about both graphs exactly as "
         "they appear in the text.\n";
}

/// The seven record fields recomputed from the base graph and the result.
inline GroundTruth make_ground_truth(const Graph& g, const CounterfactualResult& r) {
  const GraphView factual(g);
  const GraphView cf = counterfactual_view(g, r);
  auto ids = [](const std::vector<NodeId>& xs) { return std::set<long long>(xs.begin(), xs.end()); };
  auto words = [](const std::vector<std::string>& xs) { return std::set<std::string>(xs.begin(), xs.end()); };
  const auto& names = g.class_names();
  if (r.factual_class >= names.size() || r.counterfactual_class >= names.size()) {
    throw PromptError("result classes are out of range for the graph");
  }
  GroundTruth t;
  t.target_node = static_cast<long long>(r.target);
  t.factual_class = names[r.factual_class];
  t.counterfactual_class = names[r.counterfactual_class];
  t.factual_neighbors = ids(neighbors(factual, r.target));
  t.counterfactual_neighbors = ids(neighbors(cf, r.target));
  t.factual_features = words(words_for_node(factual, r.target));
  t.counterfactual_features = words(words_for_node(cf, r.target));
  t.class_names = names;
  return t;
}

inline constexpr std::size_t kPromptHops = 2;

inline PromptBundle build_cf_prompt(const Graph& g, const CounterfactualResult& r) {
  check_node(g, r.target);
  const std::size_t size = r.kind == CfKind::structure ? r.deleted_edges.size() : r.removed_words.size();
  const std::size_t other = r.kind == CfKind::structure ? r.removed_words.size() : r.deleted_edges.size();
  if (size == 0 || other != 0 || r.distance != size || r.factual_class == r.counterfactual_class) {
    throw PromptError("counterfactual result for node " + std::to_string(r.target) + " is malformed");
  }
  GraphView cf(g);
  try {
    cf = counterfactual_view(g, r);
  } catch (const GraphError& e) {
    throw PromptError(std::string("counterfactual result does not apply to the graph: ") + e.what());
  }

  const Subgraph sub = khop_subgraph(g, r.target, kPromptHops);
  const std::set<NodeId> nodes(sub.to_global.begin(), sub.to_global.end());
  for (const auto& e : r.deleted_edges) {
    if (!nodes.contains(e.u) || !nodes.contains(e.v)) {
      throw PromptError("deleted edge lies outside the target's 2-hop neighborhood");
    }
  }
  for (const auto& w : r.removed_words) {
    if (!nodes.contains(w.node)) throw PromptError("removed word lies outside the target's 2-hop neighborhood");
  }

  PromptBundle b;
  b.target = r.target;
  b.system_text = build_system_prompt();
  b.ground_truth = make_ground_truth(g, r);

  const std::string change = r.kind == CfKind::structure ? "Some citations (edges) were removed."
                                                         : "Some words were removed from the papers.";
  std::ostringstream u;
  u << "Original graph (2-hop neighborhood of node " << r.target << "):\n"
    << serialize_incident(g, nodes, r.target, r.factual_class) << '\n'
    << "Counterfactual graph. " << change << " The same nodes are shown:\n"
    << serialize_incident(cf, nodes, r.target, r.counterfactual_class) << '\n'
    << "In plain language, explain why the changes between the original graph and the counterfactual graph "
       "make the network change the class of node "
    << r.target << ".\n\n"
    << "After the explanation, output a fenced JSON block (```json ... ```) containing one object with "
       "exactly these keys:\n";
  for (const char* key : kRecordKeys) u << "- " << key << '\n';
  u << "target_node is the id of the [TARGET] node. factual_class and counterfactual_class are its class "
       "names in the original and the counterfactual graph. factual_neighbors and counterfactual_neighbors "
       "are lists of the node ids it is connected to in each graph. factual_features and "
       "counterfactual_features are lists of its words in each graph.\n";
  b.user_text = u.str();
  return b;
}

/// 64-bit FNV-1a, hex encoded. Stable across platforms; used to key prompts in run logs.
inline std::string stable_hash(std::string_view text) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string prompt_hash(const PromptBundle& b) { return stable_hash(b.system_text + '\x1f' + b.user_text); }

}  // namespace cfx
