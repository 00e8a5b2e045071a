#pragma once

// Counterfactual generators for node classification.
//
// Structure: a relaxed mask sigmoid(logit) multiplies every existing edge of the target's
// receptive field; the mask can only shrink edges, so every counterfactual is a set of deletions.
// Features: a perturbation matrix starting at all ones multiplies the binary feature entries
// elementwise; every counterfactual is a set of word removals.
//
// Both optimize   L = gate * log p(factual | v) + beta * sum(1 - mask)
// where gate is 1 while the binarized perturbation still predicts the factual class. Every
// optimization step is followed by hard thresholding and a discrete re-prediction; flips found
// there are the candidates, and the smallest one is returned.

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfx/gcn.hpp"
#include "cfx/graph.hpp"
#include "cfx/optim.hpp"

namespace cfx {

enum class CfKind { structure, feature };

inline std::string to_string(CfKind k) { return k == CfKind::structure ? "structure" : "feature"; }

inline CfKind parse_cf_kind(const std::string& s) {
  if (s == "structure") return CfKind::structure;
  if (s == "feature") return CfKind::feature;
  throw std::invalid_argument("unknown counterfactual kind '" + s + "'");
}

enum class FeatureScope { target_only, subgraph };

struct ExplainerParams {
  std::size_t max_iters = 500;
  double mask_learning_rate = 0.1;
  double beta = 0.02;
  double binarize_threshold = 0.5;
  std::size_t khop = 2;
  double mask_init = 3.0;
  FeatureScope feature_scope = FeatureScope::target_only;
};

struct WordRemoval {
  NodeId node = 0;
  WordId word = 0;
  friend auto operator<=>(const WordRemoval&, const WordRemoval&) = default;
};

struct CounterfactualResult {
  NodeId target = 0;
  CfKind kind = CfKind::structure;
  std::vector<Edge> deleted_edges;          // structure kind, sorted
  std::vector<WordRemoval> removed_words;   // feature kind, sorted
  ClassId factual_class = 0;
  ClassId counterfactual_class = 0;
  std::size_t distance = 0;
  std::size_t iterations_used = 0;

  friend bool operator==(const CounterfactualResult&, const CounterfactualResult&) = default;
};

struct NotFound {
  NodeId target = 0;
  CfKind kind = CfKind::structure;
  std::size_t iterations_used = 0;
  std::string reason;

  friend bool operator==(const NotFound&, const NotFound&) = default;
};

using ExplainOutcome = std::variant<CounterfactualResult, NotFound>;

inline bool found(const ExplainOutcome& o) { return std::holds_alternative<CounterfactualResult>(o); }

/// The view that a result describes: base graph minus its deletions/removals.
inline GraphView counterfactual_view(const Graph& g, const CounterfactualResult& r) {
  std::set<Edge> deleted(r.deleted_edges.begin(), r.deleted_edges.end());
  std::map<NodeId, FeatureRow> overrides;
  for (const auto& rw : r.removed_words) {
    check_node(g, rw.node);
    auto [it, inserted] = overrides.try_emplace(rw.node, g.feature_row(rw.node));
    auto& row = it->second;
    auto pos = std::find(row.begin(), row.end(), rw.word);
    if (pos == row.end()) {
      throw GraphError("removed word " + std::to_string(rw.word) + " is not present on node " +
                       std::to_string(rw.node));
    }
    row.erase(pos);
  }
  return GraphView(g, std::move(deleted), std::move(overrides));
}

/// Re-runs the oracle on the full perturbed graph. False on any inconsistency.
inline bool validate_counterfactual(const GcnModel& model, const Graph& g, const CounterfactualResult& r) {
  try {
    if (r.target >= g.node_count()) return false;
    const std::size_t size = r.kind == CfKind::structure ? r.deleted_edges.size() : r.removed_words.size();
    const std::size_t other = r.kind == CfKind::structure ? r.removed_words.size() : r.deleted_edges.size();
    if (size == 0 || other != 0 || r.distance != size) return false;
    if (std::set<Edge>(r.deleted_edges.begin(), r.deleted_edges.end()).size() != r.deleted_edges.size()) return false;
    if (std::set<WordRemoval>(r.removed_words.begin(), r.removed_words.end()).size() != r.removed_words.size()) {
      return false;
    }
    if (predict(model, g, r.target) != r.factual_class) return false;
    const ClassId now = predict(model, counterfactual_view(g, r), r.target);
    return now != r.factual_class && now == r.counterfactual_class;
  } catch (const std::exception&) {
    return false;
  }
}

namespace detail {

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct Candidate {
  std::vector<std::size_t> removed;  // indices into the perturbable slots
  ClassId predicted = 0;
  std::size_t iteration = 0;
};

/// Keeps distinct flip candidates in discovery order.
class CandidateLog {
 public:
  void record(std::vector<std::size_t> removed, ClassId predicted, std::size_t iteration) {
    if (!seen_.insert(removed).second) return;
    best_ = std::min(best_, removed.size());
    candidates_.push_back({std::move(removed), predicted, iteration});
  }
  std::size_t best_distance() const { return best_; }
  /// Smallest first; ties keep discovery order.
  std::vector<Candidate> ranked() const {
    auto out = candidates_;
    std::stable_sort(out.begin(), out.end(),
                     [](const Candidate& a, const Candidate& b) { return a.removed.size() < b.removed.size(); });
    return out;
  }

 private:
  std::set<std::vector<std::size_t>> seen_;
  std::vector<Candidate> candidates_;
  std::size_t best_ = static_cast<std::size_t>(-1);
};

}  // namespace detail

inline ExplainOutcome explain_structure(const GcnModel& model, const Graph& g, NodeId v,
                                        const ExplainerParams& params = {}) {
  check_node(g, v);
  check_compatible(model, g);
  const ClassId factual = predict(model, g, v);
  const Subgraph sub = khop_subgraph(g, v, params.khop);
  const auto& edges = sub.graph.edges();
  if (edges.empty()) return NotFound{v, CfKind::structure, 0, "target has no edges to delete"};

  const std::size_t n = sub.graph.node_count();
  const std::size_t m = edges.size();
  const DenseMatrix x = dense_features(sub.graph);
  const std::vector<NodeId> loss_nodes{sub.center};
  const DenseMatrix target = one_hot(std::vector<ClassId>{factual}, model.class_count());
  const auto center = static_cast<Eigen::Index>(sub.center);

  Vector logits = Vector::Constant(static_cast<Eigen::Index>(m), params.mask_init);
  Adam opt(params.mask_learning_rate);
  detail::CandidateLog log;
  ClassId binarized_prediction = factual;
  std::size_t iters = 0;

  std::vector<double> weights(m);
  std::vector<double> hard(m);
  for (; iters < params.max_iters && log.best_distance() > 1; ++iters) {
    for (std::size_t k = 0; k < m; ++k) weights[k] = detail::sigmoid(logits(static_cast<Eigen::Index>(k)));

    std::vector<double> grad_w(m, -params.beta);
    if (binarized_prediction == factual) {
      const DenseMatrix a_hat = normalized_adjacency(n, edges, weights, sub.external_degree);
      // loss_and_grad gives -log p(factual); the flip term is its negation.
      const Gradients gr = loss_and_grad(model, a_hat, x, loss_nodes, target, {.a_hat = true});
      const DenseMatrix d_a_hat = -gr.a_hat;
      const auto d_w = normalized_adjacency_backward(n, edges, weights, sub.external_degree, a_hat, d_a_hat);
      for (std::size_t k = 0; k < m; ++k) grad_w[k] += d_w[k];
    }
    Vector grad_logits(static_cast<Eigen::Index>(m));
    for (std::size_t k = 0; k < m; ++k) grad_logits(static_cast<Eigen::Index>(k)) = grad_w[k] * weights[k] * (1.0 - weights[k]);
    opt.tick();
    opt.step(0, logits, grad_logits);

    std::vector<std::size_t> removed;
    for (std::size_t k = 0; k < m; ++k) {
      const bool keep = detail::sigmoid(logits(static_cast<Eigen::Index>(k))) >= params.binarize_threshold;
      hard[k] = keep ? 1.0 : 0.0;
      if (!keep) removed.push_back(k);
    }
    const DenseMatrix probs = forward(model, normalized_adjacency(n, edges, hard, sub.external_degree), x);
    binarized_prediction = argmax_lowest(probs.row(center));
    if (binarized_prediction != factual && !removed.empty()) {
      log.record(std::move(removed), binarized_prediction, iters + 1);
    }
  }

  for (const auto& cand : log.ranked()) {
    CounterfactualResult r;
    r.target = v;
    r.kind = CfKind::structure;
    for (std::size_t k : cand.removed) r.deleted_edges.emplace_back(sub.global(edges[k].u), sub.global(edges[k].v));
    std::sort(r.deleted_edges.begin(), r.deleted_edges.end());
    r.factual_class = factual;
    r.counterfactual_class = cand.predicted;
    r.distance = r.deleted_edges.size();
    r.iterations_used = iters;
    if (validate_counterfactual(model, g, r)) return r;
  }
  return NotFound{v, CfKind::structure, iters, "no edge deletion flipped the prediction"};
}

inline ExplainOutcome explain_features(const GcnModel& model, const Graph& g, NodeId v,
                                       const ExplainerParams& params = {}) {
  check_node(g, v);
  check_compatible(model, g);
  const ClassId factual = predict(model, g, v);
  const Subgraph sub = khop_subgraph(g, v, params.khop);
  const std::size_t n = sub.graph.node_count();

  // Perturbable slots: (local node, word) pairs whose factual entry is 1.
  std::vector<std::pair<NodeId, WordId>> slots;
  for (NodeId u = 0; u < n; ++u) {
    if (params.feature_scope == FeatureScope::target_only && u != sub.center) continue;
    for (WordId w : sub.graph.feature_row(u)) slots.emplace_back(u, w);
  }
  if (slots.empty()) return NotFound{v, CfKind::feature, 0, "no words to remove"};

  const auto& edges = sub.graph.edges();
  const DenseMatrix a_hat =
      normalized_adjacency(n, edges, std::vector<double>(edges.size(), 1.0), sub.external_degree);
  const DenseMatrix x0 = dense_features(sub.graph);
  const std::vector<NodeId> loss_nodes{sub.center};
  const DenseMatrix target = one_hot(std::vector<ClassId>{factual}, model.class_count());
  const auto center = static_cast<Eigen::Index>(sub.center);
  const std::size_t s = slots.size();

  Vector scale = Vector::Ones(static_cast<Eigen::Index>(s));
  Adam opt(params.mask_learning_rate);
  detail::CandidateLog log;
  ClassId binarized_prediction = factual;
  std::size_t iters = 0;

  DenseMatrix x = x0;
  for (; iters < params.max_iters && log.best_distance() > 1; ++iters) {
    Vector grad = Vector::Constant(static_cast<Eigen::Index>(s), -params.beta);
    if (binarized_prediction == factual) {
      for (std::size_t k = 0; k < s; ++k) {
        x(static_cast<Eigen::Index>(slots[k].first), static_cast<Eigen::Index>(slots[k].second)) =
            scale(static_cast<Eigen::Index>(k));
      }
      const Gradients gr = loss_and_grad(model, a_hat, x, loss_nodes, target, {.features = true});
      // d(X ⊙ P)/dP = X = 1 on every slot; the flip term negates the cross-entropy gradient.
      for (std::size_t k = 0; k < s; ++k) {
        grad(static_cast<Eigen::Index>(k)) -=
            gr.x(static_cast<Eigen::Index>(slots[k].first), static_cast<Eigen::Index>(slots[k].second));
      }
    }
    opt.tick();
    opt.step(0, scale, grad);
    scale = scale.cwiseMax(0.0).cwiseMin(1.0);

    std::vector<std::size_t> removed;
    for (std::size_t k = 0; k < s; ++k) {
      const bool keep = scale(static_cast<Eigen::Index>(k)) >= params.binarize_threshold;
      x(static_cast<Eigen::Index>(slots[k].first), static_cast<Eigen::Index>(slots[k].second)) = keep ? 1.0 : 0.0;
      if (!keep) removed.push_back(k);
    }
    const DenseMatrix probs = forward(model, a_hat, x);
    binarized_prediction = argmax_lowest(probs.row(center));
    if (binarized_prediction != factual && !removed.empty()) {
      log.record(std::move(removed), binarized_prediction, iters + 1);
    }
  }

  for (const auto& cand : log.ranked()) {
    CounterfactualResult r;
    r.target = v;
    r.kind = CfKind::feature;
    for (std::size_t k : cand.removed) r.removed_words.push_back({sub.global(slots[k].first), slots[k].second});
    std::sort(r.removed_words.begin(), r.removed_words.end());
    r.factual_class = factual;
    r.counterfactual_class = cand.predicted;
    r.distance = r.removed_words.size();
    r.iterations_used = iters;
    if (validate_counterfactual(model, g, r)) return r;
  }
  return NotFound{v, CfKind::feature, iters, "no word removal flipped the prediction"};
}

inline ExplainOutcome explain(const GcnModel& model, const Graph& g, NodeId v, CfKind kind,
                              const ExplainerParams& params = {}) {
  return kind == CfKind::structure ? explain_structure(model, g, v, params) : explain_features(model, g, v, params);
}

struct BruteForceLimits {
  std::size_t max_budget = 2;
  std::size_t max_edges = 20;
  std::size_t max_words = 16;
};

/// Exhaustive minimal counterfactual over all deletions of graph edges (structure) or removals of
/// the target's words (feature), up to `budget` edits. Evaluated on the full graph.
inline ExplainOutcome brute_force_counterfactual(const GcnModel& model, const Graph& g, NodeId v, CfKind kind,
                                                 std::size_t budget, BruteForceLimits limits = {}) {
  check_node(g, v);
  if (budget == 0 || budget > limits.max_budget) {
    throw std::invalid_argument("brute force budget must be in [1," + std::to_string(limits.max_budget) + "]");
  }
  const std::size_t universe = kind == CfKind::structure ? g.edges().size() : g.feature_row(v).size();
  const std::size_t cap = kind == CfKind::structure ? limits.max_edges : limits.max_words;
  if (universe > cap) {
    throw std::invalid_argument("instance too large for brute force: " + std::to_string(universe) + " > " +
                                std::to_string(cap));
  }
  const ClassId factual = predict(model, g, v);

  std::size_t tried = 0;
  auto attempt = [&](const std::vector<std::size_t>& pick) -> std::optional<CounterfactualResult> {
    ++tried;
    CounterfactualResult r;
    r.target = v;
    r.kind = kind;
    r.factual_class = factual;
    for (std::size_t i : pick) {
      if (kind == CfKind::structure) {
        r.deleted_edges.push_back(g.edges()[i]);
      } else {
        r.removed_words.push_back({v, g.feature_row(v)[i]});
      }
    }
    r.distance = pick.size();
    const ClassId now = predict(model, counterfactual_view(g, r), v);
    if (now == factual) return std::nullopt;
    r.counterfactual_class = now;
    return r;
  };

  std::vector<std::size_t> pick;
  for (std::size_t size = 1; size <= budget && size <= universe; ++size) {
    // Lexicographic enumeration of size-`size` index subsets.
    pick.resize(size);
    for (std::size_t i = 0; i < size; ++i) pick[i] = i;
    while (true) {
      if (auto r = attempt(pick)) {
        r->iterations_used = tried;
        return *r;
      }
      std::size_t i = size;
      while (i > 0 && pick[i - 1] == universe - size + i - 1) --i;
      if (i == 0) break;
      ++pick[i - 1];
      for (std::size_t j = i; j < size; ++j) pick[j] = pick[j - 1] + 1;
    }
  }
  return NotFound{v, kind, tried, "no counterfactual within budget"};
}

// ---------------------------------------------------------------------------------------------

inline nlohmann::json to_json(const CounterfactualResult& r) {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : r.deleted_edges) edges.push_back({e.u, e.v});
  nlohmann::json words = nlohmann::json::array();
  for (const auto& w : r.removed_words) words.push_back({w.node, w.word});
  return {{"status", "found"},
          {"target", r.target},
          {"kind", to_string(r.kind)},
          {"deleted_edges", edges},
          {"removed_words", words},
          {"factual_class", r.factual_class},
          {"counterfactual_class", r.counterfactual_class},
          {"distance", r.distance},
          {"iterations_used", r.iterations_used}};
}

inline nlohmann::json to_json(const NotFound& r) {
  return {{"status", "not_found"},
          {"target", r.target},
          {"kind", to_string(r.kind)},
          {"iterations_used", r.iterations_used},
          {"reason", r.reason}};
}

inline nlohmann::json to_json(const ExplainOutcome& o) {
  return std::visit([](const auto& r) { return to_json(r); }, o);
}

inline ExplainOutcome outcome_from_json(const nlohmann::json& j) {
  const auto kind = parse_cf_kind(j.at("kind").get<std::string>());
  if (j.at("status").get<std::string>() == "not_found") {
    return NotFound{j.at("target").get<NodeId>(), kind, j.value("iterations_used", std::size_t{0}),
                    j.value("reason", std::string{})};
  }
  CounterfactualResult r;
  r.target = j.at("target").get<NodeId>();
  r.kind = kind;
  for (const auto& e : j.at("deleted_edges")) r.deleted_edges.emplace_back(e.at(0).get<NodeId>(), e.at(1).get<NodeId>());
  for (const auto& w : j.at("removed_words")) r.removed_words.push_back({w.at(0).get<NodeId>(), w.at(1).get<WordId>()});
  r.factual_class = j.at("factual_class").get<ClassId>();
  r.counterfactual_class = j.at("counterfactual_class").get<ClassId>();
  r.distance = j.at("distance").get<std::size_t>();
  r.iterations_used = j.value("iterations_used", std::size_t{0});
  return r;
}

}  // namespace cfx
