#pragma once

// Undirected attributed graphs, edit overlays and the GCN propagation operator.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <queue>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace cfx {

using NodeId = std::size_t;
using WordId = std::size_t;
using ClassId = std::size_t;

using DenseMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Sorted indices of the words present in one node's binary feature row.
using FeatureRow = std::vector<WordId>;

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unordered node pair, stored with u < v.
struct Edge {
  NodeId u = 0;
  NodeId v = 0;

  Edge() = default;
  Edge(NodeId a, NodeId b) : u(std::min(a, b)), v(std::max(a, b)) {}

  friend auto operator<=>(const Edge&, const Edge&) = default;
};

class Graph {
 public:
  Graph() = default;

  /// Validates every invariant; duplicate edges are merged, self-loops rejected.
  Graph(std::size_t node_count, std::vector<Edge> edges, std::vector<FeatureRow> features,
        std::size_t feature_dim, std::vector<ClassId> labels, std::vector<std::string> vocabulary,
        std::vector<std::string> class_names)
      : node_count_(node_count),
        feature_dim_(feature_dim),
        edges_(std::move(edges)),
        features_(std::move(features)),
        labels_(std::move(labels)),
        vocabulary_(std::move(vocabulary)),
        class_names_(std::move(class_names)) {
    for (const auto& e : edges_) {
      if (e.u == e.v) throw GraphError("self-loop on node " + std::to_string(e.u));
      if (e.v >= node_count_) throw GraphError("edge endpoint out of range: " + std::to_string(e.v));
    }
    std::sort(edges_.begin(), edges_.end());
    edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());

    if (features_.size() != node_count_) throw GraphError("feature row count != node count");
    for (auto& row : features_) {
      std::sort(row.begin(), row.end());
      row.erase(std::unique(row.begin(), row.end()), row.end());
      if (!row.empty() && row.back() >= feature_dim_) throw GraphError("feature index out of range");
    }
    if (labels_.size() != node_count_) throw GraphError("label count != node count");
    for (auto c : labels_) {
      if (c >= class_names_.size()) throw GraphError("label out of range: " + std::to_string(c));
    }
    if (vocabulary_.size() != feature_dim_) throw GraphError("vocabulary size != feature_dim");
    if (std::set<std::string>(vocabulary_.begin(), vocabulary_.end()).size() != vocabulary_.size())
      throw GraphError("duplicate vocabulary words");
    if (std::set<std::string>(class_names_.begin(), class_names_.end()).size() != class_names_.size())
      throw GraphError("duplicate class names");

    adjacency_.assign(node_count_, {});
    for (const auto& e : edges_) {
      adjacency_[e.u].push_back(e.v);
      adjacency_[e.v].push_back(e.u);
    }
    for (auto& list : adjacency_) std::sort(list.begin(), list.end());
  }

  std::size_t node_count() const { return node_count_; }
  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t class_count() const { return class_names_.size(); }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<FeatureRow>& features() const { return features_; }
  const FeatureRow& feature_row(NodeId v) const { return features_.at(v); }
  const std::vector<ClassId>& labels() const { return labels_; }
  const std::vector<std::string>& vocabulary() const { return vocabulary_; }
  const std::vector<std::string>& class_names() const { return class_names_; }

  /// Sorted neighbor list of v in the unedited graph.
  const std::vector<NodeId>& adjacent(NodeId v) const { return adjacency_.at(v); }

  bool has_edge(Edge e) const { return std::binary_search(edges_.begin(), edges_.end(), e); }

  friend bool operator==(const Graph& a, const Graph& b) {
    return a.node_count_ == b.node_count_ && a.feature_dim_ == b.feature_dim_ && a.edges_ == b.edges_ &&
           a.features_ == b.features_ && a.labels_ == b.labels_ && a.vocabulary_ == b.vocabulary_ &&
           a.class_names_ == b.class_names_;
  }

 private:
  std::size_t node_count_ = 0;
  std::size_t feature_dim_ = 0;
  std::vector<Edge> edges_;
  std::vector<FeatureRow> features_;
  std::vector<ClassId> labels_;
  std::vector<std::string> vocabulary_;
  std::vector<std::string> class_names_;
  std::vector<std::vector<NodeId>> adjacency_;
};

/// A graph seen through a set of edge deletions and per-node feature overrides.
/// Holds a non-owning reference; the base graph must outlive the view.
class GraphView {
 public:
  GraphView(const Graph& base) : base_(&base) {}  // NOLINT(google-explicit-constructor)

  GraphView(const Graph& base, std::set<Edge> deleted_edges, std::map<NodeId, FeatureRow> overrides = {})
      : base_(&base), deleted_(std::move(deleted_edges)), overrides_(std::move(overrides)) {
    for (const auto& e : deleted_) {
      if (!base.has_edge(e)) {
        throw GraphError("deleted edge (" + std::to_string(e.u) + "," + std::to_string(e.v) +
                         ") is not in the base graph");
      }
    }
    for (auto& [v, row] : overrides_) {
      if (v >= base.node_count()) throw GraphError("feature override for unknown node " + std::to_string(v));
      std::sort(row.begin(), row.end());
      row.erase(std::unique(row.begin(), row.end()), row.end());
      if (!row.empty() && row.back() >= base.feature_dim()) throw GraphError("override index out of range");
    }
  }

  const Graph& base() const { return *base_; }
  const std::set<Edge>& deleted_edges() const { return deleted_; }
  const std::map<NodeId, FeatureRow>& feature_overrides() const { return overrides_; }

  std::size_t node_count() const { return base_->node_count(); }
  std::size_t feature_dim() const { return base_->feature_dim(); }

  bool is_deleted(Edge e) const { return deleted_.contains(e); }

  const FeatureRow& feature_row(NodeId v) const {
    if (auto it = overrides_.find(v); it != overrides_.end()) return it->second;
    return base_->feature_row(v);
  }

  /// Surviving edges, sorted.
  std::vector<Edge> edges() const {
    std::vector<Edge> out;
    out.reserve(base_->edges().size());
    for (const auto& e : base_->edges()) {
      if (!deleted_.contains(e)) out.push_back(e);
    }
    return out;
  }

 private:
  const Graph* base_;
  std::set<Edge> deleted_;
  std::map<NodeId, FeatureRow> overrides_;
};

inline void check_node(const GraphView& g, NodeId v) {
  if (v >= g.node_count()) {
    throw GraphError("node id " + std::to_string(v) + " out of range (node_count=" +
                     std::to_string(g.node_count()) + ")");
  }
}

/// Sorted neighbors of v after the view's deletions.
inline std::vector<NodeId> neighbors(const GraphView& g, NodeId v) {
  check_node(g, v);
  std::vector<NodeId> out;
  for (NodeId u : g.base().adjacent(v)) {
    if (!g.is_deleted(Edge(u, v))) out.push_back(u);
  }
  return out;
}

/// D̃^{-1/2}(A + I)D̃^{-1/2} from a weighted symmetric edge list. `extra_degree[i]` is added to
/// node i's degree; it accounts for edges that leave an extracted subgraph so that entries match
/// the enclosing graph's operator.
inline DenseMatrix normalized_adjacency(std::size_t n, const std::vector<Edge>& edges,
                                        const std::vector<double>& weights,
                                        const std::vector<double>& extra_degree = {}) {
  if (n == 0) throw GraphError("normalized_adjacency needs at least one node");
  DenseMatrix a = DenseMatrix::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t k = 0; k < edges.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(edges[k].u);
    const auto j = static_cast<Eigen::Index>(edges[k].v);
    a(i, j) += weights[k];
    a(j, i) += weights[k];
  }
  Vector deg = a.rowwise().sum();
  if (!extra_degree.empty()) {
    for (std::size_t i = 0; i < n; ++i) deg(static_cast<Eigen::Index>(i)) += extra_degree[i];
  }
  const Vector inv_sqrt = deg.array().rsqrt();
  return inv_sqrt.asDiagonal() * a * inv_sqrt.asDiagonal();
}

inline DenseMatrix normalized_adjacency(const GraphView& g) {
  const auto edges = g.edges();
  return normalized_adjacency(g.node_count(), edges, std::vector<double>(edges.size(), 1.0));
}

/// Sparse version of the same operator, for whole-dataset training and inference.
inline SparseMatrix normalized_adjacency_sparse(const GraphView& g) {
  const std::size_t n = g.node_count();
  if (n == 0) throw GraphError("normalized_adjacency needs at least one node");
  std::vector<double> deg(n, 1.0);
  const auto edges = g.edges();
  for (const auto& e : edges) {
    deg[e.u] += 1.0;
    deg[e.v] += 1.0;
  }
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(n + 2 * edges.size());
  for (std::size_t i = 0; i < n; ++i) {
    trip.emplace_back(static_cast<int>(i), static_cast<int>(i), 1.0 / deg[i]);
  }
  for (const auto& e : edges) {
    const double w = 1.0 / std::sqrt(deg[e.u] * deg[e.v]);
    trip.emplace_back(static_cast<int>(e.u), static_cast<int>(e.v), w);
    trip.emplace_back(static_cast<int>(e.v), static_cast<int>(e.u), w);
  }
  SparseMatrix m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  m.setFromTriplets(trip.begin(), trip.end());
  return m;
}

/// Chain rule through normalized_adjacency: given dL/dÂ, returns dL/dw for each edge weight.
inline std::vector<double> normalized_adjacency_backward(std::size_t n, const std::vector<Edge>& edges,
                                                         const std::vector<double>& weights,
                                                         const std::vector<double>& extra_degree,
                                                         const DenseMatrix& a_hat, const DenseMatrix& grad_a_hat) {
  Vector deg = Vector::Ones(static_cast<Eigen::Index>(n));
  for (std::size_t k = 0; k < edges.size(); ++k) {
    deg(static_cast<Eigen::Index>(edges[k].u)) += weights[k];
    deg(static_cast<Eigen::Index>(edges[k].v)) += weights[k];
  }
  if (!extra_degree.empty()) {
    for (std::size_t i = 0; i < n; ++i) deg(static_cast<Eigen::Index>(i)) += extra_degree[i];
  }
  // Â_kl = Ã_kl (d_k d_l)^{-1/2}; d_i enters row i and column i.
  const DenseMatrix weighted = grad_a_hat.cwiseProduct(a_hat);
  const Vector grad_deg =
      -0.5 * (weighted.rowwise().sum() + weighted.colwise().sum().transpose()).cwiseQuotient(deg);
  const Vector inv_sqrt = deg.array().rsqrt();

  std::vector<double> out(edges.size());
  for (std::size_t k = 0; k < edges.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(edges[k].u);
    const auto j = static_cast<Eigen::Index>(edges[k].v);
    const double scale = inv_sqrt(i) * inv_sqrt(j);
    // Ã_ij and Ã_ji share the weight; each raises both d_i and d_j.
    out[k] = (grad_a_hat(i, j) + grad_a_hat(j, i)) * scale + grad_deg(i) + grad_deg(j);
  }
  return out;
}

/// Induced subgraph on the nodes within `k` hops of a center, renumbered in ascending global order.
struct Subgraph {
  Graph graph;
  std::vector<NodeId> to_global;
  NodeId center = 0;
  /// Per local node, the number of its base-graph edges that leave the subgraph.
  std::vector<double> external_degree;

  NodeId global(NodeId local) const { return to_global.at(local); }
  NodeId local(NodeId global_id) const {
    auto it = std::lower_bound(to_global.begin(), to_global.end(), global_id);
    if (it == to_global.end() || *it != global_id) {
      throw GraphError("node " + std::to_string(global_id) + " is not in the subgraph");
    }
    return static_cast<NodeId>(it - to_global.begin());
  }
};

inline Subgraph khop_subgraph(const GraphView& g, NodeId v, std::size_t k) {
  check_node(g, v);
  if (k == 0) throw GraphError("khop_subgraph needs k >= 1");
  const std::size_t n = g.node_count();
  std::vector<std::size_t> depth(n, static_cast<std::size_t>(-1));
  std::queue<NodeId> frontier;
  depth[v] = 0;
  frontier.push(v);
  while (!frontier.empty()) {
    const NodeId u = frontier.front();
    frontier.pop();
    if (depth[u] == k) continue;
    for (NodeId w : neighbors(g, u)) {
      if (depth[w] == static_cast<std::size_t>(-1)) {
        depth[w] = depth[u] + 1;
        frontier.push(w);
      }
    }
  }

  Subgraph sub;
  std::vector<std::size_t> local(n, static_cast<std::size_t>(-1));
  for (NodeId u = 0; u < n; ++u) {
    if (depth[u] != static_cast<std::size_t>(-1)) {
      local[u] = sub.to_global.size();
      sub.to_global.push_back(u);
    }
  }
  const std::size_t m = sub.to_global.size();
  std::vector<Edge> edges;
  std::vector<FeatureRow> features(m);
  std::vector<ClassId> labels(m);
  sub.external_degree.assign(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const NodeId u = sub.to_global[i];
    features[i] = g.feature_row(u);
    labels[i] = g.base().labels()[u];
    for (NodeId w : neighbors(g, u)) {
      if (local[w] == static_cast<std::size_t>(-1)) {
        sub.external_degree[i] += 1.0;
      } else if (u < w) {
        edges.emplace_back(i, local[w]);
      }
    }
  }
  sub.center = local[v];
  sub.graph = Graph(m, std::move(edges), std::move(features), g.feature_dim(), std::move(labels),
                    g.base().vocabulary(), g.base().class_names());
  return sub;
}

/// Dense binary feature matrix of a view (overrides applied).
inline DenseMatrix dense_features(const GraphView& g) {
  DenseMatrix x = DenseMatrix::Zero(static_cast<Eigen::Index>(g.node_count()),
                                    static_cast<Eigen::Index>(g.feature_dim()));
  for (NodeId v = 0; v < g.node_count(); ++v) {
    for (WordId w : g.feature_row(v)) x(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(w)) = 1.0;
  }
  return x;
}

inline SparseMatrix sparse_features(const GraphView& g) {
  std::vector<Eigen::Triplet<double>> trip;
  for (NodeId v = 0; v < g.node_count(); ++v) {
    for (WordId w : g.feature_row(v)) trip.emplace_back(static_cast<int>(v), static_cast<int>(w), 1.0);
  }
  SparseMatrix x(static_cast<Eigen::Index>(g.node_count()), static_cast<Eigen::Index>(g.feature_dim()));
  x.setFromTriplets(trip.begin(), trip.end());
  return x;
}

}  // namespace cfx
