#pragma once

// Two-layer graph convolutional classifier with hand-written backpropagation.
//
//   Z1 = Â X W1 + b1,  H = relu(Z1),  Z2 = Â H W2 + b2,  P = softmax(Z2)
//
// The same backward pass serves training (weight gradients) and the explainers (gradients with
// respect to Â entries or X entries).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfx/dataset.hpp"
#include "cfx/graph.hpp"
#include "cfx/optim.hpp"

namespace cfx {

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t epochs = 500;
  double learning_rate = 0.001;
  std::size_t hidden_dim = 16;
  double weight_init_scale = 1.0;
  std::uint64_t seed = 0;
};

struct GcnModel {
  DenseMatrix w1;
  Vector b1;
  DenseMatrix w2;
  Vector b2;

  std::size_t feature_dim() const { return static_cast<std::size_t>(w1.rows()); }
  std::size_t hidden_dim() const { return static_cast<std::size_t>(w1.cols()); }
  std::size_t class_count() const { return static_cast<std::size_t>(w2.cols()); }

  static GcnModel zeros(std::size_t feature_dim, std::size_t hidden_dim, std::size_t class_count) {
    const auto d = static_cast<Eigen::Index>(feature_dim);
    const auto h = static_cast<Eigen::Index>(hidden_dim);
    const auto c = static_cast<Eigen::Index>(class_count);
    return {DenseMatrix::Zero(d, h), Vector::Zero(h), DenseMatrix::Zero(h, c), Vector::Zero(c)};
  }

  /// Glorot-uniform weights times `scale`, zero biases.
  static GcnModel initial(std::size_t feature_dim, std::size_t hidden_dim, std::size_t class_count, double scale,
                          std::uint64_t seed) {
    GcnModel m = zeros(feature_dim, hidden_dim, class_count);
    std::mt19937_64 rng(seed);
    auto fill = [&](DenseMatrix& w) {
      const double limit = scale * std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
    };
    fill(m.w1);
    fill(m.w2);
    return m;
  }

  bool all_finite() const {
    return w1.allFinite() && b1.allFinite() && w2.allFinite() && b2.allFinite();
  }

  friend bool operator==(const GcnModel& a, const GcnModel& b) {
    auto same = [](const auto& x, const auto& y) {
      return x.rows() == y.rows() && x.cols() == y.cols() &&
             std::equal(x.data(), x.data() + x.size(), y.data());
    };
    return same(a.w1, b.w1) && same(a.b1, b.b1) && same(a.w2, b.w2) && same(a.b2, b.b2);
  }
};

struct TrainHistory {
  std::vector<double> loss;
  std::vector<double> accuracy;
};

/// Intermediate activations kept for the backward pass.
struct ForwardPass {
  DenseMatrix xw;  // X W1
  DenseMatrix z1;  // Â X W1 + b1
  DenseMatrix h;   // relu(z1)
  DenseMatrix hw;  // H W2
  DenseMatrix z2;  // logits
  DenseMatrix probs;
};

inline DenseMatrix softmax_rows(const DenseMatrix& logits) {
  DenseMatrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - mx).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

template <class Adj, class Feat>
ForwardPass forward_pass(const GcnModel& model, const Adj& a_hat, const Feat& x) {
  if (a_hat.rows() != a_hat.cols()) throw ModelError("adjacency operator must be square");
  if (x.rows() != a_hat.rows()) throw ModelError("feature rows != adjacency size");
  if (static_cast<std::size_t>(x.cols()) != model.feature_dim()) {
    throw ModelError("feature_dim mismatch: input has " + std::to_string(x.cols()) + ", model expects " +
                     std::to_string(model.feature_dim()));
  }
  ForwardPass f;
  f.xw = x * model.w1;
  f.z1 = a_hat * f.xw;
  f.z1.rowwise() += model.b1.transpose();
  f.h = f.z1.cwiseMax(0.0);
  f.hw = f.h * model.w2;
  f.z2 = a_hat * f.hw;
  f.z2.rowwise() += model.b2.transpose();
  f.probs = softmax_rows(f.z2);
  return f;
}

/// Per-node class probabilities.
template <class Adj, class Feat>
DenseMatrix forward(const GcnModel& model, const Adj& a_hat, const Feat& x) {
  return forward_pass(model, a_hat, x).probs;
}

/// Argmax with ties resolved to the lowest class id.
inline ClassId argmax_lowest(const auto& row) {
  ClassId best = 0;
  for (Eigen::Index c = 1; c < row.size(); ++c) {
    if (row(c) > row(static_cast<Eigen::Index>(best))) best = static_cast<ClassId>(c);
  }
  return best;
}

inline void check_compatible(const GcnModel& model, const GraphView& g) {
  if (model.feature_dim() != g.feature_dim() || model.class_count() != g.base().class_count()) {
    throw ModelError("model dims (" + std::to_string(model.feature_dim()) + "," +
                     std::to_string(model.class_count()) + ") do not match graph (" +
                     std::to_string(g.feature_dim()) + "," + std::to_string(g.base().class_count()) + ")");
  }
}

/// Predicted class of every node of the view, on the whole graph.
inline std::vector<ClassId> predict_all(const GcnModel& model, const GraphView& g) {
  check_compatible(model, g);
  const DenseMatrix p = forward(model, normalized_adjacency_sparse(g), sparse_features(g));
  std::vector<ClassId> out(g.node_count());
  for (NodeId v = 0; v < g.node_count(); ++v) out[v] = argmax_lowest(p.row(static_cast<Eigen::Index>(v)));
  return out;
}

inline ClassId predict(const GcnModel& model, const GraphView& g, NodeId v) {
  check_node(g, v);
  check_compatible(model, g);
  const DenseMatrix p = forward(model, normalized_adjacency_sparse(g), sparse_features(g));
  return argmax_lowest(p.row(static_cast<Eigen::Index>(v)));
}

struct GradRequest {
  bool weights = false;
  bool a_hat = false;
  bool features = false;
};

struct Gradients {
  double loss = 0.0;
  DenseMatrix probs;
  // Populated according to the GradRequest; empty otherwise.
  DenseMatrix w1;
  Vector b1;
  DenseMatrix w2;
  Vector b2;
  DenseMatrix a_hat;
  DenseMatrix x;
};

/// Mean cross-entropy over `nodes` against per-node target distributions (one row per entry of
/// `nodes`), and its gradients with respect to the requested inputs.
template <class Adj, class Feat>
Gradients loss_and_grad(const GcnModel& model, const Adj& a_hat, const Feat& x, std::span<const NodeId> nodes,
                        const DenseMatrix& targets, GradRequest want) {
  if (nodes.empty()) throw ModelError("loss_and_grad needs at least one node");
  if (targets.rows() != static_cast<Eigen::Index>(nodes.size()) ||
      static_cast<std::size_t>(targets.cols()) != model.class_count()) {
    throw ModelError("target distribution shape mismatch");
  }
  ForwardPass f = forward_pass(model, a_hat, x);
  const auto n = f.probs.rows();
  const double inv = 1.0 / static_cast<double>(nodes.size());

  Gradients g;
  DenseMatrix dz2 = DenseMatrix::Zero(n, f.probs.cols());
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    const auto v = static_cast<Eigen::Index>(nodes[k]);
    if (v >= n) throw ModelError("loss node out of range");
    const auto t = targets.row(static_cast<Eigen::Index>(k));
    // log-softmax computed from logits for accuracy when probabilities underflow.
    const double mx = f.z2.row(v).maxCoeff();
    const double lse = mx + std::log((f.z2.row(v).array() - mx).exp().sum());
    g.loss -= inv * (t.array() * (f.z2.row(v).array() - lse)).sum();
    dz2.row(v) += inv * (f.probs.row(v) * t.sum() - t);
  }

  // Backward through the second propagation.
  const DenseMatrix dhw = a_hat.transpose() * dz2;
  const DenseMatrix dh = dhw * model.w2.transpose();
  const DenseMatrix dz1 = dh.cwiseProduct((f.z1.array() > 0.0).cast<double>().matrix());
  const DenseMatrix dxw = a_hat.transpose() * dz1;

  if (want.weights) {
    g.w2 = f.h.transpose() * dhw;
    g.b2 = dz2.colwise().sum().transpose();
    g.w1 = x.transpose() * dxw;
    g.b1 = dz1.colwise().sum().transpose();
  }
  if (want.a_hat) {
    g.a_hat = dz2 * f.hw.transpose() + dz1 * f.xw.transpose();
  }
  if (want.features) {
    g.x = dxw * model.w1.transpose();
  }
  g.probs = std::move(f.probs);
  return g;
}

inline DenseMatrix one_hot(std::span<const ClassId> classes, std::size_t class_count) {
  DenseMatrix t = DenseMatrix::Zero(static_cast<Eigen::Index>(classes.size()),
                                    static_cast<Eigen::Index>(class_count));
  for (std::size_t k = 0; k < classes.size(); ++k) {
    t(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(classes[k])) = 1.0;
  }
  return t;
}

inline double accuracy(const std::vector<ClassId>& predicted, const std::vector<ClassId>& labels,
                       const std::vector<bool>& mask) {
  std::size_t hit = 0;
  std::size_t total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!mask[i]) continue;
    ++total;
    hit += predicted[i] == labels[i] ? 1 : 0;
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

/// Full-batch training of a fresh model on the train mask.
inline std::pair<GcnModel, TrainHistory> train(const Graph& g, const SplitMasks& masks, const TrainConfig& cfg,
                                               std::ostream* log = nullptr) {
  if (cfg.hidden_dim == 0) throw ModelError("hidden_dim must be positive");
  if (!(cfg.learning_rate > 0.0)) throw ModelError("learning_rate must be positive");
  GcnModel model = GcnModel::initial(g.feature_dim(), cfg.hidden_dim, g.class_count(), cfg.weight_init_scale, cfg.seed);

  std::vector<NodeId> nodes;
  std::vector<ClassId> classes;
  std::vector<std::size_t> per_class(g.class_count(), 0);
  for (NodeId v = 0; v < g.node_count(); ++v) {
    if (masks.train[v]) {
      nodes.push_back(v);
      classes.push_back(g.labels()[v]);
      ++per_class[g.labels()[v]];
    }
  }
  if (nodes.empty()) throw ModelError("no training nodes");
  if (log) {
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      if (per_class[c] == 0) *log << "warning: class '" << g.class_names()[c] << "' has no training nodes\n";
    }
  }

  const SparseMatrix a_hat = normalized_adjacency_sparse(g);
  const SparseMatrix x = sparse_features(g);
  const DenseMatrix targets = one_hot(classes, g.class_count());

  TrainHistory hist;
  Adam opt(cfg.learning_rate);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Gradients grad = loss_and_grad(model, a_hat, x, nodes, targets, {.weights = true});
    if (!std::isfinite(grad.loss)) {
      throw ModelError("training diverged: loss is not finite at epoch " + std::to_string(epoch));
    }
    std::size_t hit = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      hit += argmax_lowest(grad.probs.row(static_cast<Eigen::Index>(nodes[k]))) == classes[k] ? 1 : 0;
    }
    hist.loss.push_back(grad.loss);
    hist.accuracy.push_back(static_cast<double>(hit) / static_cast<double>(nodes.size()));

    opt.tick();
    opt.step(0, model.w1, grad.w1);
    opt.step(1, model.b1, grad.b1);
    opt.step(2, model.w2, grad.w2);
    opt.step(3, model.b2, grad.b2);
    if (!model.all_finite()) throw ModelError("training diverged: non-finite weights at epoch " + std::to_string(epoch));
  }
  return {std::move(model), std::move(hist)};
}

// ---------------------------------------------------------------------------------------------
// Checkpoints: self-describing JSON; doubles are written with round-trip precision so that
// load(save(m)) == m bitwise.

inline constexpr const char* kCheckpointFormat = "cfx-gcn-checkpoint";

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"hidden_dim", c.hidden_dim},
          {"weight_init_scale", c.weight_init_scale},
          {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.weight_init_scale = j.value("weight_init_scale", c.weight_init_scale);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace detail {
template <class M>
std::vector<double> flatten(const M& m) {
  return std::vector<double>(m.data(), m.data() + m.size());
}
template <class M>
void unflatten(const nlohmann::json& j, M& m, const char* name) {
  const auto values = j.at(name).get<std::vector<double>>();
  if (values.size() != static_cast<std::size_t>(m.size())) {
    throw ModelError(std::string("checkpoint field '") + name + "' has wrong length");
  }
  std::copy(values.begin(), values.end(), m.data());
}
}  // namespace detail

inline nlohmann::json checkpoint_json(const GcnModel& m, const TrainConfig& cfg) {
  return {{"format", kCheckpointFormat},
          {"version", 1},
          {"feature_dim", m.feature_dim()},
          {"hidden_dim", m.hidden_dim()},
          {"class_count", m.class_count()},
          {"train_config", to_json(cfg)},
          {"layout", "row-major"},
          {"w1", detail::flatten(m.w1)},
          {"b1", detail::flatten(m.b1)},
          {"w2", detail::flatten(m.w2)},
          {"b2", detail::flatten(m.b2)}};
}

inline std::pair<GcnModel, TrainConfig> model_from_checkpoint_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != kCheckpointFormat) throw ModelError("not a cfx checkpoint");
  GcnModel m = GcnModel::zeros(j.at("feature_dim").get<std::size_t>(), j.at("hidden_dim").get<std::size_t>(),
                               j.at("class_count").get<std::size_t>());
  detail::unflatten(j, m.w1, "w1");
  detail::unflatten(j, m.b1, "b1");
  detail::unflatten(j, m.w2, "w2");
  detail::unflatten(j, m.b2, "b2");
  if (!m.all_finite()) throw ModelError("checkpoint contains non-finite weights");
  return {std::move(m), train_config_from_json(j.at("train_config"))};
}

inline void save_checkpoint(const std::filesystem::path& path, const GcnModel& m, const TrainConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw ModelError("cannot write checkpoint " + path.string());
  out << checkpoint_json(m, cfg).dump() << '\n';
}

inline std::pair<GcnModel, TrainConfig> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ModelError("cannot open checkpoint " + path.string());
  return model_from_checkpoint_json(nlohmann::json::parse(in));
}

}  // namespace cfx
