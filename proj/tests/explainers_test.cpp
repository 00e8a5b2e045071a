#include <gtest/gtest.h>

#include <algorithm>

#include "cfx/explainers.hpp"

using namespace cfx;

namespace {

// Barbell(4): clique {0..3} carries word a, except node 3 which carries none; clique {4..7}
// carries b. Hand-set weights make b three times as strong as a, so node 3 is pulled across the
// bridge (3,4) into class 1.
struct BarbellFixture {
  Graph g;
  GcnModel model;
  BarbellFixture() {
    const Graph base = make_synthetic(SyntheticKind::barbell, {.m = 4}, 0);
    g = Graph(8, base.edges(), {{0}, {0}, {0}, {}, {1}, {1}, {1}, {1}}, 2, base.labels(), {"a", "b"},
              {"class_a", "class_b"});
    model = GcnModel::zeros(2, 2, 2);
    model.w1(0, 0) = 1.0;
    model.w1(1, 1) = 3.0;
    model.w2(0, 0) = 4.0;
    model.w2(1, 1) = 4.0;
  }
};

// Two triangles joined by (2,3). Node 0 holds {a, n}; a strongly indicates class 0, n is inert,
// and the only class-1 evidence is word b on the far triangle.
struct WordFixture {
  Graph g{6,
          {{0, 1}, {0, 2}, {1, 2}, {2, 3}, {3, 4}, {3, 5}, {4, 5}},
          {{0, 2}, {}, {}, {1}, {1}, {1}},
          3,
          {0, 0, 0, 1, 1, 1},
          {"a", "b", "n"},
          {"class_a", "class_b"}};
  GcnModel model = [] {
    GcnModel m = GcnModel::zeros(3, 2, 2);
    m.w1(0, 0) = 3.0;
    m.w1(1, 1) = 1.0;
    m.w2(0, 0) = 2.0;
    m.w2(1, 1) = 2.0;
    return m;
  }();
};

struct TrainedInstance {
  Graph g;
  GcnModel model;
};

TrainedInstance trained_two_community(std::uint64_t seed, std::size_t n = 12) {
  Graph g = make_synthetic(SyntheticKind::two_community, {.n = n, .p_in = 0.5, .p_out = 0.1}, seed);
  SplitMasks all{std::vector<bool>(n, true), std::vector<bool>(n, false)};
  TrainConfig cfg;
  cfg.seed = seed;
  GcnModel model = train(g, all, cfg).first;
  return {std::move(g), std::move(model)};
}

bool is_subset(const std::vector<Edge>& deleted, const Graph& g) {
  return std::all_of(deleted.begin(), deleted.end(), [&](const Edge& e) { return g.has_edge(e); });
}

bool words_subset(const std::vector<WordRemoval>& removed, const Graph& g) {
  return std::all_of(removed.begin(), removed.end(), [&](const WordRemoval& r) {
    const auto& row = g.feature_row(r.node);
    return std::binary_search(row.begin(), row.end(), r.word);
  });
}

}  // namespace

TEST(ExplainStructure, BarbellBridgeIsDeleted) {
  const BarbellFixture f;
  const NodeId v = 3;
  const ClassId factual = predict(f.model, f.g, v);
  ASSERT_EQ(factual, 1u);

  // Independent check: enumerate every single-edge deletion.
  std::vector<Edge> flipping;
  for (const auto& e : f.g.edges()) {
    if (predict(f.model, GraphView(f.g, {e}), v) != factual) flipping.push_back(e);
  }
  ASSERT_NE(std::find(flipping.begin(), flipping.end(), Edge(3, 4)), flipping.end());

  const auto out = explain_structure(f.model, f.g, v);
  ASSERT_TRUE(found(out));
  const auto& r = std::get<CounterfactualResult>(out);
  EXPECT_NE(std::find(r.deleted_edges.begin(), r.deleted_edges.end(), Edge(3, 4)), r.deleted_edges.end());
  EXPECT_EQ(r.distance, 1u);
  EXPECT_EQ(r.factual_class, 1u);
  EXPECT_EQ(r.counterfactual_class, 0u);
  EXPECT_NE(predict(f.model, counterfactual_view(f.g, r), v), factual);
  EXPECT_TRUE(validate_counterfactual(f.model, f.g, r));
}

TEST(ExplainStructure, IsolatedTargetNotFound) {
  const Graph g(3, {{0, 1}}, {{0}, {0}, {0}}, 1, {0, 0, 0}, {"a"}, {"x"});
  const auto out = explain_structure(GcnModel::zeros(1, 2, 1), g, 2);
  ASSERT_FALSE(found(out));
  EXPECT_EQ(std::get<NotFound>(out).iterations_used, 0u);
}

TEST(ExplainStructure, ConstantOracleNeverFlips) {
  const BarbellFixture f;
  ExplainerParams params;
  params.max_iters = 60;
  const auto out = explain_structure(GcnModel::zeros(2, 4, 2), f.g, 3, params);
  ASSERT_FALSE(found(out));
  EXPECT_EQ(std::get<NotFound>(out).iterations_used, 60u);
}

TEST(ExplainStructure, OutOfRange) {
  const BarbellFixture f;
  EXPECT_THROW(explain_structure(f.model, f.g, 8), GraphError);
}

TEST(ExplainFeatures, SingleIndicatorWordIsRemoved) {
  const WordFixture f;
  const NodeId v = 0;
  const ClassId factual = predict(f.model, f.g, v);
  ASSERT_EQ(factual, 0u);

  // Brute force over single-word removals on v: exactly one (the word "a") flips.
  std::vector<WordId> flipping;
  for (WordId w : f.g.feature_row(v)) {
    FeatureRow row = f.g.feature_row(v);
    row.erase(std::find(row.begin(), row.end(), w));
    if (predict(f.model, GraphView(f.g, {}, {{v, row}}), v) != factual) flipping.push_back(w);
  }
  ASSERT_EQ(flipping, (std::vector<WordId>{0}));

  const auto out = explain_features(f.model, f.g, v);
  ASSERT_TRUE(found(out));
  const auto& r = std::get<CounterfactualResult>(out);
  EXPECT_EQ(r.removed_words, (std::vector<WordRemoval>{{0, 0}}));
  EXPECT_EQ(r.distance, 1u);
  EXPECT_TRUE(validate_counterfactual(f.model, f.g, r));
}

TEST(ExplainFeatures, WordlessTargetNotFound) {
  const WordFixture f;
  const auto out = explain_features(f.model, f.g, 1);
  ASSERT_FALSE(found(out));
}

TEST(ExplainFeatures, SubgraphScopeMayRemoveNeighborWords) {
  const WordFixture f;
  ExplainerParams params;
  params.feature_scope = FeatureScope::subgraph;
  // Node 2 is class 0 only through node 0's word a.
  const auto out = explain_features(f.model, f.g, 2, params);
  if (found(out)) {
    const auto& r = std::get<CounterfactualResult>(out);
    EXPECT_TRUE(words_subset(r.removed_words, f.g));
    EXPECT_TRUE(validate_counterfactual(f.model, f.g, r));
  }
  const auto target_only = explain_features(f.model, f.g, 2);
  EXPECT_FALSE(found(target_only));
}

TEST(Validate, EmissionContractAndRejections) {
  const BarbellFixture f;
  const auto r = std::get<CounterfactualResult>(explain_structure(f.model, f.g, 3));
  EXPECT_TRUE(validate_counterfactual(f.model, f.g, r));

  CounterfactualResult empty = r;
  empty.deleted_edges.clear();
  empty.distance = 0;
  EXPECT_FALSE(validate_counterfactual(f.model, f.g, empty));

  CounterfactualResult wrong_class = r;
  wrong_class.counterfactual_class = r.factual_class;
  EXPECT_FALSE(validate_counterfactual(f.model, f.g, wrong_class));

  CounterfactualResult foreign_edge = r;
  foreign_edge.deleted_edges = {Edge(0, 7)};
  EXPECT_FALSE(validate_counterfactual(f.model, f.g, foreign_edge));

  CounterfactualResult bad_distance = r;
  bad_distance.distance = 5;
  EXPECT_FALSE(validate_counterfactual(f.model, f.g, bad_distance));

  CounterfactualResult absent_word;
  absent_word.kind = CfKind::feature;
  absent_word.target = 3;
  absent_word.removed_words = {{3, 1}};
  absent_word.distance = 1;
  absent_word.factual_class = 1;
  EXPECT_FALSE(validate_counterfactual(f.model, f.g, absent_word));
}

TEST(BruteForce, AgreesWithDistanceOneExplanations) {
  const BarbellFixture f;
  const auto bf = brute_force_counterfactual(f.model, f.g, 3, CfKind::structure, 2);
  ASSERT_TRUE(found(bf));
  EXPECT_EQ(std::get<CounterfactualResult>(bf).distance, 1u);
  EXPECT_TRUE(validate_counterfactual(f.model, f.g, std::get<CounterfactualResult>(bf)));
}

TEST(BruteForce, EmptyGraphNotFound) {
  const Graph g = make_synthetic(SyntheticKind::random_er, {.n = 4, .p = 0.0}, 0);
  EXPECT_FALSE(found(brute_force_counterfactual(GcnModel::zeros(g.feature_dim(), 2, 2), g, 0, CfKind::structure, 2)));
}

TEST(BruteForce, RefusesLargeInstances) {
  const Graph big = make_synthetic(SyntheticKind::two_community, {.n = 12, .p_in = 1.0, .p_out = 0.0}, 0);
  const GcnModel m = GcnModel::zeros(big.feature_dim(), 2, 2);
  EXPECT_THROW(brute_force_counterfactual(m, big, 0, CfKind::structure, 1), std::invalid_argument);
  const BarbellFixture f;
  EXPECT_THROW(brute_force_counterfactual(f.model, f.g, 3, CfKind::structure, 3), std::invalid_argument);
  EXPECT_THROW(brute_force_counterfactual(f.model, f.g, 3, CfKind::structure, 0), std::invalid_argument);
}

TEST(BruteForce, TwelveNodeGroundTruthIsMinimal) {
  std::size_t checked = 0;
  for (std::uint64_t seed = 1; checked < 10 && seed < 100; ++seed) {
    const auto inst = trained_two_community(seed);
    if (inst.g.edges().size() > 20) continue;
    ++checked;
    const auto bf = brute_force_counterfactual(inst.model, inst.g, 0, CfKind::structure, 2);
    if (!found(bf)) continue;
    const auto& r = std::get<CounterfactualResult>(bf);
    EXPECT_LE(r.distance, 2u);
    EXPECT_TRUE(validate_counterfactual(inst.model, inst.g, r));
    if (r.distance == 2) {
      for (const auto& e : inst.g.edges()) EXPECT_EQ(predict(inst.model, GraphView(inst.g, {e}), 0), r.factual_class);
    }
  }
  EXPECT_EQ(checked, 10u);
}

// Every emitted result is valid, removes only existing edges/words, and is never smaller than the
// exhaustive minimum.
TEST(Invariants, ValiditySparsificationAndMinimalityBound) {
  std::size_t emitted = 0;
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    const auto inst = trained_two_community(seed);
    const auto preds = predict_all(inst.model, inst.g);
    for (NodeId v = 0; v < inst.g.node_count(); v += 3) {
      for (CfKind kind : {CfKind::structure, CfKind::feature}) {
        const auto out = explain(inst.model, inst.g, v, kind);
        if (!found(out)) continue;
        ++emitted;
        const auto& r = std::get<CounterfactualResult>(out);
        EXPECT_EQ(r.factual_class, preds[v]);
        EXPECT_NE(r.factual_class, r.counterfactual_class);
        EXPECT_TRUE(validate_counterfactual(inst.model, inst.g, r));
        if (kind == CfKind::structure) {
          EXPECT_TRUE(is_subset(r.deleted_edges, inst.g));
          EXPECT_EQ(r.distance, r.deleted_edges.size());
        } else {
          EXPECT_TRUE(words_subset(r.removed_words, inst.g));
          EXPECT_EQ(r.distance, r.removed_words.size());
          for (const auto& w : r.removed_words) EXPECT_EQ(w.node, v);
        }
        if (kind == CfKind::structure && inst.g.edges().size() <= 20) {
          const auto bf = brute_force_counterfactual(inst.model, inst.g, v, kind, 2);
          if (found(bf)) EXPECT_GE(r.distance, std::get<CounterfactualResult>(bf).distance);
        }
      }
    }
  }
  EXPECT_GT(emitted, 20u);
}

TEST(Invariants, DeterministicGivenParameters) {
  const auto inst = trained_two_community(4);
  for (NodeId v = 0; v < 12; v += 4) {
    EXPECT_EQ(explain_structure(inst.model, inst.g, v), explain_structure(inst.model, inst.g, v));
    EXPECT_EQ(explain_features(inst.model, inst.g, v), explain_features(inst.model, inst.g, v));
  }
}

TEST(Serialization, OutcomeJsonRoundTrip) {
  const BarbellFixture f;
  const auto found_out = explain_structure(f.model, f.g, 3);
  EXPECT_EQ(outcome_from_json(to_json(found_out)), found_out);
  const WordFixture w;
  const auto feat = explain_features(w.model, w.g, 0);
  EXPECT_EQ(outcome_from_json(to_json(feat)), feat);
  const ExplainOutcome nf = NotFound{4, CfKind::feature, 500, "no word removal flipped the prediction"};
  EXPECT_EQ(outcome_from_json(to_json(nf)), nf);
  EXPECT_EQ(to_json(found_out).at("kind"), "structure");
}
