#include <gtest/gtest.h>

#include <random>

#include "cfx/metrics.hpp"
#include "support.hpp"

using namespace cfx;

namespace {

GroundTruth truth() {
  GroundTruth t;
  t.target_node = 4;
  t.factual_class = "Neural_Networks";
  t.counterfactual_class = "Theory";
  t.factual_neighbors = {7, 12};
  t.counterfactual_neighbors = {12};
  t.factual_features = {"network", "learning"};
  t.counterfactual_features = {"network", "learning"};
  t.class_names = {"Neural_Networks", "Theory"};
  return t;
}

ExtractionRecord echo(const GroundTruth& t) {
  return {t.target_node,         t.factual_class,    t.counterfactual_class,   t.factual_neighbors,
          t.counterfactual_neighbors, t.factual_features, t.counterfactual_features};
}

std::string fenced(const nlohmann::json& j) { return "Explanation.\n```json\n" + j.dump(2) + "\n```\n"; }

MetricSample sample(const std::string& model, SampleStatus st, MetricVector m = {}) {
  return {{model, "cora", "structure"}, st, m};
}

}  // namespace

TEST(ParseExtraction, FencedBlock) {
  const auto r = parse_extraction(fenced(to_json(echo(truth()))));
  ASSERT_TRUE(std::holds_alternative<ExtractionRecord>(r));
  auto expected = echo(truth());
  expected.factual_class = "neural_networks";
  expected.counterfactual_class = "theory";
  EXPECT_EQ(std::get<ExtractionRecord>(r), expected);
}

TEST(ParseExtraction, BareJsonFallback) {
  const auto r = parse_extraction("The reason is the edge.\n" + to_json(echo(truth())).dump());
  ASSERT_TRUE(std::holds_alternative<ExtractionRecord>(r));
  EXPECT_EQ(std::get<ExtractionRecord>(r).target_node, 4);
}

TEST(ParseExtraction, MissingKey) {
  auto j = to_json(echo(truth()));
  j.erase("counterfactual_features");
  const auto r = parse_extraction(fenced(j));
  ASSERT_TRUE(std::holds_alternative<ParseError>(r));
  EXPECT_EQ(std::get<ParseError>(r).kind, ParseErrorKind::missing_key);
  EXPECT_EQ(std::get<ParseError>(r).detail, "counterfactual_features");
}

TEST(ParseExtraction, DistinctErrorKinds) {
  EXPECT_EQ(std::get<ParseError>(parse_extraction("no json here")).kind, ParseErrorKind::no_json);
  EXPECT_EQ(std::get<ParseError>(parse_extraction("{not: json}")).kind, ParseErrorKind::invalid_json);
  auto j = to_json(echo(truth()));
  j["factual_neighbors"] = "7 and 12";
  EXPECT_EQ(std::get<ParseError>(parse_extraction(fenced(j))).kind, ParseErrorKind::bad_value);
  j = to_json(echo(truth()));
  j["factual_features"] = {1, 2};
  EXPECT_EQ(std::get<ParseError>(parse_extraction(fenced(j))).kind, ParseErrorKind::bad_value);
}

TEST(ParseExtraction, ArrayTopLevelIsNotARecord) {
  EXPECT_EQ(std::get<ParseError>(parse_extraction("```json\n[1, 2]\n```")).kind, ParseErrorKind::invalid_json);
}

TEST(ParseExtraction, GoldenSuite) {
  const auto cases = test_support::golden_cases();
  ASSERT_GE(cases.size(), 10u);
  for (const auto& c : cases) EXPECT_EQ(test_support::check_golden(c), "") << c.name;
}

TEST(ComputeMetrics, IdentityIsPerfect) {
  const auto m = compute_metrics(echo(truth()), truth());
  EXPECT_EQ(m, MetricVector::from(1, 1, 1, 1, 1, 1));
  EXPECT_TRUE(m.passed_5_of_6);
}

TEST(ComputeMetrics, OneMissingNeighborStillPasses) {
  auto r = echo(truth());
  r.factual_neighbors.erase(7);
  const auto m = compute_metrics(r, truth());
  EXPECT_EQ(m.tnnu, 0);
  EXPECT_EQ(m.sum(), 5);
  EXPECT_TRUE(m.passed_5_of_6);
}

TEST(ComputeMetrics, ParseErrorIsAllZero) {
  const auto m = compute_metrics(ParseResult{ParseError{ParseErrorKind::no_json, ""}}, truth());
  EXPECT_EQ(m.sum(), 0);
  EXPECT_FALSE(m.passed_5_of_6);
}

TEST(ComputeMetrics, ClassIdsAndCaseAreNormalized) {
  auto r = echo(truth());
  r.counterfactual_class = "1";
  EXPECT_EQ(compute_metrics(r, truth()).cci, 1);
  r.counterfactual_class = "  THEORY ";
  EXPECT_EQ(compute_metrics(r, truth()).cci, 1);
  r.counterfactual_class = "0";
  EXPECT_EQ(compute_metrics(r, truth()).cci, 0);
  r.counterfactual_class = "7";
  EXPECT_EQ(compute_metrics(r, truth()).cci, 0);
  r = echo(truth());
  r.factual_features = {"NETWORK", " learning"};
  EXPECT_EQ(compute_metrics(r, truth()).ftnf, 1);
}

TEST(ComputeMetrics, FactualClassIsNotScored) {
  auto r = echo(truth());
  r.factual_class = "something else";
  EXPECT_EQ(compute_metrics(r, truth()).sum(), 6);
}

TEST(ComputeMetrics, OrderInsensitiveThroughParser) {
  auto j = to_json(echo(truth()));
  j["factual_neighbors"] = {12, 7, 12};
  j["factual_features"] = {"learning", "network"};
  const auto m = compute_metrics(parse_extraction(fenced(j)), truth());
  EXPECT_EQ(m.sum(), 6);
}

TEST(ComputeMetrics, AgreesWithReferenceOnRandomPairs) {
  std::mt19937_64 rng(2024);
  int disagreements = 0;
  std::array<int, 6> ones{};
  for (int i = 0; i < 1000; ++i) {
    const auto [r, t] = test_support::random_pair(rng);
    const auto m = compute_metrics(r, t);
    const auto ref = test_support::reference_metrics(r, t);
    const auto v = m.values();
    if (std::vector<int>(v.begin(), v.end()) != ref) ++disagreements;
    EXPECT_EQ(m.passed_5_of_6, m.sum() >= 5);
    for (int k = 0; k < 6; ++k) ones[k] += v[k];
  }
  EXPECT_EQ(disagreements, 0);
  // Both outcomes occur for every metric, so the comparison is not vacuous.
  for (int k = 0; k < 6; ++k) {
    EXPECT_GT(ones[k], 50);
    EXPECT_LT(ones[k], 950);
  }
}

TEST(MetricVector, PassedInvariant) {
  for (int mask = 0; mask < 64; ++mask) {
    const auto m = MetricVector::from(mask & 1, (mask >> 1) & 1, (mask >> 2) & 1, (mask >> 3) & 1, (mask >> 4) & 1,
                                      (mask >> 5) & 1);
    EXPECT_EQ(m.passed_5_of_6, __builtin_popcount(mask) >= 5);
  }
}

TEST(SelectForHumanEval, Threshold) {
  const auto six = MetricVector::from(1, 1, 1, 1, 1, 1);
  const auto five = MetricVector::from(1, 0, 1, 1, 1, 1);
  const auto four = MetricVector::from(0, 0, 1, 1, 1, 1);
  EXPECT_EQ(select_for_human_eval<int>({{1, six}, {2, five}, {3, four}}), (std::vector<int>{1, 2}));
  EXPECT_EQ(select_for_human_eval<int>({{1, four}, {2, MetricVector{}}}), std::vector<int>{});
  EXPECT_EQ(select_for_human_eval<int>({{3, six}, {1, six}}), (std::vector<int>{3, 1}));
}

TEST(Aggregate, MeansAndRates) {
  std::vector<MetricSample> s;
  for (int tni : {1, 1, 0, 1}) s.push_back(sample("m", SampleStatus::scored, MetricVector::from(tni, 1, 1, 1, 1, 1)));
  auto rows = aggregate(s);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_DOUBLE_EQ(rows[0].means[0], 0.75);
  EXPECT_DOUBLE_EQ(rows[0].means[1], 1.0);
  EXPECT_NE(render_report(rows).find("0.750"), std::string::npos);

  s.push_back(sample("m", SampleStatus::parse_failed));
  s.push_back(sample("m", SampleStatus::not_found));
  s.push_back(sample("m", SampleStatus::endpoint_error));
  rows = aggregate(s);
  EXPECT_EQ(rows[0].evaluated, 5u);
  EXPECT_EQ(rows[0].attempts, 7u);
  EXPECT_DOUBLE_EQ(rows[0].means[0], 3.0 / 5.0);
  EXPECT_DOUBLE_EQ(rows[0].parse_failure_rate, 0.2);
  EXPECT_DOUBLE_EQ(rows[0].found_rate, 6.0 / 7.0);
  EXPECT_EQ(rows[0].errors, 1u);
}

TEST(Aggregate, SingleRecordEqualsItsVector) {
  const auto m = MetricVector::from(1, 0, 1, 0, 1, 1);
  const auto rows = aggregate({sample("m", SampleStatus::scored, m)});
  for (int k = 0; k < 6; ++k) EXPECT_DOUBLE_EQ(rows[0].means[k], m.values()[k]);
}

TEST(Aggregate, GroupsAndGroupBy) {
  const auto six = MetricVector::from(1, 1, 1, 1, 1, 1);
  std::vector<MetricSample> s{sample("small", SampleStatus::scored), sample("large", SampleStatus::scored, six)};
  auto rows = aggregate(s);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].key.model_name, "large");
  EXPECT_DOUBLE_EQ(rows[0].means[2], 1.0);
  EXPECT_DOUBLE_EQ(rows[1].means[2], 0.0);
  rows = aggregate(s, {.model_name = false});
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_DOUBLE_EQ(rows[0].means[2], 0.5);
}

TEST(Aggregate, EmptyThrows) { EXPECT_THROW(aggregate({}), ReportError); }

TEST(RenderReport, HeaderAndAlignment) {
  const auto text = render_report(aggregate({sample("m", SampleStatus::scored, MetricVector::from(1, 1, 1, 1, 1, 1))}));
  for (const char* col : {"TNI", "TNNU", "CCI", "FTNF", "CFTNF", "CFTNN", "ParseFail"}) {
    EXPECT_NE(text.find(col), std::string::npos) << col;
  }
  std::istringstream lines(text);
  std::string line;
  std::size_t width = 0;
  while (std::getline(lines, line)) {
    if (width == 0) width = line.size();
    EXPECT_EQ(line.size(), width);
  }
  EXPECT_EQ(text, render_report(aggregate({sample("m", SampleStatus::scored, MetricVector::from(1, 1, 1, 1, 1, 1))})));
}

TEST(MetricsJson, RoundTrip) {
  const auto m = MetricVector::from(1, 0, 1, 1, 0, 1);
  EXPECT_EQ(metric_vector_from_json(to_json(m)), m);
  EXPECT_EQ(ground_truth_from_json(to_json(truth())), truth());
}
