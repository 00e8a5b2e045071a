#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfx/metrics.hpp"

namespace cfx::test_support {

inline std::filesystem::path data_dir() { return CFX_TEST_DATA_DIR; }

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct GoldenCase {
  std::string name;
  std::string raw;
  nlohmann::json expected;
};

inline std::vector<GoldenCase> golden_cases() {
  std::vector<GoldenCase> out;
  for (const auto& entry : std::filesystem::directory_iterator(data_dir() / "golden")) {
    if (entry.path().extension() != ".txt") continue;
    auto expected_path = entry.path();
    expected_path.replace_extension(".expected.json");
    out.push_back({entry.path().stem().string(), read_file(entry.path()),
                   nlohmann::json::parse(read_file(expected_path))});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  return out;
}

/// Empty string when the parse matches the expectation, otherwise a description of the mismatch.
inline std::string check_golden(const GoldenCase& c) {
  const ParseResult got = parse_extraction(c.raw);
  if (c.expected.contains("record")) {
    const auto* rec = std::get_if<ExtractionRecord>(&got);
    if (!rec) return "expected a record, got error " + to_string(std::get<ParseError>(got).kind);
    if (to_json(*rec) != c.expected["record"]) return "record mismatch: " + to_json(*rec).dump();
    return {};
  }
  const auto* err = std::get_if<ParseError>(&got);
  if (!err) return "expected an error, got a record";
  if (to_string(err->kind) != c.expected["error"].get<std::string>()) return "wrong error kind " + to_string(err->kind);
  if (c.expected.contains("detail") && err->detail != c.expected["detail"].get<std::string>()) {
    return "wrong error detail " + err->detail;
  }
  return {};
}

// An independent field-by-field comparator for the six metrics: it works on sorted vectors
// rather than sets and does its own case folding and class-id resolution.
inline std::vector<int> reference_metrics(const ExtractionRecord& r, const GroundTruth& t) {
  auto fold = [](std::string s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
    std::size_t i = 0;
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    s = s.substr(i);
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
  };
  auto cls = [&](const std::string& s) {
    const std::string f = fold(s);
    bool digits = !f.empty();
    for (char c : f) digits = digits && c >= '0' && c <= '9';
    if (digits && f.size() < 6) {
      std::size_t id = static_cast<std::size_t>(std::stoi(f));
      if (id < t.class_names.size()) return fold(t.class_names[id]);
    }
    return f;
  };
  auto ids = [](const std::set<long long>& s) {
    std::vector<long long> v(s.begin(), s.end());
    std::sort(v.begin(), v.end());
    return v;
  };
  auto words = [&](const std::set<std::string>& s) {
    std::vector<std::string> v;
    for (const auto& w : s) v.push_back(fold(w));
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
  };
  return {r.target_node == t.target_node ? 1 : 0,
          ids(r.factual_neighbors) == ids(t.factual_neighbors) ? 1 : 0,
          cls(r.counterfactual_class) == cls(t.counterfactual_class) ? 1 : 0,
          words(r.factual_features) == words(t.factual_features) ? 1 : 0,
          words(r.counterfactual_features) == words(t.counterfactual_features) ? 1 : 0,
          ids(r.counterfactual_neighbors) == ids(t.counterfactual_neighbors) ? 1 : 0};
}

/// A random truth and a record that agrees or disagrees with it field by field, including
/// answers that differ only in case, whitespace or class-id representation.
inline std::pair<ExtractionRecord, GroundTruth> random_pair(std::mt19937_64& rng) {
  const std::vector<std::string> classes{"Theory", "Neural_Networks", "Case_Based", "Rule_Learning"};
  const std::vector<std::string> vocab{"graph", "learning", "Network", "bayes", "rule", "gene"};
  auto coin = [&](double p) { return std::bernoulli_distribution(p)(rng); };
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  auto id_set = [&]() {
    std::set<long long> s;
    const auto k = pick(5);
    for (std::size_t i = 0; i < k; ++i) s.insert(static_cast<long long>(pick(10)));
    return s;
  };
  auto word_set = [&]() {
    std::set<std::string> s;
    const auto k = pick(4);
    for (std::size_t i = 0; i < k; ++i) s.insert(vocab[pick(vocab.size())]);
    return s;
  };
  auto restyle = [&](const std::string& w) {
    std::string s = w;
    if (coin(0.3)) {
      for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    }
    if (coin(0.3)) s = "  " + s + " ";
    return s;
  };

  GroundTruth t;
  t.class_names = classes;
  t.target_node = static_cast<long long>(pick(10));
  t.factual_class = classes[pick(classes.size())];
  t.counterfactual_class = classes[pick(classes.size())];
  t.factual_neighbors = id_set();
  t.counterfactual_neighbors = id_set();
  t.factual_features = word_set();
  t.counterfactual_features = word_set();

  ExtractionRecord r;
  r.target_node = coin(0.7) ? t.target_node : static_cast<long long>(pick(10));
  r.factual_class = restyle(t.factual_class);
  if (coin(0.6)) {
    const auto it = std::find(classes.begin(), classes.end(), t.counterfactual_class);
    r.counterfactual_class = coin(0.5) ? restyle(t.counterfactual_class) : std::to_string(it - classes.begin());
  } else {
    r.counterfactual_class = coin(0.5) ? restyle(classes[pick(classes.size())]) : std::to_string(pick(6));
  }
  r.factual_neighbors = coin(0.7) ? t.factual_neighbors : id_set();
  r.counterfactual_neighbors = coin(0.7) ? t.counterfactual_neighbors : id_set();
  auto words_like = [&](const std::set<std::string>& truth) {
    std::set<std::string> s;
    if (coin(0.7)) {
      for (const auto& w : truth) s.insert(restyle(w));
    } else {
      for (const auto& w : word_set()) s.insert(restyle(w));
    }
    return s;
  };
  r.factual_features = words_like(t.factual_features);
  r.counterfactual_features = words_like(t.counterfactual_features);
  return {r, t};
}

}  // namespace cfx::test_support
