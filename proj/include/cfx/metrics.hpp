#pragma once

// Extraction of the structured record from raw model text, the six exact-match metrics, the
// 5-of-6 selection rule and report aggregation.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

namespace cfx {

inline constexpr std::array<const char*, 7> kRecordKeys = {
    "target_node",       "factual_class",         "counterfactual_class", "factual_neighbors",
    "counterfactual_neighbors", "factual_features", "counterfactual_features"};

/// What the model reported.
struct ExtractionRecord {
  long long target_node = 0;
  std::string factual_class;
  std::string counterfactual_class;
  std::set<long long> factual_neighbors;
  std::set<long long> counterfactual_neighbors;
  std::set<std::string> factual_features;
  std::set<std::string> counterfactual_features;

  friend bool operator==(const ExtractionRecord&, const ExtractionRecord&) = default;
};

/// What is actually true of the factual/counterfactual pair.
struct GroundTruth {
  long long target_node = 0;
  std::string factual_class;
  std::string counterfactual_class;
  std::set<long long> factual_neighbors;
  std::set<long long> counterfactual_neighbors;
  std::set<std::string> factual_features;
  std::set<std::string> counterfactual_features;
  /// Class names in id order; lets integer class answers be mapped to names.
  std::vector<std::string> class_names;

  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

enum class ParseErrorKind { no_json, invalid_json, missing_key, bad_value };

inline std::string to_string(ParseErrorKind k) {
  switch (k) {
    case ParseErrorKind::no_json: return "no_json";
    case ParseErrorKind::invalid_json: return "invalid_json";
    case ParseErrorKind::missing_key: return "missing_key";
    case ParseErrorKind::bad_value: return "bad_value";
  }
  return "unknown";
}

inline ParseErrorKind parse_error_kind(const std::string& s) {
  for (auto k : {ParseErrorKind::no_json, ParseErrorKind::invalid_json, ParseErrorKind::missing_key,
                 ParseErrorKind::bad_value}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown parse error kind '" + s + "'");
}

struct ParseError {
  ParseErrorKind kind = ParseErrorKind::no_json;
  std::string detail;

  friend bool operator==(const ParseError&, const ParseError&) = default;
};

using ParseResult = std::variant<ExtractionRecord, ParseError>;

// ---------------------------------------------------------------------------------------------
// Parsing

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

inline std::string normalize_text(std::string_view s) { return lower(trim(s)); }

inline std::string normalize_key(std::string_view s) {
  std::string k = normalize_text(s);
  for (auto& c : k) {
    if (c == '-' || c == ' ') c = '_';
  }
  return k;
}

inline bool all_digits(std::string_view s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c) != 0; });
}

/// Bodies of ``` fenced blocks, in order of appearance.
inline std::vector<std::string> fenced_blocks(std::string_view text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    const auto open = text.find("```", pos);
    if (open == std::string_view::npos) break;
    auto body = text.find('\n', open + 3);
    if (body == std::string_view::npos) break;
    const auto close = text.find("```", body + 1);
    if (close == std::string_view::npos) break;
    out.emplace_back(text.substr(body + 1, close - body - 1));
    pos = close + 3;
  }
  return out;
}

/// Balanced top-level {...} spans (string-literal aware), in order of appearance.
inline std::vector<std::string> balanced_objects(std::string_view text) {
  std::vector<std::string> out;
  int depth = 0;
  bool in_string = false;
  bool escaped = false;
  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_string) {
      if (escaped) {
        escaped = false;
      } else if (c == '\\') {
        escaped = true;
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"' && depth > 0) {
      in_string = true;
    } else if (c == '{') {
      if (depth++ == 0) start = i;
    } else if (c == '}' && depth > 0) {
      if (--depth == 0) out.emplace_back(text.substr(start, i - start + 1));
    }
  }
  return out;
}

inline std::optional<long long> as_integer(const nlohmann::json& v) {
  if (v.is_number_integer()) return v.get<long long>();
  if (v.is_number_unsigned()) return static_cast<long long>(v.get<unsigned long long>());
  if (v.is_number_float()) {
    const double d = v.get<double>();
    if (d == static_cast<double>(static_cast<long long>(d))) return static_cast<long long>(d);
    return std::nullopt;
  }
  if (v.is_string()) {
    const auto s = trim(v.get<std::string>());
    if (all_digits(s) && s.size() < 19) return std::stoll(s);
  }
  return std::nullopt;
}

inline std::optional<std::string> as_class(const nlohmann::json& v) {
  if (v.is_string()) return normalize_text(v.get<std::string>());
  if (auto i = as_integer(v)) return std::to_string(*i);
  return std::nullopt;
}

inline std::optional<std::set<long long>> as_id_set(const nlohmann::json& v) {
  if (!v.is_array()) return std::nullopt;
  std::set<long long> out;
  for (const auto& e : v) {
    auto i = as_integer(e);
    if (!i) return std::nullopt;
    out.insert(*i);
  }
  return out;
}

inline std::optional<std::set<std::string>> as_word_set(const nlohmann::json& v) {
  if (!v.is_array()) return std::nullopt;
  std::set<std::string> out;
  for (const auto& e : v) {
    if (!e.is_string()) return std::nullopt;
    out.insert(normalize_text(e.get<std::string>()));
  }
  return out;
}

inline ParseResult record_from_object(const nlohmann::json& obj) {
  std::map<std::string, const nlohmann::json*> fields;
  for (const auto& [k, v] : obj.items()) fields.emplace(normalize_key(k), &v);
  for (const char* key : kRecordKeys) {
    if (!fields.contains(key)) return ParseError{ParseErrorKind::missing_key, key};
  }
  auto bad = [](const char* key) { return ParseError{ParseErrorKind::bad_value, key}; };

  ExtractionRecord rec;
  if (auto t = as_integer(*fields["target_node"])) rec.target_node = *t; else return bad("target_node");
  if (auto c = as_class(*fields["factual_class"])) rec.factual_class = *c; else return bad("factual_class");
  if (auto c = as_class(*fields["counterfactual_class"])) rec.counterfactual_class = *c; else return bad("counterfactual_class");
  if (auto s = as_id_set(*fields["factual_neighbors"])) rec.factual_neighbors = *s; else return bad("factual_neighbors");
  if (auto s = as_id_set(*fields["counterfactual_neighbors"])) rec.counterfactual_neighbors = *s;
  else return bad("counterfactual_neighbors");
  if (auto s = as_word_set(*fields["factual_features"])) rec.factual_features = *s; else return bad("factual_features");
  if (auto s = as_word_set(*fields["counterfactual_features"])) rec.counterfactual_features = *s;
  else return bad("counterfactual_features");
  return rec;
}

}  // namespace detail

/// Last fenced JSON block wins; otherwise the last balanced top-level object in the text.
inline ParseResult parse_extraction(std::string_view raw) {
  auto parse_last = [](const std::vector<std::string>& spans) -> std::optional<ParseResult> {
    for (auto it = spans.rbegin(); it != spans.rend(); ++it) {
      auto j = nlohmann::json::parse(*it, nullptr, /*allow_exceptions=*/false);
      if (j.is_object()) return detail::record_from_object(j);
    }
    return std::nullopt;
  };

  const auto fences = detail::fenced_blocks(raw);
  if (auto r = parse_last(fences)) return *r;
  for (auto it = fences.rbegin(); it != fences.rend(); ++it) {
    if (auto r = parse_last(detail::balanced_objects(*it))) return *r;
  }
  const auto objects = detail::balanced_objects(raw);
  if (auto r = parse_last(objects)) return *r;
  if (!objects.empty() || !fences.empty()) {
    return ParseError{ParseErrorKind::invalid_json, "found a JSON-like span but it does not parse as an object"};
  }
  return ParseError{ParseErrorKind::no_json, "no JSON object in response"};
}

// ---------------------------------------------------------------------------------------------
// Metrics

struct MetricVector {
  int tni = 0;
  int tnnu = 0;
  int cci = 0;
  int ftnf = 0;
  int cftnf = 0;
  int cftnn = 0;
  bool passed_5_of_6 = false;

  static MetricVector from(int tni, int tnnu, int cci, int ftnf, int cftnf, int cftnn) {
    MetricVector m{tni, tnnu, cci, ftnf, cftnf, cftnn, false};
    m.passed_5_of_6 = m.sum() >= 5;
    return m;
  }
  int sum() const { return tni + tnnu + cci + ftnf + cftnf + cftnn; }
  std::array<int, 6> values() const { return {tni, tnnu, cci, ftnf, cftnf, cftnn}; }

  friend bool operator==(const MetricVector&, const MetricVector&) = default;
};

inline constexpr std::array<const char*, 6> kMetricNames = {"TNI", "TNNU", "CCI", "FTNF", "CFTNF", "CFTNN"};

namespace detail {

/// Maps an integer class answer through the class names; names are compared normalized.
inline std::string canonical_class(const std::string& answer, const std::vector<std::string>& class_names) {
  const auto a = normalize_text(answer);
  if (all_digits(a) && a.size() < 10) {
    const auto id = std::stoul(a);
    if (id < class_names.size()) return normalize_text(class_names[id]);
  }
  return a;
}

inline std::set<std::string> normalized_words(const std::set<std::string>& words) {
  std::set<std::string> out;
  for (const auto& w : words) out.insert(normalize_text(w));
  return out;
}

}  // namespace detail

inline MetricVector compute_metrics(const ExtractionRecord& rec, const GroundTruth& truth) {
  const auto& names = truth.class_names;
  return MetricVector::from(
      rec.target_node == truth.target_node, rec.factual_neighbors == truth.factual_neighbors,
      detail::canonical_class(rec.counterfactual_class, names) == detail::canonical_class(truth.counterfactual_class, names),
      detail::normalized_words(rec.factual_features) == detail::normalized_words(truth.factual_features),
      detail::normalized_words(rec.counterfactual_features) == detail::normalized_words(truth.counterfactual_features),
      rec.counterfactual_neighbors == truth.counterfactual_neighbors);
}

/// A parse failure scores zero on every metric.
inline MetricVector compute_metrics(const ParseResult& parsed, const GroundTruth& truth) {
  if (const auto* rec = std::get_if<ExtractionRecord>(&parsed)) return compute_metrics(*rec, truth);
  return MetricVector::from(0, 0, 0, 0, 0, 0);
}

template <class Id>
std::vector<Id> select_for_human_eval(const std::vector<std::pair<Id, MetricVector>>& records) {
  std::vector<Id> out;
  for (const auto& [id, m] : records) {
    if (m.passed_5_of_6) out.push_back(id);
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Aggregation

struct GroupKey {
  std::string model_name;
  std::string dataset;
  std::string explainer;

  friend auto operator<=>(const GroupKey&, const GroupKey&) = default;
};

struct GroupBy {
  bool model_name = true;
  bool dataset = true;
  bool explainer = true;
};

enum class SampleStatus { scored, parse_failed, not_found, endpoint_error };

struct MetricSample {
  GroupKey key;
  SampleStatus status = SampleStatus::scored;
  MetricVector metrics;
};

struct ReportRow {
  GroupKey key;
  std::size_t attempts = 0;    // every sample in the group
  std::size_t evaluated = 0;   // scored + parse failures: the denominator of the means
  std::size_t parse_failures = 0;
  std::size_t not_found = 0;
  std::size_t errors = 0;
  std::array<double, 6> means{};
  double parse_failure_rate = 0.0;
  double found_rate = 0.0;
};

class ReportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-group metric means over evaluated explanations (parse failures count as zeros);
/// NotFound outcomes and endpoint errors are tallied but excluded from the means.
inline std::vector<ReportRow> aggregate(const std::vector<MetricSample>& samples, GroupBy by = {}) {
  if (samples.empty()) throw ReportError("cannot aggregate an empty group");
  std::map<GroupKey, ReportRow> rows;
  std::map<GroupKey, std::array<double, 6>> sums;
  for (const auto& s : samples) {
    GroupKey key{by.model_name ? s.key.model_name : "*", by.dataset ? s.key.dataset : "*",
                 by.explainer ? s.key.explainer : "*"};
    auto& row = rows[key];
    row.key = key;
    ++row.attempts;
    switch (s.status) {
      case SampleStatus::not_found: ++row.not_found; continue;
      case SampleStatus::endpoint_error: ++row.errors; continue;
      case SampleStatus::parse_failed: ++row.parse_failures; break;
      case SampleStatus::scored: break;
    }
    ++row.evaluated;
    auto& acc = sums[key];
    const auto v = s.status == SampleStatus::scored ? s.metrics.values() : std::array<int, 6>{};
    for (std::size_t i = 0; i < 6; ++i) acc[i] += v[i];
  }
  std::vector<ReportRow> out;
  for (auto& [key, row] : rows) {
    if (row.evaluated > 0) {
      for (std::size_t i = 0; i < 6; ++i) row.means[i] = sums[key][i] / static_cast<double>(row.evaluated);
      row.parse_failure_rate = static_cast<double>(row.parse_failures) / static_cast<double>(row.evaluated);
    }
    row.found_rate = static_cast<double>(row.attempts - row.not_found) / static_cast<double>(row.attempts);
    out.push_back(row);
  }
  std::sort(out.begin(), out.end(), [](const ReportRow& a, const ReportRow& b) {
    return std::tie(a.key.dataset, a.key.explainer, a.key.model_name) <
           std::tie(b.key.dataset, b.key.explainer, b.key.model_name);
  });
  return out;
}

inline std::string format_fixed3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

/// Markdown table, one row per group, metric means at three decimals.
inline std::string render_report(const std::vector<ReportRow>& rows) {
  const std::vector<std::string> header{"Dataset", "Explainer", "Model", "N",     "TNI",      "TNNU", "CCI",
                                        "FTNF",    "CFTNF",     "CFTNN", "ParseFail", "Found", "Errors"};
  std::vector<std::vector<std::string>> table{header};
  for (const auto& r : rows) {
    std::vector<std::string> line{r.key.dataset, r.key.explainer, r.key.model_name, std::to_string(r.evaluated)};
    for (double m : r.means) line.push_back(r.evaluated > 0 ? format_fixed3(m) : "-");
    line.push_back(r.evaluated > 0 ? format_fixed3(r.parse_failure_rate) : "-");
    line.push_back(format_fixed3(r.found_rate));
    line.push_back(std::to_string(r.errors));
    table.push_back(std::move(line));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : table)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());

  std::ostringstream out;
  auto emit = [&](const std::vector<std::string>& line) {
    out << '|';
    for (std::size_t c = 0; c < line.size(); ++c) {
      const bool numeric = c >= 3;
      const auto pad = std::string(width[c] - line[c].size(), ' ');
      out << ' ' << (numeric ? pad + line[c] : line[c] + pad) << " |";
    }
    out << '\n';
  };
  emit(table.front());
  out << '|';
  for (std::size_t c = 0; c < header.size(); ++c) {
    out << (c >= 3 ? std::string(width[c] + 1, '-') + ":|" : ":" + std::string(width[c] + 1, '-') + "|");
  }
  out << '\n';
  for (std::size_t i = 1; i < table.size(); ++i) emit(table[i]);
  return out.str();
}

// ---------------------------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const ExtractionRecord& r) {
  return {{"target_node", r.target_node},
          {"factual_class", r.factual_class},
          {"counterfactual_class", r.counterfactual_class},
          {"factual_neighbors", r.factual_neighbors},
          {"counterfactual_neighbors", r.counterfactual_neighbors},
          {"factual_features", r.factual_features},
          {"counterfactual_features", r.counterfactual_features}};
}

inline nlohmann::json to_json(const GroundTruth& t) {
  return {{"target_node", t.target_node},
          {"factual_class", t.factual_class},
          {"counterfactual_class", t.counterfactual_class},
          {"factual_neighbors", t.factual_neighbors},
          {"counterfactual_neighbors", t.counterfactual_neighbors},
          {"factual_features", t.factual_features},
          {"counterfactual_features", t.counterfactual_features},
          {"class_names", t.class_names}};
}

inline GroundTruth ground_truth_from_json(const nlohmann::json& j) {
  GroundTruth t;
  t.target_node = j.at("target_node").get<long long>();
  t.factual_class = j.at("factual_class").get<std::string>();
  t.counterfactual_class = j.at("counterfactual_class").get<std::string>();
  t.factual_neighbors = j.at("factual_neighbors").get<std::set<long long>>();
  t.counterfactual_neighbors = j.at("counterfactual_neighbors").get<std::set<long long>>();
  t.factual_features = j.at("factual_features").get<std::set<std::string>>();
  t.counterfactual_features = j.at("counterfactual_features").get<std::set<std::string>>();
  t.class_names = j.value("class_names", std::vector<std::string>{});
  return t;
}

inline nlohmann::json to_json(const ParseError& e) { return {{"kind", to_string(e.kind)}, {"detail", e.detail}}; }

inline nlohmann::json to_json(const MetricVector& m) {
  return {{"tni", m.tni},     {"tnnu", m.tnnu},   {"cci", m.cci},
          {"ftnf", m.ftnf},   {"cftnf", m.cftnf}, {"cftnn", m.cftnn},
          {"passed_5_of_6", m.passed_5_of_6}};
}

inline MetricVector metric_vector_from_json(const nlohmann::json& j) {
  return MetricVector::from(j.at("tni").get<int>(), j.at("tnnu").get<int>(), j.at("cci").get<int>(),
                            j.at("ftnf").get<int>(), j.at("cftnf").get<int>(), j.at("cftnn").get<int>());
}

}  // namespace cfx
