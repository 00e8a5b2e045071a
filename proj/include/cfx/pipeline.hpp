#pragma once

// Run configuration and the four pipeline stages: train, explain, run (prompt, query, parse,
// score) and report. Every stage reads and writes files under the configured output directory.
//
//   <output_dir>/model.json          checkpoint
//   <output_dir>/history.jsonl       per-epoch loss and train accuracy
//   <output_dir>/explanations.jsonl  one line per (target, explainer) attempt
//   <output_dir>/runs.jsonl          append-only run log, one RunRecord per attempt
//   <output_dir>/report.md           aggregate table
//   <output_dir>/human_eval/         explanations passing 5 of 6 metrics, one text file each

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfx/dataset.hpp"
#include "cfx/explainers.hpp"
#include "cfx/gcn.hpp"
#include "cfx/graph.hpp"
#include "cfx/metrics.hpp"
#include "cfx/verbalizer.hpp"
#include "cfx/llm_client.hpp"

namespace cfx {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class LogError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Backend { mock, live };
enum class ExplainerChoice { structure, feature, both };

inline std::string to_string(Backend b) { return b == Backend::mock ? "mock" : "live"; }
inline std::string to_string(ExplainerChoice e) {
  switch (e) {
    case ExplainerChoice::structure: return "structure";
    case ExplainerChoice::feature: return "feature";
    case ExplainerChoice::both: return "both";
  }
  return "unknown";
}

inline Backend parse_backend(const std::string& s) {
  if (s == "mock") return Backend::mock;
  if (s == "live") return Backend::live;
  throw ConfigError("backend must be mock or live, got '" + s + "'");
}

inline ExplainerChoice parse_explainer_choice(const std::string& s) {
  if (s == "structure") return ExplainerChoice::structure;
  if (s == "feature") return ExplainerChoice::feature;
  if (s == "both") return ExplainerChoice::both;
  throw ConfigError("explainer must be structure, feature or both, got '" + s + "'");
}

inline std::vector<CfKind> kinds_of(ExplainerChoice e) {
  switch (e) {
    case ExplainerChoice::structure: return {CfKind::structure};
    case ExplainerChoice::feature: return {CfKind::feature};
    case ExplainerChoice::both: return {CfKind::structure, CfKind::feature};
  }
  return {};
}

/// Either citation files (content + cites, optional vocab and class names) or a synthetic kind.
struct DatasetConfig {
  std::string name;  // report label; derived when empty
  std::string content;
  std::string cites;
  std::string vocab;
  std::string class_names;
  std::string synthetic = "two_community";
  SyntheticParams synthetic_params;
  std::uint64_t synthetic_seed = 0;
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;
};

struct RunConfig {
  DatasetConfig dataset;
  ExplainerChoice explainer = ExplainerChoice::both;
  std::size_t sample_size = 100;
  std::uint64_t seed = 0;  // node sampling and mock responses
  TrainConfig train;
  ExplainerParams explainer_params;
  LlmConfig llm;
  Backend backend = Backend::mock;
  CorruptionSpec corruption;
  std::string output_dir = "cfx_out";
  std::string template_version = kTemplateVersion;
  bool debug = false;  // keep raw request/response bodies in the run log
};

// ---------------------------------------------------------------------------------------------
// Configuration I/O

inline nlohmann::json to_json(const SyntheticParams& p) {
  return {{"n", p.n},
          {"p_in", p.p_in},
          {"p_out", p.p_out},
          {"m", p.m},
          {"p", p.p},
          {"words_per_class", p.words_per_class},
          {"noise_words", p.noise_words},
          {"word_prob", p.word_prob},
          {"noise_prob", p.noise_prob}};
}

inline SyntheticParams synthetic_params_from_json(const nlohmann::json& j, SyntheticParams p = {}) {
  p.n = j.value("n", p.n);
  p.p_in = j.value("p_in", p.p_in);
  p.p_out = j.value("p_out", p.p_out);
  p.m = j.value("m", p.m);
  p.p = j.value("p", p.p);
  p.words_per_class = j.value("words_per_class", p.words_per_class);
  p.noise_words = j.value("noise_words", p.noise_words);
  p.word_prob = j.value("word_prob", p.word_prob);
  p.noise_prob = j.value("noise_prob", p.noise_prob);
  return p;
}

inline nlohmann::json to_json(const ExplainerParams& p) {
  return {{"max_iters", p.max_iters},
          {"mask_learning_rate", p.mask_learning_rate},
          {"beta", p.beta},
          {"binarize_threshold", p.binarize_threshold},
          {"khop", p.khop},
          {"mask_init", p.mask_init},
          {"feature_scope", p.feature_scope == FeatureScope::target_only ? "target_only" : "subgraph"}};
}

inline ExplainerParams explainer_params_from_json(const nlohmann::json& j, ExplainerParams p = {}) {
  p.max_iters = j.value("max_iters", p.max_iters);
  p.mask_learning_rate = j.value("mask_learning_rate", p.mask_learning_rate);
  p.beta = j.value("beta", p.beta);
  p.binarize_threshold = j.value("binarize_threshold", p.binarize_threshold);
  p.khop = j.value("khop", p.khop);
  p.mask_init = j.value("mask_init", p.mask_init);
  const auto scope = j.value("feature_scope", std::string(p.feature_scope == FeatureScope::target_only ? "target_only"
                                                                                                       : "subgraph"));
  if (scope == "target_only") {
    p.feature_scope = FeatureScope::target_only;
  } else if (scope == "subgraph") {
    p.feature_scope = FeatureScope::subgraph;
  } else {
    throw ConfigError("feature_scope must be target_only or subgraph");
  }
  return p;
}

inline nlohmann::json to_json(const DatasetConfig& d) {
  return {{"name", d.name},
          {"content", d.content},
          {"cites", d.cites},
          {"vocab", d.vocab},
          {"class_names", d.class_names},
          {"synthetic", d.synthetic},
          {"synthetic_params", to_json(d.synthetic_params)},
          {"synthetic_seed", d.synthetic_seed},
          {"train_fraction", d.train_fraction},
          {"split_seed", d.split_seed}};
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"dataset", to_json(c.dataset)},
          {"explainer", to_string(c.explainer)},
          {"sample_size", c.sample_size},
          {"seed", c.seed},
          {"train", to_json(c.train)},
          {"explainer_params", to_json(c.explainer_params)},
          {"llm", to_json(c.llm)},
          {"backend", to_string(c.backend)},
          {"corruption", {{"field", c.corruption.field}, {"probability", c.corruption.probability}}},
          {"output_dir", c.output_dir},
          {"template_version", c.template_version},
          {"debug", c.debug}};
}

namespace detail {

/// Rejects keys that the default configuration does not have, so typos fail loudly.
inline void check_known_keys(const nlohmann::json& given, const nlohmann::json& known, const std::string& prefix) {
  if (!given.is_object()) throw ConfigError("'" + (prefix.empty() ? "config" : prefix) + "' must be an object");
  for (const auto& [k, v] : given.items()) {
    const std::string path = prefix.empty() ? k : prefix + "." + k;
    if (!known.contains(k)) throw ConfigError("unknown configuration key '" + path + "'");
    if (known[k].is_object()) check_known_keys(v, known[k], path);
  }
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  validate(c.llm);
  validate(c.corruption);
  if (c.backend == Backend::live && c.llm.endpoint_url.empty()) {
    throw ConfigError("the live backend requires llm.endpoint_url");
  }
  if (c.template_version != kTemplateVersion) {
    throw ConfigError("template_version '" + c.template_version + "' is pinned, but this build provides '" +
                      kTemplateVersion + "'");
  }
  if (c.sample_size == 0) throw ConfigError("sample_size must be positive");
  if (c.output_dir.empty()) throw ConfigError("output_dir must not be empty");
  const auto& d = c.dataset;
  if (d.content.empty() != d.cites.empty()) throw ConfigError("dataset.content and dataset.cites go together");
  if (d.content.empty() && d.synthetic.empty()) throw ConfigError("dataset needs files or a synthetic kind");
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  const RunConfig defaults;
  detail::check_known_keys(j, to_json(defaults), "");
  RunConfig c;
  try {
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      c.dataset.name = d.value("name", c.dataset.name);
      c.dataset.content = d.value("content", c.dataset.content);
      c.dataset.cites = d.value("cites", c.dataset.cites);
      c.dataset.vocab = d.value("vocab", c.dataset.vocab);
      c.dataset.class_names = d.value("class_names", c.dataset.class_names);
      c.dataset.synthetic = d.value("synthetic", c.dataset.synthetic);
      if (d.contains("synthetic_params")) c.dataset.synthetic_params = synthetic_params_from_json(d["synthetic_params"]);
      c.dataset.synthetic_seed = d.value("synthetic_seed", c.dataset.synthetic_seed);
      c.dataset.train_fraction = d.value("train_fraction", c.dataset.train_fraction);
      c.dataset.split_seed = d.value("split_seed", c.dataset.split_seed);
    }
    if (j.contains("explainer")) c.explainer = parse_explainer_choice(j["explainer"].get<std::string>());
    c.sample_size = j.value("sample_size", c.sample_size);
    c.seed = j.value("seed", c.seed);
    if (j.contains("train")) c.train = train_config_from_json(j["train"]);
    if (j.contains("explainer_params")) c.explainer_params = explainer_params_from_json(j["explainer_params"]);
    if (j.contains("llm")) c.llm = llm_config_from_json(j["llm"]);
    if (j.contains("backend")) c.backend = parse_backend(j["backend"].get<std::string>());
    if (j.contains("corruption")) {
      c.corruption.field = j["corruption"].value("field", c.corruption.field);
      c.corruption.probability = j["corruption"].value("probability", c.corruption.probability);
    }
    c.output_dir = j.value("output_dir", c.output_dir);
    c.template_version = j.value("template_version", c.template_version);
    c.debug = j.value("debug", c.debug);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad configuration value: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  const auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
  return run_config_from_json(j);
}

/// Applies `a.b.c=value` to a configuration object. The value is read as JSON when it parses
/// (numbers, booleans, quoted strings, arrays) and as a bare string otherwise.
inline void apply_override(nlohmann::json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  auto value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  nlohmann::json* node = &config;
  std::stringstream path(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(path, part, '.')) {
    if (part.empty()) throw ConfigError("empty path component in '" + key + "'");
    parts.push_back(part);
  }
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = nlohmann::json::object();
    node = &(*node)[parts[i]];
    if (!node->is_object()) throw ConfigError("'" + parts[i] + "' in '" + key + "' is not an object");
  }
  (*node)[parts.back()] = value;
}

// ---------------------------------------------------------------------------------------------
// Shared stage plumbing

struct RunPaths {
  std::filesystem::path dir, model, history, explanations, runs, report, human_eval;
};

inline RunPaths run_paths(const RunConfig& c) {
  const std::filesystem::path d = c.output_dir;
  return {d, d / "model.json", d / "history.jsonl", d / "explanations.jsonl", d / "runs.jsonl", d / "report.md",
          d / "human_eval"};
}

inline std::string dataset_label(const DatasetConfig& d) {
  if (!d.name.empty()) return d.name;
  if (!d.content.empty()) return std::filesystem::path(d.content).stem().string();
  return "synthetic_" + d.synthetic;
}

inline Graph load_dataset(const DatasetConfig& d, std::ostream* log = nullptr) {
  if (!d.content.empty()) {
    DatasetSpec spec{d.content, d.cites, std::nullopt, std::nullopt};
    if (!d.vocab.empty()) spec.vocab_path = d.vocab;
    if (!d.class_names.empty()) spec.class_names_path = d.class_names;
    LoadStats stats;
    Graph g = load_citation_dataset(spec, &stats);
    if (log && (stats.skipped_cites > 0 || stats.self_citations > 0)) {
      *log << "note: skipped " << stats.skipped_cites << " citations to unknown papers and " << stats.self_citations
           << " self-citations\n";
    }
    return g;
  }
  return make_synthetic(parse_synthetic_kind(d.synthetic), d.synthetic_params, d.synthetic_seed);
}

inline std::string model_label(const RunConfig& c) { return c.backend == Backend::mock ? "mock" : c.llm.model_name; }

/// Runs fn(i) for i in [0, n) on up to `workers` threads. The first exception is rethrown.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

inline std::size_t default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

inline void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw LogError("cannot append to " + path.string());
  out << line << '\n';
  out.flush();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LogError("cannot write " + path.string());
  out << text;
}

// ---------------------------------------------------------------------------------------------
// train

struct TrainSummary {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::size_t feature_dim = 0, hidden_dim = 0, class_count = 0;
};

inline TrainSummary cmd_train(const RunConfig& c, std::ostream& log) {
  validate(c);
  const auto paths = run_paths(c);
  std::filesystem::create_directories(paths.dir);
  const Graph g = load_dataset(c.dataset, &log);
  const SplitMasks masks = make_split(g, c.dataset.train_fraction, c.dataset.split_seed);
  const auto [model, hist] = train(g, masks, c.train, &log);
  save_checkpoint(paths.model, model, c.train);

  std::ofstream h(paths.history, std::ios::trunc);
  for (std::size_t e = 0; e < hist.loss.size(); ++e) {
    h << nlohmann::json{{"epoch", e + 1}, {"loss", hist.loss[e]}, {"train_accuracy", hist.accuracy[e]}}.dump() << '\n';
  }

  const auto pred = predict_all(model, g);
  TrainSummary s{accuracy(pred, g.labels(), masks.train), accuracy(pred, g.labels(), masks.test), model.feature_dim(),
                 model.hidden_dim(), model.class_count()};
  log << "dataset " << dataset_label(c.dataset) << ": " << g.node_count() << " nodes, " << g.edges().size()
      << " edges, " << g.feature_dim() << " words, " << g.class_count() << " classes\n"
      << "train accuracy " << format_fixed3(s.train_accuracy) << ", test accuracy " << format_fixed3(s.test_accuracy)
      << " after " << c.train.epochs << " epochs\n"
      << "checkpoint " << paths.model.string() << '\n';
  return s;
}

// ---------------------------------------------------------------------------------------------
// explain

/// Up to `sample_size` correctly classified nodes, drawn without replacement, in ascending order.
inline std::vector<NodeId> sample_targets(const GcnModel& model, const Graph& g, std::size_t sample_size,
                                          std::uint64_t seed, std::ostream* log = nullptr) {
  const auto pred = predict_all(model, g);
  std::vector<NodeId> eligible;
  for (NodeId v = 0; v < g.node_count(); ++v) {
    if (pred[v] == g.labels()[v]) eligible.push_back(v);
  }
  if (sample_size > eligible.size()) {
    if (log) {
      *log << "warning: sample_size " << sample_size << " exceeds the " << eligible.size()
           << " correctly classified nodes; using all of them\n";
    }
    sample_size = eligible.size();
  }
  std::mt19937_64 rng(seed);
  std::shuffle(eligible.begin(), eligible.end(), rng);
  eligible.resize(sample_size);
  std::sort(eligible.begin(), eligible.end());
  return eligible;
}

struct Attempt {
  NodeId target = 0;
  CfKind kind = CfKind::structure;
  friend auto operator<=>(const Attempt&, const Attempt&) = default;
};

inline std::vector<Attempt> planned_attempts(const std::vector<NodeId>& targets, ExplainerChoice choice) {
  std::vector<Attempt> out;
  for (NodeId v : targets) {
    for (CfKind k : kinds_of(choice)) out.push_back({v, k});
  }
  return out;
}

struct ExplainedAttempt {
  Attempt attempt;
  ExplainOutcome outcome;
  double explain_ms = 0.0;
};

struct PreparedRun {
  Graph graph;
  GcnModel model;
  std::vector<NodeId> targets;
};

inline PreparedRun prepare(const RunConfig& c, const std::filesystem::path& checkpoint, std::ostream& log) {
  PreparedRun p;
  p.graph = load_dataset(c.dataset, &log);
  p.model = load_checkpoint(checkpoint).first;
  check_compatible(p.model, p.graph);
  p.targets = sample_targets(p.model, p.graph, c.sample_size, c.seed, &log);
  return p;
}

inline ExplainedAttempt run_explainer(const GcnModel& model, const Graph& g, Attempt a, const ExplainerParams& params) {
  const auto start = std::chrono::steady_clock::now();
  ExplainOutcome o = explain(model, g, a.target, a.kind, params);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return {a, std::move(o), ms};
}

/// Identifies everything that determines an explanation log, so a cached log can be reused.
inline std::string explanation_cache_key(const RunConfig& c, const std::filesystem::path& checkpoint) {
  std::ifstream in(checkpoint, std::ios::binary);
  const std::string model((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const nlohmann::json key = {{"checkpoint", stable_hash(model)},
                              {"dataset", to_json(c.dataset)},
                              {"explainer", to_string(c.explainer)},
                              {"explainer_params", to_json(c.explainer_params)},
                              {"sample_size", c.sample_size},
                              {"seed", c.seed}};
  return stable_hash(key.dump());
}

inline std::filesystem::path explanation_meta_path(const RunPaths& p) {
  return p.dir / "explanations.meta.json";
}

inline std::vector<ExplainedAttempt> cmd_explain(const RunConfig& c, std::ostream& log,
                                                 std::optional<std::filesystem::path> checkpoint = std::nullopt) {
  validate(c);
  const auto paths = run_paths(c);
  const auto model_path = checkpoint.value_or(paths.model);
  const PreparedRun p = prepare(c, model_path, log);
  const auto attempts = planned_attempts(p.targets, c.explainer);

  std::vector<ExplainedAttempt> out(attempts.size());
  parallel_for(attempts.size(), default_workers(),
               [&](std::size_t i) { out[i] = run_explainer(p.model, p.graph, attempts[i], c.explainer_params); });

  std::filesystem::create_directories(paths.dir);
  std::ostringstream lines;
  std::size_t found_count = 0;
  for (const auto& e : out) {
    found_count += found(e.outcome) ? 1 : 0;
    auto j = to_json(e.outcome);
    j["explain_ms"] = e.explain_ms;
    lines << j.dump() << '\n';
  }
  write_text(paths.explanations, lines.str());
  write_text(explanation_meta_path(paths),
             nlohmann::json{{"cache_key", explanation_cache_key(c, model_path)}, {"attempts", out.size()}}.dump() + "\n");
  log << "explained " << out.size() << " attempts over " << p.targets.size() << " nodes; counterfactual found for "
      << found_count << " (" << format_fixed3(out.empty() ? 0.0 : static_cast<double>(found_count) / out.size())
      << ")\n";
  return out;
}

/// The explanation log of a previous cmd_explain with the same configuration and checkpoint.
inline std::optional<std::map<Attempt, ExplainedAttempt>> load_cached_explanations(const RunConfig& c) {
  const auto paths = run_paths(c);
  const auto meta_path = explanation_meta_path(paths);
  if (!std::filesystem::exists(meta_path) || !std::filesystem::exists(paths.explanations)) return std::nullopt;
  std::ifstream meta_in(meta_path);
  const auto meta = nlohmann::json::parse(meta_in, nullptr, false);
  if (meta.is_discarded() || meta.value("cache_key", std::string{}) != explanation_cache_key(c, paths.model)) {
    return std::nullopt;
  }
  std::map<Attempt, ExplainedAttempt> out;
  std::ifstream in(paths.explanations);
  std::string line;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) return std::nullopt;
    const auto outcome = outcome_from_json(j);
    const Attempt a = std::visit([](const auto& r) { return Attempt{r.target, r.kind}; }, outcome);
    out[a] = {a, outcome, j.value("explain_ms", 0.0)};
  }
  if (out.size() != meta.value("attempts", std::size_t{0})) return std::nullopt;
  return out;
}

// ---------------------------------------------------------------------------------------------
// Run log

struct RunRecord {
  NodeId target = 0;
  CfKind explainer = CfKind::structure;
  std::string dataset;
  std::string model_name;
  std::string backend;
  std::string template_version;
  SampleStatus status = SampleStatus::not_found;
  ExplainOutcome outcome;
  std::string prompt_hash;
  std::string prompt;  // user text; the system text is the fixed template of template_version
  std::string raw_text;
  std::optional<GroundTruth> ground_truth;
  std::optional<ParseResult> parse;
  std::optional<MetricVector> metrics;
  std::string error_kind;
  std::string error_message;
  int attempt_count = 0;
  double explain_ms = 0.0;
  double llm_ms = 0.0;
  nlohmann::json debug;  // raw request/response when enabled

  Attempt key() const { return {target, explainer}; }
};

inline std::string to_string(SampleStatus s) {
  switch (s) {
    case SampleStatus::scored: return "scored";
    case SampleStatus::parse_failed: return "parse_failed";
    case SampleStatus::not_found: return "not_found";
    case SampleStatus::endpoint_error: return "error";
  }
  return "unknown";
}

inline SampleStatus parse_sample_status(const std::string& s) {
  for (auto st : {SampleStatus::scored, SampleStatus::parse_failed, SampleStatus::not_found, SampleStatus::endpoint_error}) {
    if (to_string(st) == s) return st;
  }
  throw LogError("unknown record status '" + s + "'");
}

inline nlohmann::json to_json(const ParseResult& p) {
  if (const auto* r = std::get_if<ExtractionRecord>(&p)) return {{"ok", true}, {"record", to_json(*r)}};
  return {{"ok", false}, {"error", to_json(std::get<ParseError>(p))}};
}

inline ParseResult parse_result_from_json(const nlohmann::json& j) {
  if (j.at("ok").get<bool>()) {
    auto r = detail::record_from_object(j.at("record"));
    if (!std::holds_alternative<ExtractionRecord>(r)) throw LogError("stored extraction record is malformed");
    return r;
  }
  const auto& e = j.at("error");
  return ParseError{parse_error_kind(e.at("kind").get<std::string>()), e.value("detail", std::string{})};
}

inline nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json j = {{"target", r.target},
                      {"explainer", to_string(r.explainer)},
                      {"dataset", r.dataset},
                      {"model_name", r.model_name},
                      {"backend", r.backend},
                      {"template_version", r.template_version},
                      {"status", to_string(r.status)},
                      {"result", to_json(r.outcome)},
                      {"prompt_hash", r.prompt_hash},
                      {"prompt", r.prompt},
                      {"raw_text", r.raw_text},
                      {"ground_truth", r.ground_truth ? to_json(*r.ground_truth) : nlohmann::json()},
                      {"parse", r.parse ? to_json(*r.parse) : nlohmann::json()},
                      {"metrics", r.metrics ? to_json(*r.metrics) : nlohmann::json()},
                      {"error", r.error_kind.empty() ? nlohmann::json()
                                                     : nlohmann::json{{"kind", r.error_kind}, {"message", r.error_message}}},
                      {"attempt_count", r.attempt_count},
                      {"timings", {{"explain_ms", r.explain_ms}, {"llm_ms", r.llm_ms}}}};
  if (!r.debug.is_null()) j["debug"] = r.debug;
  return j;
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
  RunRecord r;
  r.target = j.at("target").get<NodeId>();
  r.explainer = parse_cf_kind(j.at("explainer").get<std::string>());
  r.dataset = j.at("dataset").get<std::string>();
  r.model_name = j.at("model_name").get<std::string>();
  r.backend = j.at("backend").get<std::string>();
  r.template_version = j.at("template_version").get<std::string>();
  r.status = parse_sample_status(j.at("status").get<std::string>());
  r.outcome = outcome_from_json(j.at("result"));
  r.prompt_hash = j.at("prompt_hash").get<std::string>();
  r.prompt = j.at("prompt").get<std::string>();
  r.raw_text = j.at("raw_text").get<std::string>();
  if (!j.at("ground_truth").is_null()) r.ground_truth = ground_truth_from_json(j["ground_truth"]);
  if (!j.at("parse").is_null()) r.parse = parse_result_from_json(j["parse"]);
  if (!j.at("metrics").is_null()) r.metrics = metric_vector_from_json(j["metrics"]);
  if (!j.at("error").is_null()) {
    r.error_kind = j["error"].at("kind").get<std::string>();
    r.error_message = j["error"].at("message").get<std::string>();
  }
  r.attempt_count = j.at("attempt_count").get<int>();
  r.explain_ms = j.at("timings").at("explain_ms").get<double>();
  r.llm_ms = j.at("timings").at("llm_ms").get<double>();
  if (j.contains("debug")) r.debug = j["debug"];
  return r;
}

/// The record as JSON without wall-clock fields; equal for equal runs.
inline nlohmann::json comparable_json(const RunRecord& r) {
  auto j = to_json(r);
  j.erase("timings");
  return j;
}

struct LogContents {
  std::vector<RunRecord> records;
  bool had_partial_line = false;
};

/// Reads a run log. A trailing line without a newline is an interrupted write: it is dropped, and
/// with `repair` the file is truncated to the last complete line. Any other bad line is an error.
inline LogContents read_run_log(const std::filesystem::path& path, bool repair = false) {
  LogContents out;
  if (!std::filesystem::exists(path)) return out;
  std::ifstream in(path, std::ios::binary);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  const auto last_newline = text.rfind('\n');
  const std::size_t complete = last_newline == std::string::npos ? 0 : last_newline + 1;
  if (complete < text.size()) {
    out.had_partial_line = true;
    if (repair) std::filesystem::resize_file(path, complete);
  }
  std::istringstream lines(text.substr(0, complete));
  std::string line;
  std::size_t number = 0;
  while (std::getline(lines, line)) {
    ++number;
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw LogError(path.string() + ":" + std::to_string(number) + ": not valid JSON");
    try {
      out.records.push_back(run_record_from_json(j));
    } catch (const std::exception& e) {
      throw LogError(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

/// Re-parses and re-scores a record from its stored raw text.
inline std::optional<MetricVector> rescore(const RunRecord& r) {
  if (!r.ground_truth || (r.status != SampleStatus::scored && r.status != SampleStatus::parse_failed)) {
    return std::nullopt;
  }
  return compute_metrics(parse_extraction(r.raw_text), *r.ground_truth);
}

// ---------------------------------------------------------------------------------------------
// report

struct ReportSummary {
  std::vector<ReportRow> rows;
  std::size_t records = 0;
  std::size_t exported = 0;
  std::string markdown;
};

namespace detail {

inline std::string file_safe(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.' ? c : '_';
  return out;
}

inline std::string serialization_part(const std::string& prompt) {
  const auto end = prompt.find("In plain language");
  return prompt.substr(0, end == std::string::npos ? prompt.size() : end);
}

}  // namespace detail

inline ReportSummary cmd_report(const std::filesystem::path& log_path, const std::filesystem::path& out_dir,
                                GroupBy by = {}) {
  if (!std::filesystem::exists(log_path)) throw LogError("run log " + log_path.string() + " does not exist");
  const auto contents = read_run_log(log_path);
  if (contents.records.empty()) throw LogError("run log " + log_path.string() + " has no records");

  ReportSummary s;
  s.records = contents.records.size();
  std::vector<MetricSample> samples;
  std::map<GroupKey, std::map<std::string, std::size_t>> parse_errors;
  for (const auto& r : contents.records) {
    MetricSample m{{r.model_name, r.dataset, to_string(r.explainer)}, r.status, r.metrics.value_or(MetricVector{})};
    samples.push_back(m);
    if (r.parse) {
      if (const auto* e = std::get_if<ParseError>(&*r.parse)) ++parse_errors[m.key][to_string(e->kind)];
    }
  }
  s.rows = aggregate(samples, by);

  std::ostringstream md;
  md << "# Counterfactual explanation report\n\n"
     << "Log `" << log_path.filename().string() << "`: " << s.records << " records, prompt template "
     << contents.records.front().template_version << ".\n"
     << "Metric means are over evaluated explanations; parse failures count as zero. Found is the share of "
        "attempts where the explainer produced a counterfactual. Errors are endpoint failures.\n\n"
     << render_report(s.rows) << '\n';

  if (!parse_errors.empty()) {
    md << "## Parse failures by kind\n\n| Dataset | Explainer | Model | no_json | invalid_json | missing_key | bad_value |\n"
       << "|:--|:--|:--|--:|--:|--:|--:|\n";
    for (const auto& [key, counts] : parse_errors) {
      auto count = [&](const char* k) { return counts.contains(k) ? counts.at(k) : 0; };
      md << "| " << key.dataset << " | " << key.explainer << " | " << key.model_name << " | " << count("no_json")
         << " | " << count("invalid_json") << " | " << count("missing_key") << " | " << count("bad_value") << " |\n";
    }
    md << '\n';
  }

  // Human-evaluation export: rebuilt from scratch so reruns are byte-identical.
  const auto export_dir = out_dir / "human_eval";
  std::filesystem::create_directories(export_dir);
  for (const auto& entry : std::filesystem::directory_iterator(export_dir)) {
    if (entry.path().extension() == ".txt") std::filesystem::remove(entry.path());
  }
  std::vector<std::pair<std::size_t, MetricVector>> scored;
  for (std::size_t i = 0; i < contents.records.size(); ++i) {
    if (contents.records[i].metrics) scored.emplace_back(i, *contents.records[i].metrics);
  }
  for (std::size_t i : select_for_human_eval(scored)) {
    const auto& r = contents.records[i];
    const std::string name = detail::file_safe(r.model_name) + "_" + detail::file_safe(r.dataset) + "_" +
                             to_string(r.explainer) + "_node" + std::to_string(r.target) + ".txt";
    std::ostringstream t;
    const auto& m = *r.metrics;
    t << "Target node: " << r.target << "\nDataset: " << r.dataset << "\nExplainer: " << to_string(r.explainer)
      << "\nModel: " << r.model_name << "\nMetrics: TNI=" << m.tni << " TNNU=" << m.tnnu << " CCI=" << m.cci
      << " FTNF=" << m.ftnf << " CFTNF=" << m.cftnf << " CFTNN=" << m.cftnn << "\n\n"
      << detail::serialization_part(r.prompt) << "Explanation:\n"
      << r.raw_text << (r.raw_text.empty() || r.raw_text.back() != '\n' ? "\n" : "");
    write_text(export_dir / name, t.str());
    ++s.exported;
  }
  md << "## Selected for human evaluation\n\n"
     << s.exported << " of " << scored.size()
     << " evaluated explanations score 1 on at least 5 of the 6 metrics; they are exported to `human_eval/`.\n";
  s.markdown = md.str();
  write_text(out_dir / "report.md", s.markdown);
  return s;
}

// ---------------------------------------------------------------------------------------------
// run

struct RunOptions {
  /// Stop after writing this many new records (simulates an interrupted batch).
  std::optional<std::size_t> max_records;
};

struct RunSummary {
  std::size_t planned = 0;
  std::size_t skipped_existing = 0;
  std::size_t written = 0;
  std::size_t errors = 0;
  bool complete = false;
  std::optional<ReportSummary> report;
};

namespace detail {

inline RunRecord build_record(const RunConfig& c, const PreparedRun& p, const ExplainedAttempt& e) {
  RunRecord r;
  r.target = e.attempt.target;
  r.explainer = e.attempt.kind;
  r.dataset = dataset_label(c.dataset);
  r.model_name = model_label(c);
  r.backend = to_string(c.backend);
  r.template_version = c.template_version;
  r.outcome = e.outcome;
  r.explain_ms = e.explain_ms;
  const auto* result = std::get_if<CounterfactualResult>(&e.outcome);
  if (!result) {
    r.status = SampleStatus::not_found;
    return r;
  }
  try {
    const PromptBundle bundle = build_cf_prompt(p.graph, *result);
    r.prompt_hash = prompt_hash(bundle);
    r.prompt = bundle.user_text;
    r.ground_truth = bundle.ground_truth;
    const LlmResponse resp = c.backend == Backend::mock ? mock_complete(bundle, c.corruption, c.seed)
                                                        : complete(bundle, c.llm);
    r.raw_text = resp.raw_text;
    r.attempt_count = resp.attempt_count;
    r.llm_ms = resp.latency_ms;
    if (c.debug) r.debug = {{"request", resp.request_body}, {"response", resp.response_body}};
    r.parse = parse_extraction(r.raw_text);
    r.metrics = compute_metrics(*r.parse, bundle.ground_truth);
    r.status = std::holds_alternative<ExtractionRecord>(*r.parse) ? SampleStatus::scored : SampleStatus::parse_failed;
  } catch (const LlmError& err) {
    r.status = SampleStatus::endpoint_error;
    r.error_kind = to_string(err.kind());
    r.error_message = err.what();
    r.attempt_count = err.attempt_count();
  } catch (const std::exception& err) {
    r.status = SampleStatus::endpoint_error;
    r.error_kind = "internal";
    r.error_message = err.what();
  }
  return r;
}

}  // namespace detail

/// Full pipeline. Trains when no checkpoint exists and explains when no matching explanation log
/// exists, then prompts, queries, parses and scores every pending (target, explainer) attempt,
/// appending to the run log in node order. Attempts already in the log are skipped, so an
/// interrupted run resumes where it stopped.
inline RunSummary cmd_run(const RunConfig& c, std::ostream& log, RunOptions opts = {}) {
  validate(c);
  const auto paths = run_paths(c);
  std::filesystem::create_directories(paths.dir);
  if (!std::filesystem::exists(paths.model)) {
    log << "no checkpoint in " << paths.dir.string() << "; training first\n";
    cmd_train(c, log);
  }
  auto explained = load_cached_explanations(c);
  if (!explained) {
    explained.emplace();
    for (auto& e : cmd_explain(c, log)) explained->emplace(e.attempt, std::move(e));
  }
  const PreparedRun p = prepare(c, paths.model, log);
  const auto attempts = planned_attempts(p.targets, c.explainer);

  const auto existing = read_run_log(paths.runs, /*repair=*/true);
  if (existing.had_partial_line) log << "note: dropped an incomplete trailing line from " << paths.runs.string() << '\n';
  std::set<Attempt> done;
  for (const auto& r : existing.records) {
    if (r.template_version != c.template_version || r.dataset != dataset_label(c.dataset) ||
        r.model_name != model_label(c)) {
      throw LogError("run log " + paths.runs.string() + " belongs to a different configuration (dataset " + r.dataset +
                     ", model " + r.model_name + ", template " + r.template_version + ")");
    }
    done.insert(r.key());
  }

  RunSummary s;
  s.planned = attempts.size();
  std::vector<Attempt> pending;
  for (const auto& a : attempts) {
    if (done.contains(a)) {
      ++s.skipped_existing;
    } else {
      pending.push_back(a);
    }
  }
  const std::size_t todo = std::min(pending.size(), opts.max_records.value_or(pending.size()));

  // Workers fill slots; this thread writes them strictly in order so the log stays sorted.
  std::vector<std::optional<RunRecord>> slots(todo);
  std::mutex mutex;
  std::condition_variable ready;
  std::exception_ptr worker_failure;
  std::thread pool([&] {
    try {
      parallel_for(todo, static_cast<std::size_t>(c.llm.max_in_flight), [&](std::size_t i) {
        auto rec = detail::build_record(c, p, explained->at(pending[i]));
        std::lock_guard lock(mutex);
        slots[i] = std::move(rec);
        ready.notify_all();
      });
    } catch (...) {
      std::lock_guard lock(mutex);
      worker_failure = std::current_exception();
      ready.notify_all();
    }
  });
  for (std::size_t i = 0; i < todo; ++i) {
    std::unique_lock lock(mutex);
    ready.wait(lock, [&] { return slots[i].has_value() || worker_failure; });
    if (!slots[i]) break;
    const RunRecord rec = std::move(*slots[i]);
    slots[i].reset();
    lock.unlock();
    append_line(paths.runs, to_json(rec).dump());
    ++s.written;
    if (rec.status == SampleStatus::endpoint_error) {
      ++s.errors;
      log << "error on node " << rec.target << " (" << to_string(rec.explainer) << "): " << rec.error_message << '\n';
    }
  }
  pool.join();
  if (worker_failure) std::rethrow_exception(worker_failure);

  s.complete = s.skipped_existing + s.written == s.planned;
  log << "run log " << paths.runs.string() << ": " << s.written << " new records, " << s.skipped_existing
      << " already present, " << s.planned << " planned\n";
  if (s.complete && s.planned > 0) {
    s.report = cmd_report(paths.runs, paths.dir);
    log << s.report->markdown;
  } else if (!s.complete) {
    log << "run incomplete; rerun to resume\n";
  }
  return s;
}

}  // namespace cfx
