#pragma once

// Citation-network loaders (Planetoid raw text layout), vocabularies, splits and synthetic fixtures.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "cfx/graph.hpp"

namespace cfx {

class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetSpec {
  std::filesystem::path content_path;
  std::filesystem::path cites_path;
  std::optional<std::filesystem::path> vocab_path;
  std::optional<std::filesystem::path> class_names_path;
};

struct LoadStats {
  std::size_t skipped_cites = 0;
  std::size_t self_citations = 0;
};

struct SplitMasks {
  std::vector<bool> train;
  std::vector<bool> test;

  std::size_t train_count() const { return static_cast<std::size_t>(std::count(train.begin(), train.end(), true)); }
  std::size_t test_count() const { return static_cast<std::size_t>(std::count(test.begin(), test.end(), true)); }
};

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  // Tabs are the canonical separator; runs of spaces are tolerated.
  while (in >> field) out.push_back(field);
  return out;
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  return lines;
}

}  // namespace detail

/// One word per line; synthesizes `word_<i>` when no path is given.
inline std::vector<std::string> load_vocabulary(const std::optional<std::filesystem::path>& path,
                                                std::size_t feature_dim) {
  std::vector<std::string> words;
  if (!path) {
    words.reserve(feature_dim);
    for (std::size_t i = 0; i < feature_dim; ++i) words.push_back("word_" + std::to_string(i));
    return words;
  }
  words = detail::read_lines(*path);
  if (words.size() != feature_dim) {
    throw LoadError("vocabulary " + path->string() + " has " + std::to_string(words.size()) +
                    " lines, expected " + std::to_string(feature_dim));
  }
  std::set<std::string> seen;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (!seen.insert(words[i]).second) {
      throw LoadError("duplicate vocabulary word '" + words[i] + "' at line " + std::to_string(i + 1));
    }
  }
  return words;
}

inline Graph load_citation_dataset(const DatasetSpec& spec, LoadStats* stats = nullptr) {
  const auto content = detail::read_lines(spec.content_path);
  std::unordered_map<std::string, NodeId> id_of;
  std::vector<FeatureRow> features;
  std::vector<std::string> label_strings;
  std::optional<std::size_t> dim;

  for (std::size_t ln = 0; ln < content.size(); ++ln) {
    const auto where = spec.content_path.string() + ":" + std::to_string(ln + 1);
    const auto fields = detail::split_fields(content[ln]);
    if (fields.size() < 3) throw LoadError(where + ": expected id, features and label");
    const std::size_t d = fields.size() - 2;
    if (dim && *dim != d) {
      throw LoadError(where + ": feature_dim " + std::to_string(d) + " differs from " + std::to_string(*dim));
    }
    dim = d;
    if (!id_of.emplace(fields.front(), features.size()).second) {
      throw LoadError(where + ": duplicate paper id " + fields.front());
    }
    FeatureRow row;
    for (std::size_t j = 0; j < d; ++j) {
      const auto& f = fields[j + 1];
      if (f == "1") {
        row.push_back(j);
      } else if (f != "0") {
        throw LoadError(where + ": non-binary feature '" + f + "'");
      }
    }
    features.push_back(std::move(row));
    label_strings.push_back(fields.back());
  }
  const std::size_t n = features.size();
  const std::size_t feature_dim = dim.value_or(0);

  std::vector<std::string> class_names;
  if (spec.class_names_path) {
    class_names = detail::read_lines(*spec.class_names_path);
  } else {
    std::set<std::string> distinct(label_strings.begin(), label_strings.end());
    class_names.assign(distinct.begin(), distinct.end());
  }
  std::map<std::string, ClassId> class_of;
  for (std::size_t c = 0; c < class_names.size(); ++c) class_of.emplace(class_names[c], c);
  std::vector<ClassId> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto it = class_of.find(label_strings[i]);
    if (it == class_of.end()) {
      throw LoadError(spec.content_path.string() + ":" + std::to_string(i + 1) + ": label '" + label_strings[i] +
                      "' is not a known class name");
    }
    labels[i] = it->second;
  }

  std::vector<Edge> edges;
  LoadStats local_stats;
  if (!spec.cites_path.empty()) {
    const auto cites = detail::read_lines(spec.cites_path);
    for (std::size_t ln = 0; ln < cites.size(); ++ln) {
      const auto fields = detail::split_fields(cites[ln]);
      if (fields.empty()) continue;
      if (fields.size() != 2) {
        throw LoadError(spec.cites_path.string() + ":" + std::to_string(ln + 1) + ": expected two ids");
      }
      auto a = id_of.find(fields[0]);
      auto b = id_of.find(fields[1]);
      if (a == id_of.end() || b == id_of.end()) {
        ++local_stats.skipped_cites;
        continue;
      }
      if (a->second == b->second) {
        ++local_stats.self_citations;
        continue;
      }
      edges.emplace_back(a->second, b->second);
    }
  }
  if (stats) *stats = local_stats;

  return Graph(n, std::move(edges), std::move(features), feature_dim, std::move(labels),
               load_vocabulary(spec.vocab_path, feature_dim), std::move(class_names));
}

/// Writes a graph back out in the raw layout, using node indices as paper ids.
inline void save_citation_dataset(const Graph& g, const DatasetSpec& spec) {
  {
    std::ofstream out(spec.content_path);
    if (!out) throw LoadError("cannot write " + spec.content_path.string());
    for (NodeId v = 0; v < g.node_count(); ++v) {
      out << v;
      const auto& row = g.feature_row(v);
      std::size_t next = 0;
      for (WordId w = 0; w < g.feature_dim(); ++w) {
        const bool on = next < row.size() && row[next] == w;
        if (on) ++next;
        out << '\t' << (on ? '1' : '0');
      }
      out << '\t' << g.class_names()[g.labels()[v]] << '\n';
    }
  }
  {
    std::ofstream out(spec.cites_path);
    if (!out) throw LoadError("cannot write " + spec.cites_path.string());
    for (const auto& e : g.edges()) out << e.u << '\t' << e.v << '\n';
  }
  if (spec.vocab_path) {
    std::ofstream out(*spec.vocab_path);
    for (const auto& w : g.vocabulary()) out << w << '\n';
  }
  if (spec.class_names_path) {
    std::ofstream out(*spec.class_names_path);
    for (const auto& c : g.class_names()) out << c << '\n';
  }
}

/// Vocabulary words present in v's (possibly overridden) row, in vocabulary order.
inline std::vector<std::string> words_for_node(const GraphView& g, NodeId v) {
  check_node(g, v);
  std::vector<std::string> out;
  for (WordId w : g.feature_row(v)) out.push_back(g.base().vocabulary()[w]);
  return out;
}

inline SplitMasks make_split(const Graph& g, double train_fraction, std::uint64_t seed) {
  const std::size_t n = g.node_count();
  if (n < 2) throw GraphError("make_split needs at least two nodes");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw GraphError("train_fraction must lie in (0,1)");
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  if (n_train == 0 || n_train == n) {
    throw GraphError("train_fraction " + std::to_string(train_fraction) + " leaves an empty train or test set");
  }
  std::vector<NodeId> order(n);
  for (NodeId i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  SplitMasks masks{std::vector<bool>(n, false), std::vector<bool>(n, true)};
  for (std::size_t i = 0; i < n_train; ++i) {
    masks.train[order[i]] = true;
    masks.test[order[i]] = false;
  }
  return masks;
}

enum class SyntheticKind { two_community, barbell, random_er };

struct SyntheticParams {
  std::size_t n = 12;          // two_community, random_er
  double p_in = 0.8;           // two_community
  double p_out = 0.1;          // two_community
  std::size_t m = 4;           // barbell clique size
  double p = 0.1;              // random_er
  std::size_t words_per_class = 4;
  std::size_t noise_words = 4;
  double word_prob = 0.6;      // chance a node carries each of its block's indicator words
  double noise_prob = 0.2;     // chance of each noise word and of each cross-block indicator word
};

inline SyntheticKind parse_synthetic_kind(const std::string& s) {
  if (s == "two_community") return SyntheticKind::two_community;
  if (s == "barbell") return SyntheticKind::barbell;
  if (s == "random_er") return SyntheticKind::random_er;
  throw GraphError("unknown synthetic kind '" + s + "'");
}

/// Deterministic fixtures. Nodes are split into two blocks (labels 0 and 1); every node carries its
/// block's indicator words with probability word_prob, and each other-block indicator and noise word
/// with probability noise_prob. Vocabulary: `a<i>` for class 0, `b<i>` for class 1, `n<i>` noise.
inline Graph make_synthetic(SyntheticKind kind, const SyntheticParams& params, std::uint64_t seed) {
  auto check_prob = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw GraphError(std::string(name) + " must lie in [0,1]");
  };
  check_prob(params.p_in, "p_in");
  check_prob(params.p_out, "p_out");
  check_prob(params.p, "p");
  check_prob(params.word_prob, "word_prob");
  check_prob(params.noise_prob, "noise_prob");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::size_t n = 0;
  std::vector<ClassId> labels;
  std::vector<Edge> edges;
  switch (kind) {
    case SyntheticKind::two_community: {
      if (params.n < 2) throw GraphError("two_community needs n >= 2");
      n = params.n;
      for (NodeId i = 0; i < n; ++i) labels.push_back(i < n / 2 ? 0 : 1);
      for (NodeId i = 0; i < n; ++i) {
        for (NodeId j = i + 1; j < n; ++j) {
          const double p = labels[i] == labels[j] ? params.p_in : params.p_out;
          if (unit(rng) < p) edges.emplace_back(i, j);
        }
      }
      break;
    }
    case SyntheticKind::barbell: {
      if (params.m < 2) throw GraphError("barbell needs m >= 2");
      const std::size_t m = params.m;
      n = 2 * m;
      for (NodeId i = 0; i < n; ++i) labels.push_back(i < m ? 0 : 1);
      for (std::size_t block = 0; block < 2; ++block) {
        for (NodeId i = 0; i < m; ++i) {
          for (NodeId j = i + 1; j < m; ++j) edges.emplace_back(block * m + i, block * m + j);
        }
      }
      edges.emplace_back(m - 1, m);
      break;
    }
    case SyntheticKind::random_er: {
      if (params.n < 1) throw GraphError("random_er needs n >= 1");
      n = params.n;
      for (NodeId i = 0; i < n; ++i) labels.push_back(i % 2);
      for (NodeId i = 0; i < n; ++i) {
        for (NodeId j = i + 1; j < n; ++j) {
          if (unit(rng) < params.p) edges.emplace_back(i, j);
        }
      }
      break;
    }
  }

  const std::size_t k = params.words_per_class;
  std::vector<std::string> vocab;
  for (std::size_t i = 0; i < k; ++i) vocab.push_back("a" + std::to_string(i));
  for (std::size_t i = 0; i < k; ++i) vocab.push_back("b" + std::to_string(i));
  for (std::size_t i = 0; i < params.noise_words; ++i) vocab.push_back("n" + std::to_string(i));

  std::vector<FeatureRow> features(n);
  for (NodeId v = 0; v < n; ++v) {
    for (WordId w = 0; w < vocab.size(); ++w) {
      const bool own = w < 2 * k && (w / k) == labels[v];
      if (unit(rng) < (own ? params.word_prob : params.noise_prob)) features[v].push_back(w);
    }
  }
  const std::size_t dim = vocab.size();
  return Graph(n, std::move(edges), std::move(features), dim, std::move(labels), std::move(vocab),
               {"class_a", "class_b"});
}

}  // namespace cfx
