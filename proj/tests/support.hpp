#pragma once
// Fixtures and independent oracles shared by the unit tests and the
// acceptance binary. Oracles deliberately avoid the library's algorithms.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "deepedit/dataset_io.hpp"
#include "deepedit/kg_core.hpp"
#include "deepedit/metrics.hpp"
#include "deepedit/pipeline.hpp"
#include "deepedit/probe.hpp"

namespace fixtures {

using namespace deepedit;

inline std::filesystem::path dir() { return DEEPEDIT_FIXTURES; }
inline std::filesystem::path path(const std::string& name) { return dir() / name; }

// hp-mini: e1..e5 plus the isolated entity McGonagall.
inline Triplet e1() { return make_triplet("HP", "school", "Hogwarts", {"Hogwarts School"}); }
inline Triplet e2() { return make_triplet("HP", "house", "Gryffindor"); }
inline Triplet e3() { return make_triplet("Gryffindor", "belongs to", "Hogwarts"); }
inline Triplet e4() { return make_triplet("HP", "classmate", "Hermione", {"Hermione Granger"}); }
inline Triplet e5() { return make_triplet("Hermione", "school", "Hogwarts"); }

inline KnowledgeGraph hp_mini() {
  return KnowledgeGraph("hp-mini", e1(), {e1(), e2(), e3(), e4(), e5()}, {"McGonagall"});
}

inline DatasetBundle hp_mini_bundle() { return load_bundle(path("hp_mini")); }

struct RandomGraph {
  KnowledgeGraph graph;
  std::vector<std::string> nodes;
};

// Random directed graph on n >= 2 nodes; each ordered pair gets an edge with
// probability `density`, respecting the single-link rule.
inline RandomGraph random_graph(std::mt19937_64& rng, int n, double density) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> rel(0, 2);
  std::vector<std::string> nodes;
  for (int i = 0; i < n; ++i) nodes.push_back("n" + std::to_string(i));
  std::vector<Triplet> edges;
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) {
      if (a == b || u(rng) >= density) continue;
      edges.push_back(make_triplet(nodes[a], "r" + std::to_string(rel(rng)), nodes[b]));
    }
  }
  if (edges.empty()) edges.push_back(make_triplet(nodes[0], "r0", nodes[1]));
  std::set<std::string> extra(nodes.begin(), nodes.end());
  const auto seed = edges.front();
  return {KnowledgeGraph("random", seed, edges, extra), nodes};
}

// Brute force over vertex sequences: every ordered selection of distinct
// intermediate entities, kept when each consecutive pair is linked.
inline std::set<std::vector<std::string>> oracle_paths(const KnowledgeGraph& g, const std::string& source,
                                                      const std::string& target, int max_len) {
  std::map<std::pair<std::string, std::string>, std::string> link;
  std::vector<std::string> others;
  for (const auto& e : g.edges()) link[{e.subject, e.object}] = e.key();
  for (const auto& v : g.entities()) {
    if (v != source && v != target) others.push_back(v);
  }
  std::set<std::vector<std::string>> out;
  if (source == target) return out;
  std::vector<std::string> middle;
  std::vector<bool> used(others.size(), false);
  auto emit = [&] {
    std::vector<std::string> keys;
    std::string at = source;
    for (std::size_t i = 0; i <= middle.size(); ++i) {
      const auto& to = i < middle.size() ? middle[i] : target;
      auto it = link.find({at, to});
      if (it == link.end()) return;
      keys.push_back(it->second);
      at = to;
    }
    out.insert(keys);
  };
  auto extend = [&](auto&& self) -> void {
    emit();
    if (static_cast<int>(middle.size()) + 1 >= max_len) return;
    for (std::size_t i = 0; i < others.size(); ++i) {
      if (used[i]) continue;
      used[i] = true;
      middle.push_back(others[i]);
      self(self);
      middle.pop_back();
      used[i] = false;
    }
  };
  extend(extend);
  return out;
}

inline std::vector<std::string> keys_of(const Path& p) {
  std::vector<std::string> keys;
  for (const auto& t : p) keys.push_back(t.key());
  return keys;
}

inline std::set<std::vector<std::string>> path_set(const std::vector<Path>& paths) {
  std::set<std::vector<std::string>> out;
  for (const auto& p : paths) out.insert(keys_of(p));
  return out;
}

// Naive IFR straight from the definition, summing in long double.
inline double oracle_ifr(const std::vector<ChainObservation>& obs) {
  long double num = 0, den = 0;
  for (const auto& o : obs) {
    long double r = 1, rp = 1;
    for (int j = 0; j < o.length; ++j) {
      r *= o.pre[j];
      rp *= o.post[j];
    }
    if (r == 0) continue;
    const long double w = 1.0L / std::sqrt(static_cast<long double>(o.length));
    num += rp / r * w;
    den += w;
  }
  return den == 0 ? 0.0 : static_cast<double>(num / den);
}

inline double oracle_ckp(const std::vector<ContextObservation>& obs) {
  long double s = 0;
  int n = 0;
  for (const auto& o : obs) {
    if (o.pre == 0) continue;
    s += static_cast<long double>(o.post) / o.pre;
    ++n;
  }
  return n == 0 ? 1.0 : static_cast<double>(s / n);
}

inline double grid_probability(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> step(0, 20);
  return step(rng) * 0.05;
}

inline ChainObservation random_chain(std::mt19937_64& rng, const std::string& id) {
  std::uniform_int_distribution<int> len(1, 5);
  ChainObservation o{id, len(rng), {}, {}};
  for (int j = 0; j < o.length; ++j) {
    o.pre.push_back(grid_probability(rng));
    o.post.push_back(grid_probability(rng));
  }
  return o;
}

inline ContextObservation random_context(std::mt19937_64& rng, const std::string& id) {
  return {id, grid_probability(rng), grid_probability(rng)};
}

// Shannon entropy (bits) of the n-gram distribution, counting with a map of token vectors.
inline double oracle_entropy(const std::vector<std::string>& tokens, std::size_t n) {
  std::map<std::vector<std::string>, int> counts;
  int total = 0;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<long>(i), tokens.begin() + static_cast<long>(i + n))];
    ++total;
  }
  double h = 0;
  for (const auto& [_, c] : counts) {
    const double p = static_cast<double>(c) / total;
    h += -p * std::log(p) / std::log(2.0);
  }
  return h;
}

inline std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

// TF-IDF cosine: build dense vectors over the sorted joint vocabulary, L2-normalize, dot.
inline double oracle_tfidf_cosine(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::string> vocab(a.begin(), a.end());
  vocab.insert(vocab.end(), b.begin(), b.end());
  std::sort(vocab.begin(), vocab.end());
  vocab.erase(std::unique(vocab.begin(), vocab.end()), vocab.end());
  std::vector<double> va, vb;
  for (const auto& w : vocab) {
    const double ca = static_cast<double>(std::count(a.begin(), a.end(), w));
    const double cb = static_cast<double>(std::count(b.begin(), b.end(), w));
    const double df = (ca > 0) + (cb > 0);
    const double idf = std::log(3.0 / (1.0 + df)) + 1.0;
    va.push_back(ca * idf);
    vb.push_back(cb * idf);
  }
  auto normalize = [](std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x * x;
    for (double& x : v) x /= std::sqrt(s);
  };
  normalize(va);
  normalize(vb);
  double dot = 0;
  for (std::size_t i = 0; i < va.size(); ++i) dot += va[i] * vb[i];
  return dot;
}

// 64-bit FNV-1a, written out independently of the library.
inline std::uint64_t oracle_fnv(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Reference per-sample uniform draw for the noisy mock.
inline double oracle_uniform(std::uint64_t seed, const std::string& query_id, int sample) {
  const auto h = oracle_fnv(query_id);
  std::vector<std::uint32_t> words{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                                   static_cast<std::uint32_t>(h & 0xffffffffu), static_cast<std::uint32_t>(h >> 32),
                                   static_cast<std::uint32_t>(sample)};
  std::seed_seq seq(words.begin(), words.end());
  std::mt19937_64 engine(seq);
  return std::ldexp(static_cast<double>(engine() >> 11), -53);
}

// Synthetic bundle shaped like the published benchmark: one graph per seed
// row and disjoint detour paths, so chain counts per length are exact.
inline DatasetBundle knowgic_shaped(const std::vector<SeedTemplate>& seeds, const std::map<int, int>& counts) {
  struct Build {
    Triplet seed;
    std::vector<Triplet> edges;
  };
  std::vector<Build> builds;
  for (const auto& s : seeds) builds.push_back({s.triplet, {s.triplet}});
  std::size_t next = 0;
  int serial = 0;
  for (const auto& [len, count] : counts) {
    const int extra = len == 1 ? count - static_cast<int>(seeds.size()) : count;
    if (extra < 0) throw Error(ErrorCode::InvariantViolation, "fewer 1-step chains than seed graphs");
    if (len == 1 && extra > 0) throw Error(ErrorCode::InvariantViolation, "one direct edge per graph");
    if (len == 1) continue;
    for (int c = 0; c < count; ++c) {
      auto& b = builds[next++ % builds.size()];
      std::string prev = b.seed.subject;
      for (int h = 1; h < len; ++h) {
        const auto node = "node " + std::to_string(++serial);
        b.edges.push_back(make_triplet(prev, "step", node));
        prev = node;
      }
      b.edges.push_back(make_triplet(prev, "step", b.seed.object));
    }
  }
  std::vector<KnowledgeGraph> graphs;
  for (std::size_t i = 0; i < builds.size(); ++i) {
    graphs.emplace_back("knowgic-" + std::to_string(i + 1), builds[i].seed, builds[i].edges);
  }
  return bundle_from_graphs(graphs);
}

inline const std::map<int, int>& table4_counts() {
  static const std::map<int, int> counts{{1, 21}, {2, 75}, {3, 102}, {4, 159}, {5, 201}};
  return counts;
}

// Scripted reasoning transcript for "Where did Harry Potter study?" and the
// per-sentence extraction replies.
inline std::vector<ScriptedResponder::Rule> appendix_h_script() {
  return {
      {"Question: Where did Harry Potter study?",
       {"Harry Potter is the main character of a fantasy series. Harry Potter's education is covered in the series. "
        "Harry Potter studied at Hogwarts. He was sorted into the house Gryffindor. Gryffindor is one of the houses "
        "of Hogwarts. So Hogwarts is his school."}},
      {"Sentence: Harry Potter is the main character of a fantasy series.",
       {"(Harry Potter, character in, fantasy series)"}},
      {"Sentence: Harry Potter's education is covered in the series.",
       {"(Harry Potter's education, covered in, series)"}},
      {"Sentence: Harry Potter studied at Hogwarts.", {"(Harry Potter, studied at, Hogwarts)"}},
      {"Sentence: He was sorted into the house Gryffindor.", {"(Harry Potter, house, Gryffindor)"}},
      {"Sentence: Gryffindor is one of the houses of Hogwarts.", {"(Gryffindor, belongs to, Hogwarts)"}},
      {"Sentence: So Hogwarts is his school.", {"No relationship to extract."}},
  };
}

// What the scripted "model" knows: answers validation probes.
inline KnowledgeGraph hp_world() {
  const auto seed = make_triplet("Harry Potter", "school", "Hogwarts");
  return KnowledgeGraph("hp-world", seed,
                        {seed, make_triplet("Harry Potter", "house", "Gryffindor"),
                         make_triplet("Gryffindor", "belongs to", "Hogwarts"),
                         make_triplet("Harry Potter", "classmate", "Hermione Granger"),
                         make_triplet("Hermione Granger", "school", "Hogwarts"),
                         make_triplet("Draco Malfoy", "house", "Slytherin"),
                         make_triplet("Slytherin", "belongs to", "Hogwarts"),
                         make_triplet("Harry Potter", "subject", "Transfiguration"),
                         make_triplet("Transfiguration", "taught by", "Minerva McGonagall")});
}

inline std::shared_ptr<const Responder> hp_scripted_model() {
  return std::make_shared<ScriptedResponder>(appendix_h_script(), std::make_shared<MockResponder>(hp_world(), 0.0, 7));
}

inline PipelineConfig pipeline_config() {
  PipelineConfig c;
  c.endpoint.base_url = "mock:";
  c.endpoint.model_name = "mock";
  c.endpoint.max_parallel = 2;
  c.endpoint.retry_backoff = std::chrono::milliseconds(1);
  return c;
}

inline std::vector<ScriptedDecision> review_script() {
  return decisions_from_json(parse_json(read_file(path("hp_decisions.json")), "hp_decisions.json"));
}

}  // namespace fixtures
