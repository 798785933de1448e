#pragma once
// Dataset persistence. Everything is canonical JSON (sorted keys, 2-space
// indent, UTF-8, LF, trailing newline) so files diff cleanly and re-saving a
// loaded file reproduces it byte for byte.
//
//   <name>.graph.json   {"graphs": [...], "version": "knowgic/1"}
//   <name>.chains.json  {"chains": [...], "version": "knowgic/1"}
//   <name>.probes.jsonl one ProbeRecord per line
//   <name>.report.json  MetricsReport
//   seeds.csv           category,template,subject,relation,object

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepedit/error.hpp"
#include "deepedit/kg_core.hpp"
#include "deepedit/metrics.hpp"
#include "deepedit/probe.hpp"

namespace deepedit {

inline constexpr std::string_view kFormatVersion = "knowgic/1";

using json = nlohmann::json;

struct QueryStep {
  std::string query_id;
  std::string query;
  std::string expected_object;
  std::vector<std::string> aliases;
  Triplet hop;
};

struct ImplicationChain {
  std::string chain_id;
  std::string graph_id;
  Triplet target;
  std::vector<QueryStep> steps;

  int length() const { return static_cast<int>(steps.size()); }

  Path hops() const {
    Path p;
    for (const auto& s : steps) p.push_back(s.hop);
    return p;
  }
};

struct DatasetBundle {
  std::vector<KnowledgeGraph> graphs;
  std::vector<ImplicationChain> chains;
  std::string version{kFormatVersion};

  const KnowledgeGraph* graph(const std::string& id) const {
    for (const auto& g : graphs) {
      if (g.id() == id) return &g;
    }
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// JSON mapping

inline json to_json(const Triplet& t) {
  return {{"subject", t.subject}, {"relation", t.relation}, {"object", t.object}, {"object_aliases", t.object_aliases}};
}

inline Triplet triplet_from_json(const json& j) {
  std::vector<std::string> aliases;
  if (j.contains("object_aliases")) aliases = j.at("object_aliases").get<std::vector<std::string>>();
  auto t = make_triplet(j.at("subject").get<std::string>(), j.at("relation").get<std::string>(),
                        j.at("object").get<std::string>(), std::move(aliases));
  return t;
}

inline json to_json(const KnowledgeGraph& g) {
  json edges = json::array();
  for (const auto& e : g.edges()) edges.push_back(to_json(e));
  return {{"id", g.id()}, {"seed", to_json(g.seed())}, {"entities", g.entities()}, {"edges", edges}};
}

inline KnowledgeGraph graph_from_json(const json& j) {
  std::vector<Triplet> edges;
  for (const auto& e : j.at("edges")) edges.push_back(triplet_from_json(e));
  std::set<std::string> entities;
  if (j.contains("entities")) entities = j.at("entities").get<std::set<std::string>>();
  return KnowledgeGraph(j.at("id").get<std::string>(), triplet_from_json(j.at("seed")), edges, entities);
}

inline json to_json(const QueryStep& s) {
  return {{"query_id", s.query_id},
          {"query", s.query},
          {"expected_object", s.expected_object},
          {"aliases", s.aliases},
          {"hop", to_json(s.hop)}};
}

inline QueryStep step_from_json(const json& j) {
  QueryStep s;
  s.query_id = j.at("query_id").get<std::string>();
  s.query = j.at("query").get<std::string>();
  s.expected_object = j.at("expected_object").get<std::string>();
  if (j.contains("aliases")) s.aliases = j.at("aliases").get<std::vector<std::string>>();
  s.hop = triplet_from_json(j.at("hop"));
  return s;
}

inline json to_json(const ImplicationChain& c) {
  json steps = json::array();
  for (const auto& s : c.steps) steps.push_back(to_json(s));
  return {{"chain_id", c.chain_id}, {"graph_id", c.graph_id}, {"target", to_json(c.target)}, {"steps", steps}};
}

inline ImplicationChain chain_from_json(const json& j) {
  ImplicationChain c;
  c.chain_id = j.at("chain_id").get<std::string>();
  c.graph_id = j.at("graph_id").get<std::string>();
  c.target = triplet_from_json(j.at("target"));
  for (const auto& s : j.at("steps")) c.steps.push_back(step_from_json(s));
  return c;
}

inline json to_json(const StepResult& r) {
  json j = {{"query_id", r.query_id}, {"samples", r.samples}, {"hits", r.hits}};
  if (r.p) j["p"] = *r.p;
  if (r.raw_responses) j["raw_responses"] = *r.raw_responses;
  if (r.error) j["error"] = *r.error;
  return j;
}

inline StepResult step_result_from_json(const json& j) {
  StepResult r;
  r.query_id = j.at("query_id").get<std::string>();
  r.samples = j.at("samples").get<int>();
  r.hits = j.at("hits").get<int>();
  if (j.contains("p") && !j["p"].is_null()) r.p = j["p"].get<double>();
  if (j.contains("raw_responses")) r.raw_responses = j["raw_responses"].get<std::vector<std::string>>();
  if (j.contains("error")) r.error = j["error"].get<std::string>();
  if (r.samples < 1 || r.hits < 0 || r.hits > r.samples) {
    throw Error(ErrorCode::InvariantViolation, r.query_id + ": need 0 <= hits <= samples and samples >= 1");
  }
  if (r.p && *r.p != static_cast<double>(r.hits) / static_cast<double>(r.samples)) {
    throw Error(ErrorCode::InvariantViolation, r.query_id + ": p must equal hits/samples");
  }
  return r;
}

inline json to_json(const ProbeRecord& rec) {
  json steps = json::array();
  for (const auto& s : rec.steps) steps.push_back(to_json(s));
  return {{"chain_id", rec.chain_id}, {"phase", std::string(to_string(rec.phase))}, {"steps", steps}};
}

inline ProbeRecord probe_record_from_json(const json& j) {
  ProbeRecord rec;
  rec.chain_id = j.at("chain_id").get<std::string>();
  const auto phase = j.at("phase").get<std::string>();
  if (phase != "pre" && phase != "post") throw Error(ErrorCode::InvariantViolation, "unknown phase '" + phase + "'");
  rec.phase = phase == "pre" ? Phase::Pre : Phase::Post;
  for (const auto& s : j.at("steps")) rec.steps.push_back(step_result_from_json(s));
  return rec;
}

inline json to_json(const MetricsReport& r) {
  json by_len = json::object();
  for (const auto& [n, v] : r.ifr_by_length) by_len[std::to_string(n)] = v;
  json counts = json::object();
  for (const auto& [n, c] : r.active_chain_counts) counts[std::to_string(n)] = c;
  json j = {{"ifr_overall", r.ifr_overall}, {"ifr_by_length", by_len}, {"active_chain_counts", counts}, {"ckp", r.ckp}};
  auto put = [&](const char* key, const std::optional<double>& v) {
    if (v) j[key] = *v;
  };
  put("efficacy", r.efficacy);
  put("generalization", r.generalization);
  put("specificity", r.specificity);
  put("fluency", r.fluency);
  put("consistency", r.consistency);
  return j;
}

inline MetricsReport report_from_json(const json& j) {
  MetricsReport r;
  r.ifr_overall = j.at("ifr_overall").get<double>();
  for (const auto& [k, v] : j.at("ifr_by_length").items()) r.ifr_by_length[std::stoi(k)] = v.get<double>();
  for (const auto& [k, v] : j.at("active_chain_counts").items()) r.active_chain_counts[std::stoi(k)] = v.get<int>();
  r.ckp = j.at("ckp").get<double>();
  auto get = [&](const char* key, std::optional<double>& v) {
    if (j.contains(key)) v = j[key].get<double>();
  };
  get("efficacy", r.efficacy);
  get("generalization", r.generalization);
  get("specificity", r.specificity);
  get("fluency", r.fluency);
  get("consistency", r.consistency);
  return r;
}

inline std::string_view to_string(PromptFamily f) {
  switch (f) {
    case PromptFamily::Direct: return "direct";
    case PromptFamily::Paraphrase: return "paraphrase";
    case PromptFamily::Neighborhood: return "neighborhood";
  }
  return "direct";
}

inline PromptFamily family_from_string(const std::string& s) {
  if (s == "direct") return PromptFamily::Direct;
  if (s == "paraphrase") return PromptFamily::Paraphrase;
  if (s == "neighborhood") return PromptFamily::Neighborhood;
  throw Error(ErrorCode::InvariantViolation, "unknown prompt family '" + s + "'");
}

inline json to_json(const PreferenceCase& c) {
  json j = {{"case_id", c.case_id}, {"family", std::string(to_string(c.family))}, {"p_new", c.p_new}, {"p_old", c.p_old}};
  if (c.sampled) j["mode"] = "sampled";
  return j;
}

inline PreferenceCase preference_from_json(const json& j) {
  PreferenceCase c;
  c.case_id = j.at("case_id").get<std::string>();
  c.family = family_from_string(j.at("family").get<std::string>());
  c.p_new = j.at("p_new").get<double>();
  c.p_old = j.at("p_old").get<double>();
  c.sampled = j.value("mode", std::string()) == "sampled";
  if (c.p_new < 0 || c.p_new > 1 || c.p_old < 0 || c.p_old > 1) {
    throw Error(ErrorCode::InvariantViolation, c.case_id + ": probabilities must lie in [0, 1]");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Files

inline std::string canonical_dump(const json& j) { return j.dump(2, ' ', false) + "\n"; }

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Write-temp-then-rename so readers never see a half-written file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + tmp.string());
    out << content;
    if (!out.flush()) throw Error(ErrorCode::IoError, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot rename " + tmp.string() + ": " + ec.message());
}

inline json parse_json(const std::string& content, const std::string& origin) {
  try {
    return json::parse(content);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, column = 1;
    const auto stop = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, content.size());
    for (std::size_t i = 0; i < stop; ++i) {
      if (content[i] == '\n') {
        ++line;
        column = 1;
      } else {
        ++column;
      }
    }
    throw Error(ErrorCode::ParseError,
                origin + ":" + std::to_string(line) + ":" + std::to_string(column) + ": " + e.what());
  }
}

// Runs a json -> T conversion, turning schema problems into InvariantViolation.
template <typename Fn>
auto convert(const std::string& what, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvariantViolation, what + ": " + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::InvariantViolation) throw;
    throw Error(ErrorCode::InvariantViolation, what + ": " + e.what());
  }
}

struct BundlePaths {
  std::filesystem::path graph;
  std::filesystem::path chains;
};

// Accepts "dir/name", "dir/name.graph.json" or "dir/name.chains.json".
inline BundlePaths bundle_paths(const std::filesystem::path& name) {
  std::string base = name.string();
  for (std::string_view suffix : {".graph.json", ".chains.json"}) {
    if (base.size() > suffix.size() && base.compare(base.size() - suffix.size(), suffix.size(), suffix) == 0) {
      base.resize(base.size() - suffix.size());
      break;
    }
  }
  return {base + ".graph.json", base + ".chains.json"};
}

// Checks every chain against its graph; the first offender is reported.
inline void validate_bundle(const DatasetBundle& bundle) {
  std::set<std::string> graph_ids, chain_ids, query_ids;
  for (const auto& g : bundle.graphs) {
    if (!graph_ids.insert(g.id()).second) throw Error(ErrorCode::InvariantViolation, "duplicate graph id " + g.id());
  }
  for (const auto& c : bundle.chains) {
    auto fail = [&](const std::string& reason) {
      throw Error(ErrorCode::InvariantViolation, "chain " + c.chain_id + ": " + reason);
    };
    if (!chain_ids.insert(c.chain_id).second) fail("duplicate chain id");
    const auto* g = bundle.graph(c.graph_id);
    if (g == nullptr) fail("unknown graph " + c.graph_id);
    if (c.length() < 1 || c.length() > kMaxChainLength) fail("length " + std::to_string(c.length()) + " outside 1..5");
    for (std::size_t i = 0; i < c.steps.size(); ++i) {
      const auto& s = c.steps[i];
      if (!query_ids.insert(s.query_id).second) fail("duplicate query id " + s.query_id);
      if (s.expected_object != s.hop.object) fail("step " + s.query_id + " expects a different object than its hop");
      if (i > 0 && c.steps[i - 1].hop.object != s.hop.subject) {
        fail("hop " + std::to_string(i + 1) + " subject does not continue from hop " + std::to_string(i));
      }
    }
    if (c.steps.front().hop.subject != c.target.subject) fail("first hop does not start at the target subject");
    if (c.steps.back().hop.object != c.target.object) fail("last hop does not end at the target object");
    if (!is_valid_path(*g, c.hops(), c.target.subject, c.target.object)) {
      fail("hops are not a simple path in graph " + c.graph_id);
    }
  }
}

inline json bundle_graphs_json(const DatasetBundle& b) {
  json graphs = json::array();
  for (const auto& g : b.graphs) graphs.push_back(to_json(g));
  return {{"graphs", graphs}, {"version", b.version}};
}

inline json bundle_chains_json(const DatasetBundle& b) {
  json chains = json::array();
  for (const auto& c : b.chains) chains.push_back(to_json(c));
  return {{"chains", chains}, {"version", b.version}};
}

inline void save_bundle(const DatasetBundle& bundle, const std::filesystem::path& name) {
  validate_bundle(bundle);
  const auto paths = bundle_paths(name);
  if (paths.graph.has_parent_path()) std::filesystem::create_directories(paths.graph.parent_path());
  write_file_atomic(paths.graph, canonical_dump(bundle_graphs_json(bundle)));
  write_file_atomic(paths.chains, canonical_dump(bundle_chains_json(bundle)));
}

inline DatasetBundle bundle_from_json(const json& graphs_doc, const json& chains_doc) {
  DatasetBundle b;
  b.version = convert("version", [&] { return graphs_doc.at("version").get<std::string>(); });
  const auto chains_version = convert("version", [&] { return chains_doc.at("version").get<std::string>(); });
  if (b.version != kFormatVersion || chains_version != kFormatVersion) {
    throw Error(ErrorCode::InvariantViolation, "unsupported format version '" + b.version + "'");
  }
  std::size_t i = 0;
  for (const auto& g : convert("graphs", [&] { return graphs_doc.at("graphs"); })) {
    b.graphs.push_back(convert("graph #" + std::to_string(i++), [&] { return graph_from_json(g); }));
  }
  i = 0;
  for (const auto& c : convert("chains", [&] { return chains_doc.at("chains"); })) {
    b.chains.push_back(convert("chain #" + std::to_string(i++), [&] { return chain_from_json(c); }));
  }
  validate_bundle(b);
  return b;
}

inline DatasetBundle load_bundle(const std::filesystem::path& name) {
  const auto paths = bundle_paths(name);
  const auto graphs_doc = parse_json(read_file(paths.graph), paths.graph.string());
  const auto chains_doc = parse_json(read_file(paths.chains), paths.chains.string());
  return bundle_from_json(graphs_doc, chains_doc);
}

struct ChainStats {
  std::map<int, int> by_length{{1, 0}, {2, 0}, {3, 0}, {4, 0}, {5, 0}};
  int total = 0;
};

inline ChainStats stats(const DatasetBundle& bundle) {
  ChainStats s;
  for (const auto& c : bundle.chains) {
    ++s.by_length[c.length()];
    ++s.total;
  }
  return s;
}

inline json to_json(const ChainStats& s) {
  json by = json::object();
  for (const auto& [n, c] : s.by_length) by[std::to_string(n)] = c;
  return {{"by_length", by}, {"total", s.total}};
}

// ---------------------------------------------------------------------------
// JSON Lines

inline std::string probes_jsonl(const std::vector<ProbeRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  return out;
}

inline void save_probes(const std::vector<ProbeRecord>& records, const std::filesystem::path& path) {
  write_file_atomic(path, probes_jsonl(records));
}

inline std::vector<ProbeRecord> load_probes(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<ProbeRecord> out;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (text::collapse_whitespace(line).empty()) continue;
    const auto origin = path.string() + ":" + std::to_string(line_no);
    const auto j = parse_json(line, origin);
    out.push_back(convert(origin, [&] { return probe_record_from_json(j); }));
  }
  return out;
}

struct TranscriptLine {
  std::string query_id;
  int sample_index = 0;
  std::string text;
};

inline std::vector<TranscriptLine> transcript_lines(const std::vector<StepResult>& steps) {
  std::vector<TranscriptLine> out;
  for (const auto& s : steps) {
    if (!s.raw_responses) continue;
    for (std::size_t i = 0; i < s.raw_responses->size(); ++i) {
      out.push_back({s.query_id, static_cast<int>(i), (*s.raw_responses)[i]});
    }
  }
  return out;
}

inline std::string transcripts_jsonl(const std::vector<TranscriptLine>& lines) {
  std::string out;
  for (const auto& l : lines) {
    out += json{{"query_id", l.query_id}, {"sample_index", l.sample_index}, {"text", l.text}}.dump() + "\n";
  }
  return out;
}

inline void save_report(const MetricsReport& report, const std::filesystem::path& path) {
  write_file_atomic(path, canonical_dump(to_json(report)));
}

inline MetricsReport load_report(const std::filesystem::path& path) {
  const auto j = parse_json(read_file(path), path.string());
  return convert(path.string(), [&] { return report_from_json(j); });
}

inline std::vector<PreferenceCase> load_preferences(const std::filesystem::path& path) {
  const auto j = parse_json(read_file(path), path.string());
  std::vector<PreferenceCase> out;
  for (const auto& c : convert(path.string(), [&] { return j.at("cases"); })) {
    out.push_back(convert(path.string(), [&] { return preference_from_json(c); }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Seed templates

struct SeedTemplate {
  std::string category;
  std::string query_template;
  Triplet triplet;

  // Template with the blank replaced by the subject.
  std::string instantiate() const;
};

// A blank is a run of three or more underscores.
inline std::vector<std::pair<std::size_t, std::size_t>> blank_runs(const std::string& s) {
  std::vector<std::pair<std::size_t, std::size_t>> runs;
  for (std::size_t i = 0; i < s.size();) {
    if (s[i] != '_') {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < s.size() && s[j] == '_') ++j;
    if (j - i >= 3) runs.emplace_back(i, j - i);
    i = j;
  }
  return runs;
}

inline std::string SeedTemplate::instantiate() const {
  auto runs = blank_runs(query_template);
  std::string out = query_template;
  out.replace(runs.at(0).first, runs.at(0).second, triplet.subject);
  return out;
}

// RFC 4180 subset: comma separated, double-quoted fields with "" escapes.
inline std::vector<std::vector<std::string>> parse_csv(const std::string& content, const std::string& origin) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, field_started = false;
  std::size_t line = 1, column = 0;
  auto end_field = [&] {
    row.push_back(field);
    field.clear();
    field_started = false;
  };
  for (std::size_t i = 0; i < content.size(); ++i) {
    const char c = content[i];
    ++column;
    if (quoted) {
      if (c == '"') {
        if (i + 1 < content.size() && content[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        if (c == '\n') ++line, column = 0;
        field.push_back(c);
      }
      continue;
    }
    if (c == '"') {
      if (field_started && !field.empty()) {
        throw Error(ErrorCode::ParseError, origin + ":" + std::to_string(line) + ":" + std::to_string(column) +
                                               ": quote inside unquoted field");
      }
      quoted = true;
      field_started = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\r') {
      continue;
    } else if (c == '\n') {
      end_field();
      rows.push_back(std::move(row));
      row.clear();
      ++line;
      column = 0;
    } else {
      field.push_back(c);
      field_started = true;
    }
  }
  if (quoted) throw Error(ErrorCode::ParseError, origin + ":" + std::to_string(line) + ": unterminated quote");
  if (field_started || !row.empty()) {
    end_field();
    rows.push_back(std::move(row));
  }
  return rows;
}

inline SeedTemplate make_seed(const std::string& category, const std::string& query_template,
                              const std::string& subject, const std::string& relation, const std::string& object,
                              const std::string& where) {
  if (blank_runs(query_template).size() != 1) {
    throw Error(ErrorCode::MissingPlaceholder, where + ": template must contain exactly one ____ blank: '" +
                                                   query_template + "'");
  }
  return SeedTemplate{text::collapse_whitespace(category), query_template, make_triplet(subject, relation, object)};
}

// Reads seeds from CSV (header: category,template,subject,relation,object)
// or from JSON (an array of objects with the same keys).
inline std::vector<SeedTemplate> import_seed_templates(const std::filesystem::path& path) {
  const auto content = read_file(path);
  const auto origin = path.string();
  std::vector<SeedTemplate> seeds;
  static const std::vector<std::string> kColumns{"category", "template", "subject", "relation", "object"};
  if (path.extension() == ".json") {
    const auto doc = parse_json(content, origin);
    std::size_t i = 0;
    for (const auto& row : doc) {
      const auto where = origin + "[" + std::to_string(i++) + "]";
      std::vector<std::string> v;
      for (const auto& col : kColumns) {
        v.push_back(convert(where, [&] { return row.at(col).get<std::string>(); }));
      }
      seeds.push_back(make_seed(v[0], v[1], v[2], v[3], v[4], where));
    }
    return seeds;
  }
  auto rows = parse_csv(content, origin);
  if (rows.empty()) throw Error(ErrorCode::ParseError, origin + ":1:1: missing header");
  std::map<std::string, std::size_t> index;
  for (std::size_t c = 0; c < rows[0].size(); ++c) index[text::collapse_whitespace(rows[0][c])] = c;
  for (const auto& col : kColumns) {
    if (!index.count(col)) throw Error(ErrorCode::ParseError, origin + ":1:1: missing column '" + col + "'");
  }
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() == 1 && text::collapse_whitespace(row[0]).empty()) continue;
    const auto where = origin + ":" + std::to_string(r + 1);
    if (row.size() != rows[0].size()) {
      throw Error(ErrorCode::ParseError, where + ":1: expected " + std::to_string(rows[0].size()) + " fields, got " +
                                             std::to_string(row.size()));
    }
    auto at = [&](const std::string& col) { return row[index[col]]; };
    seeds.push_back(make_seed(at("category"), at("template"), at("subject"), at("relation"), at("object"), where));
  }
  return seeds;
}

}  // namespace deepedit
