#pragma once
// Graph construction loop:
//   validate (query the model, human refinement, discard after k_max misses)
//     -> expand (chain-of-thought answer, sentence facts, triplet extraction)
//     -> review (accept / reject / edit / add)
//     -> synthesize (insert edge, re-enumerate seed chains, sequence queries)
//     -> validate the new chains
// The Pipeline class runs this as a resumable state machine that parks at
// review gates and checkpoints to JSON after every transition.

#include <algorithm>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepedit/dataset_io.hpp"
#include "deepedit/error.hpp"
#include "deepedit/kg_core.hpp"
#include "deepedit/probe.hpp"
#include "deepedit/text.hpp"

namespace deepedit {

// ---------------------------------------------------------------------------
// Query templates

struct QueryTemplates {
  // Question for a single fact. {subject}, {relation}.
  std::string triplet_query = "What is the {relation} of {subject}?";
  // Question for a multi-hop chain. {subject} = first subject, {chain} =
  // intermediate entities, {relation} = last relation.
  std::string chain_query = "Starting from {subject} and going through {chain}, what is the {relation}?";
  // Chain-of-thought prompt. {query}.
  std::string cot =
      "Answer the question below. Think step by step and write your reasoning as short, complete sentences, "
      "one fact per sentence, then state the final answer in a sentence of its own.\n"
      "Question: {query}";
  // Fact-extraction prompt. {fact}.
  std::string fact_extraction =
      "Extract every factual relationship stated in the sentence below as a triplet. Write one triplet per line "
      "in the exact form (subject, relation, object) and output nothing else.\n"
      "Sentence: {fact}";
  // Relation-specific question forms, keyed by relation label.
  std::map<std::string, std::string> relation_queries;
  // Chain question forms keyed by the chain's last relation.
  std::map<std::string, std::string> chain_relation_queries;

  static QueryTemplates defaults() {
    QueryTemplates t;
    t.relation_queries = {
        {"school", "Where did {subject} study?"},
        {"studied at", "Where did {subject} study?"},
        {"house", "Which house was {subject} sorted into?"},
        {"belongs to", "Which school does {subject} belong to?"},
        {"classmate", "Who was a classmate of {subject}?"},
        {"subject", "Which subject does {subject} study?"},
        {"taught by", "Who teaches {subject}?"},
        {"country of citizenship", "What is the country of citizenship of {subject}?"},
        {"child", "Who is {subject}'s child?"},
        {"created by", "Who was {subject} created by?"},
        {"spouse", "Who is {subject} married to?"},
        {"sport", "Which sport is {subject} associated with?"},
        {"country of origin", "Which country was {subject} created in?"},
        {"developer", "Who is the developer of {subject}?"},
        {"work location", "Which city did {subject} work in?"},
        {"employer", "Who is the employer of {subject}?"},
        {"produced by", "Which company is {subject} produced by?"},
    };
    t.chain_relation_queries = {
        {"taught by", "Who teaches {chain} to {subject}?"},
        {"school", "Where did {subject} study, given {chain}?"},
    };
    return t;
  }

  // Loads overrides from a directory: triplet_query.txt, chain_query.txt,
  // cot.txt, fact_extraction.txt and tab-separated relations.tsv /
  // chain_relations.tsv ("relation<TAB>template" per line). Missing files
  // keep the defaults.
  static QueryTemplates load(const std::filesystem::path& dir) {
    auto t = defaults();
    auto read_text = [&](const char* name, std::string& slot) {
      const auto path = dir / name;
      if (!std::filesystem::exists(path)) return;
      auto content = read_file(path);
      while (!content.empty() && (content.back() == '\n' || content.back() == '\r')) content.pop_back();
      slot = content;
    };
    auto read_table = [&](const char* name, std::map<std::string, std::string>& slot) {
      const auto path = dir / name;
      if (!std::filesystem::exists(path)) return;
      std::istringstream in(read_file(path));
      std::size_t line_no = 0;
      for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (text::collapse_whitespace(line).empty() || line[0] == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
          throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(line_no) + ":1: expected a tab");
        }
        slot[text::collapse_whitespace(line.substr(0, tab))] = line.substr(tab + 1);
      }
    };
    read_text("triplet_query.txt", t.triplet_query);
    read_text("chain_query.txt", t.chain_query);
    read_text("cot.txt", t.cot);
    read_text("fact_extraction.txt", t.fact_extraction);
    read_table("relations.tsv", t.relation_queries);
    read_table("chain_relations.tsv", t.chain_relation_queries);
    return t;
  }
};

namespace detail {

inline std::string render(std::string tpl, const std::map<std::string, std::string>& values) {
  for (const auto& [key, value] : values) tpl = text::replace_all(std::move(tpl), "{" + key + "}", value);
  return tpl;
}

inline void require_labels(const Triplet& t) {
  if (text::collapse_whitespace(t.subject).empty() || text::collapse_whitespace(t.relation).empty() ||
      text::collapse_whitespace(t.object).empty()) {
    throw Error(ErrorCode::MalformedInput, "triplet with an empty label: (" + t.subject + ", " + t.relation + ", " +
                                               t.object + ")");
  }
}

inline std::string finish_query(std::string query, const std::string& object) {
  query = text::collapse_whitespace(query);
  if (text::contains_token_run(text::normalized_tokens(query), text::normalized_tokens(object))) {
    throw Error(ErrorCode::MalformedInput, "generated query '" + query + "' reveals the object '" + object + "'");
  }
  return query;
}

}  // namespace detail

// Question about one fact; never mentions the object.
inline std::string generate_query(const Triplet& t, const QueryTemplates& templates) {
  detail::require_labels(t);
  auto it = templates.relation_queries.find(t.relation);
  const auto& tpl = it != templates.relation_queries.end() ? it->second : templates.triplet_query;
  return detail::finish_query(detail::render(tpl, {{"subject", t.subject}, {"relation", t.relation}}), t.object);
}

// Question for a path; a single-hop path falls back to the triplet form.
inline std::string generate_query(const Path& chain, const QueryTemplates& templates) {
  if (chain.empty()) throw Error(ErrorCode::MalformedInput, "empty chain");
  for (std::size_t i = 0; i < chain.size(); ++i) {
    detail::require_labels(chain[i]);
    if (i > 0 && chain[i - 1].object != chain[i].subject) {
      throw Error(ErrorCode::MalformedInput, "chain hop " + std::to_string(i + 1) + " does not continue from '" +
                                                 chain[i - 1].object + "'");
    }
  }
  if (chain.size() == 1) return generate_query(chain.front(), templates);
  std::vector<std::string> middle;
  for (std::size_t i = 1; i < chain.size(); ++i) middle.push_back(chain[i].subject);
  const auto& last = chain.back();
  auto it = templates.chain_relation_queries.find(last.relation);
  const auto& tpl = it != templates.chain_relation_queries.end() ? it->second : templates.chain_query;
  return detail::finish_query(
      detail::render(tpl, {{"subject", chain.front().subject}, {"chain", text::join(middle, " and ")},
                           {"relation", last.relation}}),
      last.object);
}

// ---------------------------------------------------------------------------
// Validation

struct PipelineConfig {
  int k_max = 3;
  int l_max = kMaxChainLength;
  int max_iterations = 8;  // chain-of-thought expansions per run
  QueryTemplates templates = QueryTemplates::defaults();
  EndpointConfig endpoint;

  void validate() const {
    if (k_max < 1) throw Error(ErrorCode::ConfigError, "k_max must be >= 1");
    if (l_max < 1 || l_max > kMaxChainLength) throw Error(ErrorCode::ConfigError, "l_max must be in [1, 5]");
    if (max_iterations < 0) throw Error(ErrorCode::ConfigError, "max_iterations must be >= 0");
    endpoint.validate();
  }
};

enum class ValidationStatus { Validated, NeedsReview, Discarded };

inline std::string_view to_string(ValidationStatus s) {
  switch (s) {
    case ValidationStatus::Validated: return "validated";
    case ValidationStatus::NeedsReview: return "needs_review";
    case ValidationStatus::Discarded: return "discarded";
  }
  return "discarded";
}

struct ValidationOutcome {
  ValidationStatus status = ValidationStatus::Discarded;
  int attempt = 0;
  std::string query;
  std::string response_excerpt;
  Path input;  // the (possibly refined) fact or chain
};

struct Refinement {
  std::string query;
  std::optional<Path> input;  // replacement triplet/chain, if the human changed it
};

// Returns nullopt to retry the same query unchanged.
using Refiner = std::function<std::optional<Refinement>(const ValidationOutcome&)>;

struct AttemptResult {
  bool hit = false;
  std::string excerpt;
};

// One validation round: sample the endpoint and look for the terminal object (p > 0).
inline AttemptResult validation_attempt(const Path& input, const std::string& query, const Responder& responder,
                                        const PipelineConfig& config) {
  ProbeQuery q;
  q.query_id = "validate:" + input.back().key() + (input.size() > 1 ? "#" + std::to_string(input.size()) : "");
  q.text = query;
  q.expected_object = input.back().object;
  q.aliases = input.back().object_aliases;
  q.tag = input;
  ProbeOptions opts;
  opts.keep_raw_responses = true;
  auto results = probe_queries(responder, config.endpoint, {q}, opts);
  const auto& r = results.front();
  if (!r.p) throw Error(ErrorCode::EndpointFailure, r.error.value_or("endpoint failure"));
  AttemptResult out;
  out.hit = *r.p > 0.0;
  if (r.raw_responses && !r.raw_responses->empty()) out.excerpt = r.raw_responses->front().substr(0, 200);
  return out;
}

inline ValidationOutcome validate_knowledge(Path input, const Responder& responder, const PipelineConfig& config,
                                            const Refiner& refine = {}) {
  config.validate();
  auto query = generate_query(input, config.templates);
  ValidationOutcome outcome;
  for (int attempt = 0; attempt < config.k_max; ++attempt) {
    const auto res = validation_attempt(input, query, responder, config);
    outcome = ValidationOutcome{res.hit ? ValidationStatus::Validated : ValidationStatus::NeedsReview, attempt, query,
                                res.excerpt, input};
    if (res.hit) return outcome;
    if (attempt + 1 < config.k_max && refine) {
      if (auto r = refine(outcome)) {
        query = r->query;
        if (r->input) input = *r->input;
      }
    }
  }
  outcome.status = ValidationStatus::Discarded;
  return outcome;
}

inline ValidationOutcome validate_knowledge(const Triplet& input, const Responder& responder,
                                            const PipelineConfig& config, const Refiner& refine = {}) {
  return validate_knowledge(Path{input}, responder, config, refine);
}

// ---------------------------------------------------------------------------
// Candidate generation

enum class ReviewState { Pending, Accepted, Rejected, Edited, HumanAdded };

inline std::string_view to_string(ReviewState s) {
  switch (s) {
    case ReviewState::Pending: return "pending";
    case ReviewState::Accepted: return "accepted";
    case ReviewState::Rejected: return "rejected";
    case ReviewState::Edited: return "edited";
    case ReviewState::HumanAdded: return "human_added";
  }
  return "pending";
}

inline ReviewState review_state_from_string(const std::string& s) {
  for (auto st : {ReviewState::Pending, ReviewState::Accepted, ReviewState::Rejected, ReviewState::Edited,
                  ReviewState::HumanAdded}) {
    if (to_string(st) == s) return st;
  }
  throw Error(ErrorCode::InvariantViolation, "unknown review state '" + s + "'");
}

struct CandidateTriplet {
  Triplet triplet;
  std::string source_query;
  std::string cot_excerpt;
  ReviewState review = ReviewState::Pending;
  std::optional<Triplet> edited;  // set iff review == Edited

  // The triplet that goes forward if this candidate is kept.
  std::optional<Triplet> accepted() const {
    switch (review) {
      case ReviewState::Accepted:
      case ReviewState::HumanAdded: return triplet;
      case ReviewState::Edited: return edited;
      default: return std::nullopt;
    }
  }
};

// Sentence-level facts: split on . ! ? (followed by whitespace or end) and
// newlines; fragments under three tokens are dropped.
inline std::vector<std::string> segment_facts(const std::string& response) {
  std::vector<std::string> facts;
  std::string current;
  auto flush = [&] {
    auto s = text::collapse_whitespace(current);
    if (text::split_whitespace(s).size() >= 3) facts.push_back(std::move(s));
    current.clear();
  };
  for (std::size_t i = 0; i < response.size(); ++i) {
    const char c = response[i];
    if (c == '\n') {
      flush();
      continue;
    }
    current.push_back(c);
    const bool terminator = c == '.' || c == '!' || c == '?';
    if (terminator && (i + 1 == response.size() || std::isspace(static_cast<unsigned char>(response[i + 1])))) flush();
  }
  flush();
  return facts;
}

namespace detail {

inline std::string trim_label(std::string s) {
  s = text::collapse_whitespace(s);
  while (!s.empty() && (s.front() == '"' || s.front() == '\'')) s.erase(s.begin());
  while (!s.empty() && (s.back() == '"' || s.back() == '\'')) s.pop_back();
  return text::collapse_whitespace(s);
}

}  // namespace detail

struct ParsedTriplets {
  std::vector<Triplet> triplets;
  std::vector<std::string> malformed;
};

// Parses every "(subject, relation, object)" group in `output`. The object
// absorbs any further commas. Groups with fewer than three parts or an empty
// part are reported as malformed.
inline ParsedTriplets parse_triplets(const std::string& output) {
  ParsedTriplets out;
  std::size_t pos = 0;
  while ((pos = output.find('(', pos)) != std::string::npos) {
    const auto close = output.find(')', pos + 1);
    if (close == std::string::npos) {
      out.malformed.push_back(output.substr(pos));
      break;
    }
    const auto reopen = output.find('(', pos + 1);
    if (reopen != std::string::npos && reopen < close) {
      pos = reopen;
      continue;
    }
    const auto inner = output.substr(pos + 1, close - pos - 1);
    std::vector<std::string> parts;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= inner.size(); ++i) {
      if (i == inner.size() || (inner[i] == ',' && parts.size() < 2)) {
        parts.push_back(detail::trim_label(inner.substr(start, i - start)));
        start = i + 1;
      }
    }
    const bool ok = parts.size() == 3 && !parts[0].empty() && !parts[1].empty() && !parts[2].empty();
    if (ok) {
      out.triplets.push_back(make_triplet(parts[0], parts[1], parts[2]));
    } else {
      out.malformed.push_back(output.substr(pos, close - pos + 1));
    }
    pos = close + 1;
  }
  return out;
}

struct CandidateBatch {
  std::string cot_response;
  std::vector<CandidateTriplet> candidates;
  // Facts whose extraction produced no parseable triplet.
  std::vector<std::string> unparsed_facts;
};

inline CandidateBatch cot_generate_candidates(const std::string& query, const Responder& responder,
                                              const QueryTemplates& templates,
                                              const EndpointConfig& endpoint = EndpointConfig{}) {
  CandidateBatch batch;
  ProbeQuery cot;
  cot.query_id = "cot:" + query;
  cot.text = detail::render(templates.cot, {{"query", query}});
  batch.cot_response = complete_with_retry(responder, endpoint, cot, 0);
  for (const auto& fact : segment_facts(batch.cot_response)) {
    ProbeQuery extract;
    extract.query_id = "extract:" + fact;
    extract.text = detail::render(templates.fact_extraction, {{"fact", fact}});
    const auto parsed = parse_triplets(complete_with_retry(responder, endpoint, extract, 0));
    if (parsed.triplets.empty()) batch.unparsed_facts.push_back(fact);
    for (const auto& t : parsed.triplets) {
      batch.candidates.push_back(CandidateTriplet{t, query, fact, ReviewState::Pending, std::nullopt});
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Review

enum class ReviewAction { Accept, Reject, Edit, Add };

inline std::string_view to_string(ReviewAction a) {
  switch (a) {
    case ReviewAction::Accept: return "accept";
    case ReviewAction::Reject: return "reject";
    case ReviewAction::Edit: return "edit";
    case ReviewAction::Add: return "add";
  }
  return "accept";
}

inline ReviewAction review_action_from_string(const std::string& s) {
  for (auto a : {ReviewAction::Accept, ReviewAction::Reject, ReviewAction::Edit, ReviewAction::Add}) {
    if (to_string(a) == s) return a;
  }
  throw Error(ErrorCode::InvalidEdit, "unknown review action '" + s + "'");
}

struct ReviewDecision {
  ReviewAction action = ReviewAction::Accept;
  std::optional<std::size_t> index;  // required except for Add
  std::optional<Triplet> triplet;    // required for Edit and Add
};

struct ReviewResult {
  std::vector<CandidateTriplet> candidates;
  std::vector<Triplet> accepted;
};

// Applies reviewer decisions. Accepted, edited and human-added triplets are
// returned (in candidate order) for another validation round.
inline ReviewResult apply_review(std::vector<CandidateTriplet> candidates, const std::vector<ReviewDecision>& decisions) {
  for (const auto& d : decisions) {
    if (d.action == ReviewAction::Add) {
      if (!d.triplet) throw Error(ErrorCode::InvalidEdit, "add needs a triplet");
      try {
        validate_triplet(*d.triplet);
      } catch (const Error& e) {
        throw Error(ErrorCode::InvalidEdit, e.what());
      }
      candidates.push_back(CandidateTriplet{*d.triplet, "", "", ReviewState::HumanAdded, std::nullopt});
      continue;
    }
    if (!d.index || *d.index >= candidates.size()) {
      throw Error(ErrorCode::IndexOutOfRange, "decision index " + (d.index ? std::to_string(*d.index) : "none") +
                                                  " with " + std::to_string(candidates.size()) + " candidates");
    }
    auto& c = candidates[*d.index];
    switch (d.action) {
      case ReviewAction::Accept:
        c.review = ReviewState::Accepted;
        c.edited.reset();
        break;
      case ReviewAction::Reject:
        c.review = ReviewState::Rejected;
        c.edited.reset();
        break;
      case ReviewAction::Edit:
        if (!d.triplet) throw Error(ErrorCode::InvalidEdit, "edit needs a replacement triplet");
        try {
          validate_triplet(*d.triplet);
        } catch (const Error& e) {
          throw Error(ErrorCode::InvalidEdit, e.what());
        }
        c.review = ReviewState::Edited;
        c.edited = *d.triplet;
        break;
      case ReviewAction::Add: break;
    }
  }
  ReviewResult out;
  for (const auto& c : candidates) {
    if (auto t = c.accepted()) out.accepted.push_back(*t);
  }
  out.candidates = std::move(candidates);
  return out;
}

// ---------------------------------------------------------------------------
// Synthesis and sequencing

inline std::string chain_key(const Path& p) {
  std::vector<std::string> keys;
  for (const auto& t : p) keys.push_back(t.key());
  return text::join(keys, " > ");
}

inline std::string chain_id_for(const std::string& graph_id, std::size_t index) {
  auto n = std::to_string(index + 1);
  return graph_id + "/c" + std::string(n.size() < 3 ? 3 - n.size() : 0, '0') + n;
}

// Turns seed chains into query sequences. `known_queries` maps a triplet key
// to the query it was validated with; other hops get a generated question.
inline std::vector<ImplicationChain> sequence_chains(const KnowledgeGraph& graph, const std::vector<Path>& paths,
                                                     const QueryTemplates& templates,
                                                     const std::map<std::string, std::string>& known_queries = {}) {
  std::vector<ImplicationChain> out;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    ImplicationChain c;
    c.chain_id = chain_id_for(graph.id(), i);
    c.graph_id = graph.id();
    c.target = graph.seed();
    for (std::size_t j = 0; j < paths[i].size(); ++j) {
      const auto& hop = paths[i][j];
      QueryStep s;
      s.query_id = c.chain_id + "/q" + std::to_string(j + 1);
      auto known = known_queries.find(hop.key());
      s.query = known != known_queries.end() ? known->second : generate_query(hop, templates);
      s.expected_object = hop.object;
      s.aliases = hop.object_aliases;
      s.hop = hop;
      c.steps.push_back(std::move(s));
    }
    out.push_back(std::move(c));
  }
  return out;
}

struct SynthesisResult {
  KnowledgeGraph graph;
  std::vector<Path> chains;
  std::vector<ImplicationChain> sequences;
};

// Inserts a validated triplet and re-derives every seed chain up to l_max.
inline SynthesisResult synthesize_and_sequence(const KnowledgeGraph& graph, const Triplet& validated,
                                               const std::string& query, const PipelineConfig& config,
                                               std::map<std::string, std::string> known_queries = {}) {
  auto next = graph.has_edge(validated) ? graph : apply_delta(graph, {EditDelta::add(validated)});
  if (!query.empty()) known_queries[validated.key()] = query;
  auto chains = enumerate_chains(next, next.seed().subject, next.seed().object, config.l_max);
  auto sequences = sequence_chains(next, chains, config.templates, known_queries);
  return {std::move(next), std::move(chains), std::move(sequences)};
}

// Dataset for an already-built graph: all seed chains up to l_max.
inline DatasetBundle bundle_from_graphs(const std::vector<KnowledgeGraph>& graphs, int l_max = kMaxChainLength,
                                        const QueryTemplates& templates = QueryTemplates::defaults()) {
  DatasetBundle b;
  for (const auto& g : graphs) {
    b.graphs.push_back(g);
    auto chains = enumerate_chains(g, g.seed().subject, g.seed().object, l_max);
    for (auto& c : sequence_chains(g, chains, templates)) b.chains.push_back(std::move(c));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Pipeline state machine

struct RefinementItem {
  std::string id;
  Path input;
  std::string query;
  int attempt = 0;
  std::string response_excerpt;
};

struct CandidateItem {
  std::string id;
  CandidateTriplet candidate;
};

class Pipeline {
 public:
  enum class ChainStatus { Pending, Validated, Discarded, Unchecked };

  Pipeline(PipelineConfig config, std::shared_ptr<const Responder> responder, Triplet seed,
           std::string graph_id = "graph")
      : config_(std::move(config)), responder_(std::move(responder)), seed_(std::move(seed)),
        graph_id_(std::move(graph_id)) {
    config_.validate();
    validate_triplet(seed_);
  }

  // Queues validation of the seed fact. Call run() to make progress.
  void start() {
    if (started_) return;
    started_ = true;
    enqueue_validation(Path{seed_}, std::nullopt, 0);
    log("start " + seed_.key());
  }

  // Processes queued work until nothing is runnable; review items stay parked.
  void run() {
    while (!queue_.empty()) {
      auto item = std::move(queue_.front());
      queue_.pop_front();
      process(item);
    }
  }

  bool has_pending() const { return !refinements_.empty() || pending_candidate_count() > 0; }
  bool idle() const { return queue_.empty(); }

  const std::vector<RefinementItem>& refinements() const { return refinements_; }

  std::vector<const CandidateItem*> pending_candidates() const {
    std::vector<const CandidateItem*> out;
    for (const auto& c : candidates_) {
      if (c.candidate.review == ReviewState::Pending) out.push_back(&c);
    }
    return out;
  }

  const std::vector<CandidateItem>& candidates() const { return candidates_; }

  std::size_t pending_candidate_count() const {
    return static_cast<std::size_t>(std::count_if(candidates_.begin(), candidates_.end(), [](const CandidateItem& c) {
      return c.candidate.review == ReviewState::Pending;
    }));
  }

  // Accept / reject / edit one pending candidate. Kept triplets are queued for validation.
  void decide(const std::string& candidate_id, ReviewAction action, std::optional<Triplet> replacement = {}) {
    if (action == ReviewAction::Add) {
      if (!replacement) throw Error(ErrorCode::InvalidEdit, "add needs a triplet");
      add(*replacement);
      return;
    }
    auto it = std::find_if(candidates_.begin(), candidates_.end(),
                           [&](const CandidateItem& c) { return c.id == candidate_id; });
    if (it == candidates_.end() || it->candidate.review != ReviewState::Pending) {
      throw Error(ErrorCode::UnknownItem, "no pending candidate '" + candidate_id + "'");
    }
    auto result = apply_review({it->candidate}, {ReviewDecision{action, 0, std::move(replacement)}});
    it->candidate = result.candidates.front();
    log("review " + it->id + " " + std::string(to_string(action)));
    for (const auto& t : result.accepted) enqueue_validation(Path{t}, std::nullopt, 0);
  }

  // Human-supplied triplet; it still has to pass validation.
  std::string add(const Triplet& t) {
    auto result = apply_review({}, {ReviewDecision{ReviewAction::Add, std::nullopt, t}});
    const auto id = next_id("c");
    candidates_.push_back(CandidateItem{id, result.candidates.front()});
    seen_candidates_.insert(t.key());
    log("add " + id + " " + t.key());
    enqueue_validation(Path{t}, std::nullopt, 0);
    return id;
  }

  // Re-enters validation for a parked item with a refined query (and optionally a refined input).
  void refine(const std::string& refinement_id, Refinement r) {
    auto it = std::find_if(refinements_.begin(), refinements_.end(),
                           [&](const RefinementItem& x) { return x.id == refinement_id; });
    if (it == refinements_.end()) throw Error(ErrorCode::UnknownItem, "no pending refinement '" + refinement_id + "'");
    if (text::collapse_whitespace(r.query).empty()) throw Error(ErrorCode::InvalidEdit, "refined query is empty");
    auto item = *it;
    refinements_.erase(it);
    Path input = r.input ? *r.input : item.input;
    for (const auto& t : input) {
      try {
        validate_triplet(t);
      } catch (const Error& e) {
        throw Error(ErrorCode::InvalidEdit, e.what());
      }
    }
    log("refine " + item.id + " attempt " + std::to_string(item.attempt + 1));
    enqueue_validation(std::move(input), r.query, item.attempt + 1);
  }

  void retry(const std::string& refinement_id) {
    auto it = std::find_if(refinements_.begin(), refinements_.end(),
                           [&](const RefinementItem& x) { return x.id == refinement_id; });
    if (it == refinements_.end()) throw Error(ErrorCode::UnknownItem, "no pending refinement '" + refinement_id + "'");
    refine(refinement_id, Refinement{it->query, std::nullopt});
  }

  const std::optional<KnowledgeGraph>& graph() const { return graph_; }
  const Triplet& seed() const { return seed_; }
  const std::vector<std::string>& discarded() const { return discarded_; }
  const std::vector<std::string>& events() const { return events_; }
  int expansions() const { return expansions_; }

  // Current seed chains, minus those whose chain-level validation was discarded.
  std::vector<Path> chains() const {
    std::vector<Path> out;
    if (!graph_) return out;
    for (auto& p : enumerate_chains(*graph_, seed_.subject, seed_.object, config_.l_max)) {
      auto it = chain_status_.find(chain_key(p));
      if (it != chain_status_.end() && it->second == ChainStatus::Discarded) continue;
      out.push_back(std::move(p));
    }
    return out;
  }

  DatasetBundle bundle() const {
    DatasetBundle b;
    if (!graph_) return b;
    b.graphs.push_back(*graph_);
    b.chains = sequence_chains(*graph_, chains(), config_.templates, validated_queries_);
    return b;
  }

  nlohmann::json checkpoint() const;
  static Pipeline restore(const nlohmann::json& checkpoint, PipelineConfig config,
                          std::shared_ptr<const Responder> responder);

  // Digest of the canonical checkpoint; equal digests mean equal state.
  std::string digest() const { return text::hex64(text::fnv1a(canonical_dump(checkpoint()))); }

  void set_checkpoint_path(std::filesystem::path path) { checkpoint_path_ = std::move(path); }

 private:
  struct WorkItem {
    enum class Kind { Validate, Expand } kind = Kind::Validate;
    Path input;
    std::optional<std::string> query;
    int attempt = 0;
  };

  static std::string_view status_name(ChainStatus s) {
    switch (s) {
      case ChainStatus::Pending: return "pending";
      case ChainStatus::Validated: return "validated";
      case ChainStatus::Discarded: return "discarded";
      case ChainStatus::Unchecked: return "unchecked";
    }
    return "pending";
  }

  static ChainStatus chain_status_from_string(const std::string& s) {
    for (auto st : {ChainStatus::Pending, ChainStatus::Validated, ChainStatus::Discarded, ChainStatus::Unchecked}) {
      if (status_name(st) == s) return st;
    }
    throw Error(ErrorCode::InvariantViolation, "unknown chain status '" + s + "'");
  }

  std::string next_id(const char* prefix) { return prefix + std::to_string(++id_counter_); }

  void log(std::string event) { events_.push_back(std::move(event)); }

  void enqueue_validation(Path input, std::optional<std::string> query, int attempt) {
    queue_.push_back(WorkItem{WorkItem::Kind::Validate, std::move(input), std::move(query), attempt});
    persist();
  }

  void persist() const {
    if (!checkpoint_path_.empty()) write_file_atomic(checkpoint_path_, canonical_dump(checkpoint()));
  }

  void process(const WorkItem& item) {
    if (item.kind == WorkItem::Kind::Expand) {
      expand(item.input.front(), item.query.value_or(""));
    } else {
      validate(item);
    }
    persist();
  }

  void validate(const WorkItem& item) {
    const bool is_chain = item.input.size() > 1;
    const auto& fact = item.input.front();
    if (!is_chain && graph_ && graph_->has_edge(fact)) return;
    if (!is_chain && graph_) {
      if (const auto* existing = graph_->link(fact.subject, fact.object)) {
        discard(fact.key(), "single-link conflict with " + existing->key());
        return;
      }
    }
    std::string query;
    try {
      query = item.query ? *item.query : generate_query(item.input, config_.templates);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::MalformedInput) throw;
      if (is_chain) {
        chain_status_[chain_key(item.input)] = ChainStatus::Unchecked;
      } else {
        discard(fact.key(), e.what());
      }
      return;
    }
    const auto res = validation_attempt(item.input, query, *responder_, config_);
    const auto key = is_chain ? chain_key(item.input) : fact.key();
    if (res.hit) {
      log("validated " + key + " attempt " + std::to_string(item.attempt));
      if (is_chain) {
        chain_status_[key] = ChainStatus::Validated;
      } else {
        synthesize(fact, query);
      }
      return;
    }
    if (item.attempt + 1 >= config_.k_max) {
      if (is_chain) chain_status_[key] = ChainStatus::Discarded;
      discard(key, "no validation after " + std::to_string(config_.k_max) + " attempts");
      return;
    }
    const auto id = next_id("r");
    refinements_.push_back(RefinementItem{id, item.input, query, item.attempt, res.excerpt});
    log("needs_review " + id + " " + key);
  }

  void discard(const std::string& key, const std::string& why) {
    discarded_.push_back(key + " (" + why + ")");
    log("discarded " + key);
  }

  void synthesize(const Triplet& fact, const std::string& query) {
    std::set<std::string> before;
    if (graph_) {
      for (const auto& p : enumerate_chains(*graph_, seed_.subject, seed_.object, config_.l_max)) {
        before.insert(chain_key(p));
      }
      auto result = synthesize_and_sequence(*graph_, fact, query, config_, validated_queries_);
      graph_ = std::move(result.graph);
    } else {
      if (!(fact == seed_)) throw Error(ErrorCode::InvariantViolation, "first validated fact must be the seed");
      graph_ = KnowledgeGraph(graph_id_, seed_, {seed_});
    }
    validated_queries_[fact.key()] = query;
    log("synthesized " + fact.key());
    // Cycle newly created multi-hop chains back to validation.
    for (const auto& p : enumerate_chains(*graph_, seed_.subject, seed_.object, config_.l_max)) {
      const auto key = chain_key(p);
      if (before.count(key) || chain_status_.count(key)) continue;
      if (p.size() == 1) {
        chain_status_[key] = ChainStatus::Validated;
        continue;
      }
      chain_status_[key] = ChainStatus::Pending;
      queue_.push_back(WorkItem{WorkItem::Kind::Validate, p, std::nullopt, 0});
    }
    queue_.push_back(WorkItem{WorkItem::Kind::Expand, Path{fact}, query, 0});
  }

  void expand(const Triplet& fact, const std::string& query) {
    if (expansions_ >= config_.max_iterations) {
      log("expansion budget exhausted, skipping " + fact.key());
      return;
    }
    ++expansions_;
    const auto batch = cot_generate_candidates(query, *responder_, config_.templates, config_.endpoint);
    for (const auto& f : batch.unparsed_facts) log("unparsed fact: " + f);
    for (const auto& c : batch.candidates) {
      if (!seen_candidates_.insert(c.triplet.key()).second) continue;
      if (graph_ && graph_->has_edge(c.triplet)) continue;
      candidates_.push_back(CandidateItem{next_id("c"), c});
    }
    log("expanded " + fact.key() + " -> " + std::to_string(batch.candidates.size()) + " candidates");
  }

  PipelineConfig config_;
  std::shared_ptr<const Responder> responder_;
  Triplet seed_;
  std::string graph_id_;
  bool started_ = false;
  std::optional<KnowledgeGraph> graph_;
  std::deque<WorkItem> queue_;
  std::vector<RefinementItem> refinements_;
  std::vector<CandidateItem> candidates_;
  std::set<std::string> seen_candidates_;
  std::map<std::string, ChainStatus> chain_status_;
  std::map<std::string, std::string> validated_queries_;
  std::vector<std::string> discarded_;
  std::vector<std::string> events_;
  int expansions_ = 0;
  int id_counter_ = 0;
  std::filesystem::path checkpoint_path_;
};

namespace detail {

inline nlohmann::json path_json(const Path& p) {
  auto arr = nlohmann::json::array();
  for (const auto& t : p) arr.push_back(to_json(t));
  return arr;
}

inline Path path_from_json(const nlohmann::json& j) {
  Path p;
  for (const auto& t : j) p.push_back(triplet_from_json(t));
  return p;
}

inline nlohmann::json candidate_json(const CandidateTriplet& c) {
  nlohmann::json j = {{"triplet", to_json(c.triplet)},
                      {"source_query", c.source_query},
                      {"cot_excerpt", c.cot_excerpt},
                      {"review", std::string(to_string(c.review))}};
  if (c.edited) j["edited"] = to_json(*c.edited);
  return j;
}

inline CandidateTriplet candidate_from_json(const nlohmann::json& j) {
  CandidateTriplet c;
  c.triplet = triplet_from_json(j.at("triplet"));
  c.source_query = j.at("source_query").get<std::string>();
  c.cot_excerpt = j.at("cot_excerpt").get<std::string>();
  c.review = review_state_from_string(j.at("review").get<std::string>());
  if (j.contains("edited")) c.edited = triplet_from_json(j.at("edited"));
  return c;
}

}  // namespace detail

inline nlohmann::json Pipeline::checkpoint() const {
  using nlohmann::json;
  json queue = json::array();
  for (const auto& w : queue_) {
    json item = {{"kind", w.kind == WorkItem::Kind::Validate ? "validate" : "expand"},
                 {"input", detail::path_json(w.input)},
                 {"attempt", w.attempt}};
    if (w.query) item["query"] = *w.query;
    queue.push_back(item);
  }
  json refinements = json::array();
  for (const auto& r : refinements_) {
    refinements.push_back({{"id", r.id},
                           {"input", detail::path_json(r.input)},
                           {"query", r.query},
                           {"attempt", r.attempt},
                           {"response_excerpt", r.response_excerpt}});
  }
  json candidates = json::array();
  for (const auto& c : candidates_) candidates.push_back({{"id", c.id}, {"candidate", detail::candidate_json(c.candidate)}});
  json chain_status = json::object();
  for (const auto& [k, v] : chain_status_) chain_status[k] = std::string(status_name(v));
  return {{"config", {{"k_max", config_.k_max}, {"l_max", config_.l_max}, {"max_iterations", config_.max_iterations}}},
          {"seed", to_json(seed_)},
          {"graph_id", graph_id_},
          {"started", started_},
          {"graph", graph_ ? to_json(*graph_) : json()},
          {"queue", queue},
          {"refinements", refinements},
          {"candidates", candidates},
          {"seen_candidates", seen_candidates_},
          {"chain_status", chain_status},
          {"validated_queries", validated_queries_},
          {"discarded", discarded_},
          {"events", events_},
          {"expansions", expansions_},
          {"id_counter", id_counter_}};
}

inline Pipeline Pipeline::restore(const nlohmann::json& j, PipelineConfig config,
                                  std::shared_ptr<const Responder> responder) {
  return convert("checkpoint", [&] {
    const auto& cfg = j.at("config");
    config.k_max = cfg.at("k_max").get<int>();
    config.l_max = cfg.at("l_max").get<int>();
    config.max_iterations = cfg.at("max_iterations").get<int>();
    Pipeline p(std::move(config), std::move(responder), triplet_from_json(j.at("seed")),
               j.at("graph_id").get<std::string>());
    p.started_ = j.at("started").get<bool>();
    if (!j.at("graph").is_null()) p.graph_ = graph_from_json(j.at("graph"));
    for (const auto& w : j.at("queue")) {
      WorkItem item;
      item.kind = w.at("kind").get<std::string>() == "validate" ? WorkItem::Kind::Validate : WorkItem::Kind::Expand;
      item.input = detail::path_from_json(w.at("input"));
      if (w.contains("query")) item.query = w.at("query").get<std::string>();
      item.attempt = w.at("attempt").get<int>();
      p.queue_.push_back(std::move(item));
    }
    for (const auto& r : j.at("refinements")) {
      p.refinements_.push_back(RefinementItem{r.at("id").get<std::string>(), detail::path_from_json(r.at("input")),
                                              r.at("query").get<std::string>(), r.at("attempt").get<int>(),
                                              r.at("response_excerpt").get<std::string>()});
    }
    for (const auto& c : j.at("candidates")) {
      p.candidates_.push_back(CandidateItem{c.at("id").get<std::string>(), detail::candidate_from_json(c.at("candidate"))});
    }
    p.seen_candidates_ = j.at("seen_candidates").get<std::set<std::string>>();
    for (const auto& [k, v] : j.at("chain_status").items()) {
      p.chain_status_[k] = chain_status_from_string(v.get<std::string>());
    }
    p.validated_queries_ = j.at("validated_queries").get<std::map<std::string, std::string>>();
    p.discarded_ = j.at("discarded").get<std::vector<std::string>>();
    p.events_ = j.at("events").get<std::vector<std::string>>();
    p.expansions_ = j.at("expansions").get<int>();
    p.id_counter_ = j.at("id_counter").get<int>();
    return p;
  });
}

// ---------------------------------------------------------------------------
// Scripted review (batch mode)

// One reviewer action, addressed by item id ("c3", "r1"). `action` is one of
// accept, reject, edit, add, refine, retry.
struct ScriptedDecision {
  std::string item;
  std::string action;
  std::optional<Triplet> triplet;
  std::optional<std::string> query;
};

inline std::vector<ScriptedDecision> decisions_from_json(const nlohmann::json& doc) {
  return convert("decisions", [&] {
    std::vector<ScriptedDecision> out;
    for (const auto& d : doc.at("decisions")) {
      ScriptedDecision s;
      s.item = d.value("item", std::string());
      s.action = d.at("action").get<std::string>();
      if (d.contains("triplet")) s.triplet = triplet_from_json(d.at("triplet"));
      if (d.contains("query")) s.query = d.at("query").get<std::string>();
      out.push_back(std::move(s));
    }
    return out;
  });
}

inline void apply_scripted(Pipeline& p, const ScriptedDecision& d) {
  if (d.action == "refine") {
    p.refine(d.item, Refinement{d.query.value_or(""),
                                d.triplet ? std::optional<Path>(Path{*d.triplet}) : std::nullopt});
  } else if (d.action == "retry") {
    p.retry(d.item);
  } else {
    p.decide(d.item, review_action_from_string(d.action), d.triplet);
  }
}

// Drives a pipeline to completion with scripted decisions. Decisions for
// items that do not exist yet wait until they appear; pending candidates
// without a decision are rejected and parked refinements without one are
// retried unchanged, so the run always terminates.
inline void run_scripted(Pipeline& p, const std::vector<ScriptedDecision>& decisions) {
  std::vector<bool> used(decisions.size(), false);
  p.start();
  p.run();
  while (p.has_pending()) {
    for (std::size_t i = 0; i < decisions.size(); ++i) {
      if (used[i] || decisions[i].action != "add") continue;
      used[i] = true;
      apply_scripted(p, decisions[i]);
    }
    std::vector<std::string> pending_ids;
    for (const auto* c : p.pending_candidates()) pending_ids.push_back(c->id);
    for (const auto& r : p.refinements()) pending_ids.push_back(r.id);
    for (const auto& id : pending_ids) {
      bool handled = false;
      for (std::size_t i = 0; i < decisions.size() && !handled; ++i) {
        if (used[i] || decisions[i].item != id) continue;
        used[i] = true;
        handled = true;
        apply_scripted(p, decisions[i]);
      }
      if (handled) continue;
      if (id.front() == 'c') {
        p.decide(id, ReviewAction::Reject);
      } else {
        p.retry(id);
      }
    }
    p.run();
  }
  // Adds scripted for after the last gate.
  for (std::size_t i = 0; i < decisions.size(); ++i) {
    if (!used[i] && decisions[i].action == "add") apply_scripted(p, decisions[i]);
  }
  p.run();
}

}  // namespace deepedit
