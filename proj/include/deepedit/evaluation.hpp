#pragma once
// Pre/post probing of a dataset bundle and assembly of the metrics report.
// Chain records are keyed by chain id; contextual edges (subject != seed
// subject) are probed as one-step records keyed "<graph_id>#ctx<k>".

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "deepedit/dataset_io.hpp"
#include "deepedit/error.hpp"
#include "deepedit/kg_core.hpp"
#include "deepedit/metrics.hpp"
#include "deepedit/pipeline.hpp"
#include "deepedit/probe.hpp"

namespace deepedit {

struct ContextProbe {
  std::string record_id;
  std::string graph_id;
  Triplet edge;
};

inline std::string context_record_id(const std::string& graph_id, std::size_t k) {
  return graph_id + "#ctx" + std::to_string(k);
}

// Contextual edges of every graph, numbered from 1 in edge order.
inline std::vector<ContextProbe> context_probes(const DatasetBundle& bundle) {
  std::vector<ContextProbe> out;
  for (const auto& g : bundle.graphs) {
    const auto part = partition_contextual(g, g.seed().subject);
    for (std::size_t k = 0; k < part.contextual_edges.size(); ++k) {
      out.push_back({context_record_id(g.id(), k + 1), g.id(), part.contextual_edges[k]});
    }
  }
  return out;
}

inline ProbeQuery step_query(const QueryStep& s) {
  return ProbeQuery{s.query_id, s.query, s.expected_object, s.aliases, Path{s.hop}, {}};
}

inline ProbeQuery context_query(const ContextProbe& c, const QueryTemplates& templates) {
  return ProbeQuery{c.record_id + "/q1", generate_query(c.edge, templates), c.edge.object, c.edge.object_aliases,
                    Path{c.edge}, {}};
}

struct ProbeRunOptions {
  Phase phase = Phase::Pre;
  bool conversation = false;
  bool keep_raw_responses = false;
  QueryTemplates templates = QueryTemplates::defaults();
};

// Probes every chain step and every contextual edge. Records follow bundle
// chain order, then context order.
inline std::vector<ProbeRecord> probe_bundle(const DatasetBundle& bundle, const Responder& responder,
                                             const EndpointConfig& config, const ProbeRunOptions& options = {}) {
  ProbeOptions popts;
  popts.keep_raw_responses = options.keep_raw_responses;
  std::vector<ProbeRecord> records;
  std::vector<ProbeQuery> fresh;
  std::vector<std::pair<std::size_t, std::size_t>> slots;  // (record, step) for each fresh query

  for (const auto& c : bundle.chains) {
    ProbeRecord rec{c.chain_id, options.phase, {}};
    if (options.conversation) {
      std::vector<ProbeQuery> steps;
      for (const auto& s : c.steps) steps.push_back(step_query(s));
      rec.steps = probe_conversation(responder, config, steps, popts);
    } else {
      rec.steps.resize(c.steps.size());
      for (std::size_t j = 0; j < c.steps.size(); ++j) {
        fresh.push_back(step_query(c.steps[j]));
        slots.emplace_back(records.size(), j);
      }
    }
    records.push_back(std::move(rec));
  }
  for (const auto& ctx : context_probes(bundle)) {
    ProbeRecord rec{ctx.record_id, options.phase, {StepResult{}}};
    fresh.push_back(context_query(ctx, options.templates));
    slots.emplace_back(records.size(), 0);
    records.push_back(std::move(rec));
  }
  auto results = probe_queries(responder, config, fresh, popts);
  for (std::size_t i = 0; i < results.size(); ++i) {
    records[slots[i].first].steps[slots[i].second] = std::move(results[i]);
  }
  return records;
}

// Schema-only check of probe records against a bundle (used by --dry-run).
inline void check_probe_schema(const DatasetBundle& bundle, const std::vector<ProbeRecord>& records, Phase phase,
                               const QueryTemplates& templates = QueryTemplates::defaults());

struct TextSample {
  std::string generated;
  std::optional<std::string> reference;
};

inline std::vector<TextSample> load_text_samples(const std::filesystem::path& path) {
  const auto j = parse_json(read_file(path), path.string());
  return convert(path.string(), [&] {
    std::vector<TextSample> out;
    for (const auto& s : j.at("samples")) {
      TextSample t;
      t.generated = s.at("generated").get<std::string>();
      if (s.contains("reference") && !s.at("reference").is_null()) t.reference = s.at("reference").get<std::string>();
      out.push_back(std::move(t));
    }
    return out;
  });
}

struct ReportInputs {
  std::vector<PreferenceCase> preferences;
  std::vector<TextSample> texts;
  FluencySign fluency_sign = FluencySign::Intended;
};

namespace detail {

struct RecordIndex {
  std::map<std::string, const ProbeRecord*> by_id;
};

inline RecordIndex index_records(const std::vector<ProbeRecord>& records, Phase phase) {
  RecordIndex idx;
  for (const auto& r : records) {
    if (r.phase != phase) {
      throw Error(ErrorCode::SchemaMismatch, r.chain_id + ": expected " + std::string(to_string(phase)) +
                                                 " records, found " + std::string(to_string(r.phase)));
    }
    if (!idx.by_id.emplace(r.chain_id, &r).second) {
      throw Error(ErrorCode::SchemaMismatch, r.chain_id + ": duplicate " + std::string(to_string(phase)) + " record");
    }
  }
  return idx;
}

inline const ProbeRecord& require_record(const RecordIndex& idx, const std::string& id,
                                         const std::vector<std::string>& query_ids, Phase phase) {
  auto it = idx.by_id.find(id);
  if (it == idx.by_id.end()) {
    throw Error(ErrorCode::MissingProbes, id + ": no " + std::string(to_string(phase)) + " record");
  }
  const auto& rec = *it->second;
  if (rec.steps.size() != query_ids.size()) {
    throw Error(ErrorCode::SchemaMismatch, id + ": " + std::to_string(rec.steps.size()) + " " +
                                               std::string(to_string(phase)) + " steps, bundle has " +
                                               std::to_string(query_ids.size()));
  }
  for (std::size_t j = 0; j < query_ids.size(); ++j) {
    if (rec.steps[j].query_id != query_ids[j]) {
      throw Error(ErrorCode::SchemaMismatch, id + ": step " + std::to_string(j + 1) + " is '" +
                                                 rec.steps[j].query_id + "', expected '" + query_ids[j] + "'");
    }
  }
  return rec;
}

inline void require_probabilities(const ProbeRecord& rec) {
  for (const auto& s : rec.steps) {
    if (!s.p) {
      throw Error(ErrorCode::MissingProbes, s.query_id + ": probe failed (" + s.error.value_or("no probability") + ")");
    }
  }
}

struct Expected {
  std::vector<std::pair<std::string, std::vector<std::string>>> chains;
  std::vector<std::string> contexts;
};

inline Expected expected_records(const DatasetBundle& bundle) {
  Expected e;
  for (const auto& c : bundle.chains) {
    std::vector<std::string> ids;
    for (const auto& s : c.steps) ids.push_back(s.query_id);
    e.chains.emplace_back(c.chain_id, std::move(ids));
  }
  for (const auto& ctx : context_probes(bundle)) e.contexts.push_back(ctx.record_id);
  return e;
}

inline void reject_extras(const RecordIndex& idx, const Expected& e, Phase phase) {
  std::set<std::string> known;
  for (const auto& [id, _] : e.chains) known.insert(id);
  known.insert(e.contexts.begin(), e.contexts.end());
  for (const auto& [id, _] : idx.by_id) {
    if (!known.count(id)) {
      throw Error(ErrorCode::SchemaMismatch,
                  id + ": " + std::string(to_string(phase)) + " record does not belong to the bundle");
    }
  }
}

}  // namespace detail

inline void check_probe_schema(const DatasetBundle& bundle, const std::vector<ProbeRecord>& records, Phase phase,
                               const QueryTemplates& templates) {
  (void)templates;
  const auto idx = detail::index_records(records, phase);
  const auto expected = detail::expected_records(bundle);
  detail::reject_extras(idx, expected, phase);
  for (const auto& [id, qids] : expected.chains) detail::require_record(idx, id, qids, phase);
  for (const auto& id : expected.contexts) detail::require_record(idx, id, {id + "/q1"}, phase);
}

inline MetricsReport build_report(const DatasetBundle& bundle, const std::vector<ProbeRecord>& pre,
                                  const std::vector<ProbeRecord>& post, const ReportInputs& inputs = {}) {
  check_probe_schema(bundle, pre, Phase::Pre);
  check_probe_schema(bundle, post, Phase::Post);
  const auto pre_idx = detail::index_records(pre, Phase::Pre);
  const auto post_idx = detail::index_records(post, Phase::Post);
  const auto expected = detail::expected_records(bundle);

  std::vector<ChainObservation> chains;
  for (const auto& c : bundle.chains) {
    const auto& a = *pre_idx.by_id.at(c.chain_id);
    const auto& b = *post_idx.by_id.at(c.chain_id);
    detail::require_probabilities(a);
    detail::require_probabilities(b);
    ChainObservation obs{c.chain_id, c.length(), {}, {}};
    for (std::size_t j = 0; j < c.steps.size(); ++j) {
      obs.pre.push_back(*a.steps[j].p);
      obs.post.push_back(*b.steps[j].p);
    }
    chains.push_back(std::move(obs));
  }
  std::vector<ContextObservation> contexts;
  for (const auto& id : expected.contexts) {
    const auto& a = *pre_idx.by_id.at(id);
    const auto& b = *post_idx.by_id.at(id);
    detail::require_probabilities(a);
    detail::require_probabilities(b);
    contexts.push_back({id, *a.steps[0].p, *b.steps[0].p});
  }

  MetricsReport report;
  const auto i = ifr(chains);
  report.ifr_overall = i.overall;
  report.ifr_by_length = i.by_length;
  report.active_chain_counts = i.active_counts;
  report.ckp = ckp(contexts);

  auto rate = [&](PromptFamily f) -> std::optional<double> {
    const bool any = std::any_of(inputs.preferences.begin(), inputs.preferences.end(),
                                 [&](const PreferenceCase& c) { return c.family == f; });
    if (!any) return std::nullopt;
    return paired_preference_rate(inputs.preferences, f);
  };
  report.efficacy = rate(PromptFamily::Direct);
  report.generalization = rate(PromptFamily::Paraphrase);
  report.specificity = rate(PromptFamily::Neighborhood);

  if (!inputs.texts.empty()) {
    double f = 0.0, c = 0.0;
    std::size_t with_reference = 0;
    for (const auto& t : inputs.texts) {
      f += fluency(t.generated, inputs.fluency_sign);
      if (t.reference) {
        c += consistency(t.generated, *t.reference);
        ++with_reference;
      }
    }
    report.fluency = f / static_cast<double>(inputs.texts.size());
    if (with_reference > 0) report.consistency = c / static_cast<double>(with_reference);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Mock experiment: pre-edit model = bundle graph, post-edit model = edited graph.

struct MockExperimentConfig {
  EditScope scope = EditScope::Shallow;
  double noise = 0.0;
  std::uint64_t seed = 0;
  // Replacement for every seed object; empty picks "edited-<hash>" per graph.
  std::string new_object;
  EndpointConfig endpoint = [] {
    EndpointConfig e;
    e.base_url = "mock:";
    e.model_name = "mock";
    return e;
  }();
  bool conversation = false;
};

struct MockExperiment {
  std::vector<KnowledgeGraph> edited;
  std::vector<ProbeRecord> pre;
  std::vector<ProbeRecord> post;
  std::vector<PreferenceCase> preferences;
  MetricsReport report;
};

inline std::string default_new_object(const KnowledgeGraph& g) {
  return "edited-" + text::hex64(text::fnv1a(g.seed().key())).substr(0, 8);
}

// Routes each query to the mock of the graph that owns it.
class GraphRouter final : public Responder {
 public:
  void add(const std::string& graph_id, std::shared_ptr<const MockResponder> mock) { mocks_[graph_id] = std::move(mock); }
  void route(const std::string& query_id, const std::string& graph_id) { owner_[query_id] = graph_id; }

  std::string complete(const ProbeQuery& query, int sample_index) const override {
    return pick(query).complete(query, sample_index);
  }
  std::optional<double> continuation_logprob(const ProbeQuery& prompt, const std::string& continuation) const override {
    return pick(prompt).continuation_logprob(prompt, continuation);
  }
  bool is_mock() const override { return true; }

 private:
  const MockResponder& pick(const ProbeQuery& q) const {
    auto it = owner_.find(q.query_id);
    if (it == owner_.end()) throw Error(ErrorCode::UnknownQueryTag, "query '" + q.query_id + "' has no owning graph");
    return *mocks_.at(it->second);
  }

  std::map<std::string, std::shared_ptr<const MockResponder>> mocks_;
  std::map<std::string, std::string> owner_;
};

inline MockExperiment run_mock_experiment(const DatasetBundle& bundle, const MockExperimentConfig& config) {
  GraphRouter pre_router, post_router;
  MockExperiment out;
  for (const auto& g : bundle.graphs) {
    const auto new_object = config.new_object.empty() ? default_new_object(g) : config.new_object;
    const auto deltas = expand_edit_request(g, EditRequest{g.seed(), new_object, config.scope});
    auto edited = apply_delta(g, deltas);
    pre_router.add(g.id(), std::make_shared<MockResponder>(g, config.noise, config.seed));
    post_router.add(g.id(), std::make_shared<MockResponder>(edited, config.noise, config.seed));
    out.edited.push_back(std::move(edited));
  }
  for (const auto& c : bundle.chains) {
    for (const auto& s : c.steps) {
      pre_router.route(s.query_id, c.graph_id);
      post_router.route(s.query_id, c.graph_id);
    }
  }
  for (const auto& ctx : context_probes(bundle)) {
    pre_router.route(ctx.record_id + "/q1", ctx.graph_id);
    post_router.route(ctx.record_id + "/q1", ctx.graph_id);
  }
  ProbeRunOptions opts;
  opts.conversation = config.conversation;
  opts.phase = Phase::Pre;
  out.pre = probe_bundle(bundle, pre_router, config.endpoint, opts);
  opts.phase = Phase::Post;
  out.post = probe_bundle(bundle, post_router, config.endpoint, opts);

  const auto templates = QueryTemplates::defaults();
  for (std::size_t i = 0; i < bundle.graphs.size(); ++i) {
    const auto& g = bundle.graphs[i];
    const auto new_object = config.new_object.empty() ? default_new_object(g) : config.new_object;
    ProbeQuery prompt{g.id() + "#efficacy", generate_query(g.seed(), templates), new_object, {}, Path{g.seed()}, {}};
    post_router.route(prompt.query_id, g.id());
    out.preferences.push_back(preference(post_router, config.endpoint, prompt, new_object, g.seed().object));
  }
  out.report = build_report(bundle, out.pre, out.post, ReportInputs{out.preferences, {}, FluencySign::Intended});
  return out;
}

}  // namespace deepedit
