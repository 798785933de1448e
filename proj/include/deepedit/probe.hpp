#pragma once
// Probing: estimates how often a model reproduces an expected object by
// sampling it k times per query. Responders abstract the model; the
// graph-backed mock answers from a KnowledgeGraph so whole experiments can
// run offline and deterministically.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "deepedit/error.hpp"
#include "deepedit/kg_core.hpp"
#include "deepedit/metrics.hpp"
#include "deepedit/text.hpp"

namespace deepedit {

struct EndpointConfig {
  std::string base_url;
  std::string model_name;
  int samples_per_query = 5;
  double temperature = 0.7;
  int max_tokens = 256;
  std::chrono::milliseconds request_timeout{60'000};
  int max_parallel = 4;
  // Name of the environment variable holding the bearer token; empty means no auth header.
  std::string auth;
  int max_attempts = 3;
  std::chrono::milliseconds retry_backoff{1'000};

  void validate() const {
    if (samples_per_query < 1) throw Error(ErrorCode::ConfigError, "samples_per_query must be >= 1");
    if (max_parallel < 1) throw Error(ErrorCode::ConfigError, "max_parallel must be >= 1");
    if (temperature < 0.0) throw Error(ErrorCode::ConfigError, "temperature must be >= 0");
    if (max_attempts < 1) throw Error(ErrorCode::ConfigError, "max_attempts must be >= 1");
  }
};

struct Exchange {
  std::string query;
  std::string answer;
};

struct ProbeQuery {
  std::string query_id;
  std::string text;
  std::string expected_object;
  std::vector<std::string> aliases;
  // Fact(s) the query is about. The mock answers from these; real endpoints ignore them.
  Path tag;
  // Prior turns threaded in conversation mode.
  std::vector<Exchange> history;
};

struct StepResult {
  std::string query_id;
  int samples = 0;
  int hits = 0;
  std::optional<double> p;  // hits / samples; absent when the query failed
  std::optional<std::vector<std::string>> raw_responses;
  std::optional<std::string> error;

  friend bool operator==(const StepResult&, const StepResult&) = default;
};

enum class Phase { Pre, Post };

inline std::string_view to_string(Phase p) { return p == Phase::Pre ? "pre" : "post"; }

struct ProbeRecord {
  std::string chain_id;
  Phase phase = Phase::Pre;
  std::vector<StepResult> steps;

  friend bool operator==(const ProbeRecord&, const ProbeRecord&) = default;
};

struct HitCount {
  int hits = 0;
  double p = 0.0;
};

inline bool is_hit(const std::string& response, const std::string& expected_object,
                   const std::vector<std::string>& aliases) {
  const auto haystack = text::normalized_tokens(response);
  if (text::contains_token_run(haystack, text::normalized_tokens(expected_object))) return true;
  return std::any_of(aliases.begin(), aliases.end(), [&](const std::string& alias) {
    return text::contains_token_run(haystack, text::normalized_tokens(alias));
  });
}

inline HitCount estimate_probability(const std::vector<std::string>& responses, const std::string& expected_object,
                                     const std::vector<std::string>& aliases = {}) {
  if (responses.empty()) throw Error(ErrorCode::EmptyResponses, "no responses for '" + expected_object + "'");
  HitCount out;
  for (const auto& r : responses) out.hits += is_hit(r, expected_object, aliases) ? 1 : 0;
  out.p = static_cast<double>(out.hits) / static_cast<double>(responses.size());
  return out;
}

class Responder {
 public:
  virtual ~Responder() = default;

  // One sampled generation for `query`. Implementations must be safe to call concurrently.
  virtual std::string complete(const ProbeQuery& query, int sample_index) const = 0;

  // Total log-score of `continuation` after `prompt`; nullopt when the
  // endpoint cannot score continuations.
  virtual std::optional<double> continuation_logprob(const ProbeQuery& prompt, const std::string& continuation) const {
    (void)prompt;
    (void)continuation;
    return std::nullopt;
  }

  virtual bool is_mock() const { return false; }
};

// Deterministic responder backed by a knowledge graph. A query tagged with a
// single triplet gets that triplet's object when the edge exists, otherwise
// whatever the graph stores for (subject, relation), otherwise the
// distractor. A multi-hop tag is answered with its terminal object iff every
// hop exists. With probability `noise` a sample flips between knowing and
// not knowing. REDACTED placeholders count as not stored.
class MockResponder final : public Responder {
 public:
  static constexpr std::string_view kDistractor = "I am not sure.";
  static constexpr double kUnknownLogprob = -6.907755278982137;  // ln(1e-3)

  MockResponder(KnowledgeGraph graph, double noise = 0.0, std::uint64_t seed = 0)
      : graph_(std::move(graph)), noise_(noise), seed_(seed) {
    if (!(noise_ >= 0.0 && noise_ < 1.0)) throw Error(ErrorCode::ConfigError, "noise must be in [0, 1)");
  }

  const KnowledgeGraph& graph() const { return graph_; }

  std::string complete(const ProbeQuery& query, int sample_index) const override {
    if (query.tag.empty()) throw Error(ErrorCode::UnknownQueryTag, "query '" + query.query_id + "' carries no fact tag");
    std::string answer;
    bool knows = false;
    if (query.tag.size() == 1) {
      const auto& t = query.tag.front();
      if (graph_.has_edge(t)) {
        answer = t.object;
        knows = true;
      } else {
        std::vector<std::string> stored;
        for (const auto& e : graph_.edges_matching(t.subject, t.relation)) {
          if (!is_redacted(e.object)) stored.push_back(e.object);
        }
        answer = stored.empty() ? std::string(kDistractor) : text::join(stored, ", ");
      }
    } else {
      knows = std::all_of(query.tag.begin(), query.tag.end(), [&](const Triplet& t) { return graph_.has_edge(t); });
      answer = knows ? query.tag.back().object : std::string(kDistractor);
    }
    if (noise_ > 0.0 && uniform(query.query_id, sample_index) < noise_) {
      answer = knows ? std::string(kDistractor) : query.tag.back().object;
    }
    return answer;
  }

  std::optional<double> continuation_logprob(const ProbeQuery& prompt, const std::string& continuation) const override {
    if (prompt.tag.empty()) {
      throw Error(ErrorCode::UnknownQueryTag, "prompt '" + prompt.query_id + "' carries no fact tag");
    }
    const auto& t = prompt.tag.front();
    for (const auto& e : graph_.edges_matching(t.subject, t.relation)) {
      if (e.object == continuation && !is_redacted(e.object)) return 0.0;
    }
    return kUnknownLogprob;
  }

  bool is_mock() const override { return true; }

  // Uniform draw in [0, 1) keyed by (seed, query_id, sample_index), so the
  // result does not depend on call order or thread scheduling.
  double uniform(const std::string& query_id, int sample_index) const {
    return sample_uniform(seed_, query_id, sample_index);
  }

  static double sample_uniform(std::uint64_t seed, const std::string& query_id, int sample_index) {
    const std::uint64_t h = text::fnv1a(query_id);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32),
                      static_cast<std::uint32_t>(sample_index)};
    std::mt19937_64 rng(seq);
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
  }

 private:
  KnowledgeGraph graph_;
  double noise_;
  std::uint64_t seed_;
};

// Replays canned responses: the first rule whose `match` occurs in the query
// text answers, cycling through its responses by sample index. Unmatched
// tagged queries go to the fallback responder; everything else gets
// `default_response`.
class ScriptedResponder final : public Responder {
 public:
  struct Rule {
    std::string match;
    std::vector<std::string> responses;
  };

  explicit ScriptedResponder(std::vector<Rule> rules, std::shared_ptr<const Responder> fallback = nullptr,
                             std::string default_response = std::string(MockResponder::kDistractor))
      : rules_(std::move(rules)), fallback_(std::move(fallback)), default_response_(std::move(default_response)) {}

  std::string complete(const ProbeQuery& query, int sample_index) const override {
    for (const auto& rule : rules_) {
      if (!rule.responses.empty() && query.text.find(rule.match) != std::string::npos) {
        return rule.responses[static_cast<std::size_t>(sample_index) % rule.responses.size()];
      }
    }
    if (fallback_ && !query.tag.empty()) return fallback_->complete(query, sample_index);
    return default_response_;
  }

  std::optional<double> continuation_logprob(const ProbeQuery& prompt, const std::string& continuation) const override {
    return fallback_ ? fallback_->continuation_logprob(prompt, continuation) : std::nullopt;
  }

  bool is_mock() const override { return true; }

 private:
  std::vector<Rule> rules_;
  std::shared_ptr<const Responder> fallback_;
  std::string default_response_;
};

// Runs fn(0..n-1) on up to `workers` threads. Exceptions escaping fn are rethrown after all workers stop.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const auto threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

// One completion with the configured retry policy for transport faults.
inline std::string complete_with_retry(const Responder& responder, const EndpointConfig& config,
                                       const ProbeQuery& query, int sample_index) {
  auto delay = config.retry_backoff;
  for (int attempt = 1;; ++attempt) {
    try {
      return responder.complete(query, sample_index);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::TransportError || attempt >= config.max_attempts) throw;
    }
    std::this_thread::sleep_for(delay);
    delay *= 2;
  }
}

struct ProbeOptions {
  bool keep_raw_responses = false;
};

inline StepResult score_responses(const ProbeQuery& q, std::vector<std::string> responses, bool keep_raw) {
  StepResult r;
  r.query_id = q.query_id;
  r.samples = static_cast<int>(responses.size());
  const auto hc = estimate_probability(responses, q.expected_object, q.aliases);
  r.hits = hc.hits;
  r.p = hc.p;
  if (keep_raw) r.raw_responses = std::move(responses);
  return r;
}

inline StepResult failed_step(const ProbeQuery& q, int samples, const std::string& why) {
  StepResult r;
  r.query_id = q.query_id;
  r.samples = samples;
  r.error = why;
  return r;
}

// Samples every query k times in a fresh context. Results follow input
// order; a query whose transport keeps failing is recorded as failed
// without aborting the batch.
inline std::vector<StepResult> probe_queries(const Responder& responder, const EndpointConfig& config,
                                             const std::vector<ProbeQuery>& queries, ProbeOptions options = {}) {
  config.validate();
  std::vector<StepResult> results(queries.size());
  parallel_for(queries.size(), config.max_parallel, [&](std::size_t i) {
    const auto& q = queries[i];
    std::vector<std::string> responses;
    try {
      for (int s = 0; s < config.samples_per_query; ++s) {
        responses.push_back(complete_with_retry(responder, config, q, s));
      }
    } catch (const Error& e) {
      if (e.code() != ErrorCode::TransportError) throw;
      results[i] = failed_step(q, config.samples_per_query, e.what());
      return;
    }
    results[i] = score_responses(q, std::move(responses), options.keep_raw_responses);
  });
  return results;
}

// Conversation mode for one chain: sample s of step j sees the questions and
// sample-s answers of steps 0..j-1.
inline std::vector<StepResult> probe_conversation(const Responder& responder, const EndpointConfig& config,
                                                  const std::vector<ProbeQuery>& steps, ProbeOptions options = {}) {
  config.validate();
  std::vector<std::vector<std::string>> responses(steps.size());
  try {
    for (int s = 0; s < config.samples_per_query; ++s) {
      std::vector<Exchange> history;
      for (std::size_t j = 0; j < steps.size(); ++j) {
        ProbeQuery q = steps[j];
        q.history = history;
        auto answer = complete_with_retry(responder, config, q, s);
        history.push_back({q.text, answer});
        responses[j].push_back(std::move(answer));
      }
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::TransportError) throw;
    std::vector<StepResult> failed;
    for (const auto& q : steps) failed.push_back(failed_step(q, config.samples_per_query, e.what()));
    return failed;
  }
  std::vector<StepResult> out;
  for (std::size_t j = 0; j < steps.size(); ++j) {
    out.push_back(score_responses(steps[j], std::move(responses[j]), options.keep_raw_responses));
  }
  return out;
}

// Efficacy-style comparison from continuation scores: p = exp(total log-score).
inline PreferenceCase logprob_preference(const Responder& responder, const ProbeQuery& prompt,
                                         const std::string& new_object, const std::string& old_object,
                                         PromptFamily family = PromptFamily::Direct) {
  const auto lp_new = responder.continuation_logprob(prompt, new_object);
  const auto lp_old = responder.continuation_logprob(prompt, old_object);
  if (!lp_new || !lp_old) throw Error(ErrorCode::ScoringUnsupported, "endpoint cannot score continuations");
  return PreferenceCase{prompt.query_id, family, std::exp(*lp_new), std::exp(*lp_old), false};
}

// Fallback when scoring is unsupported: hit frequencies of both objects over k samples.
inline PreferenceCase sampled_preference(const Responder& responder, const EndpointConfig& config,
                                         const ProbeQuery& prompt, const std::string& new_object,
                                         const std::string& old_object, PromptFamily family = PromptFamily::Direct) {
  config.validate();
  std::vector<std::string> responses;
  for (int s = 0; s < config.samples_per_query; ++s) {
    responses.push_back(complete_with_retry(responder, config, prompt, s));
  }
  const auto hit_new = estimate_probability(responses, new_object);
  const auto hit_old = estimate_probability(responses, old_object);
  return PreferenceCase{prompt.query_id, family, hit_new.p, hit_old.p, true};
}

// Scored preference when available, sampled otherwise.
inline PreferenceCase preference(const Responder& responder, const EndpointConfig& config, const ProbeQuery& prompt,
                                 const std::string& new_object, const std::string& old_object,
                                 PromptFamily family = PromptFamily::Direct) {
  try {
    return logprob_preference(responder, prompt, new_object, old_object, family);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::ScoringUnsupported) throw;
  }
  return sampled_preference(responder, config, prompt, new_object, old_object, family);
}

}  // namespace deepedit
