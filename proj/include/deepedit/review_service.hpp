#pragma once
// Review gates over HTTP. A ReviewSession owns the pipeline; every accepted
// mutation bumps the revision by one and rewrites the checkpoint. Callers
// must echo the current revision on every mutation.
//
//   GET  /api/session                     summary
//   GET  /api/candidates                  candidate triplets
//   POST /api/candidates/{id}/decision    {action, triplet?, revision}
//   GET  /api/refinements                 parked validation failures
//   POST /api/refinements/{id}            {query, triplet?, revision}
//   GET  /api/graph                       nodes and edges
//   POST /api/iterate                     {revision}

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <utility>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "deepedit/dataset_io.hpp"
#include "deepedit/error.hpp"
#include "deepedit/pipeline.hpp"

namespace deepedit {

class ReviewSession {
 public:
  ReviewSession(std::string session_id, Pipeline pipeline, std::filesystem::path checkpoint = {},
                std::uint64_t revision = 0)
      : session_id_(std::move(session_id)), pipeline_(std::move(pipeline)), checkpoint_(std::move(checkpoint)),
        revision_(revision) {
    pipeline_.start();
    pipeline_.run();
    persist();
  }

  // Restarts from a checkpoint written by a previous session.
  static std::unique_ptr<ReviewSession> load(const std::filesystem::path& checkpoint, PipelineConfig config,
                                             std::shared_ptr<const Responder> responder) {
    const auto j = parse_json(read_file(checkpoint), checkpoint.string());
    auto pipeline = Pipeline::restore(convert("checkpoint", [&] { return j.at("pipeline"); }), std::move(config),
                                      std::move(responder));
    return std::unique_ptr<ReviewSession>(
        new ReviewSession(Restored{}, convert("checkpoint", [&] { return j.at("session_id").get<std::string>(); }),
                          std::move(pipeline), checkpoint,
                          convert("checkpoint", [&] { return j.at("revision").get<std::uint64_t>(); })));
  }

  std::uint64_t revision() const {
    std::shared_lock lock(mu_);
    return revision_;
  }

  nlohmann::json session_json() const {
    std::shared_lock lock(mu_);
    const auto& g = pipeline_.graph();
    return {{"session_id", session_id_},
            {"revision", revision_},
            {"seed", to_json(pipeline_.seed())},
            {"pending_candidates", pipeline_.pending_candidate_count()},
            {"pending_refinements", pipeline_.refinements().size()},
            {"entities", g ? g->entities().size() : 0},
            {"edges", g ? g->edge_count() : 0},
            {"chains", pipeline_.chains().size()},
            {"expansions", pipeline_.expansions()},
            {"discarded", pipeline_.discarded()},
            {"digest", pipeline_.digest()}};
  }

  nlohmann::json candidates_json() const {
    std::shared_lock lock(mu_);
    auto list = nlohmann::json::array();
    for (const auto& c : pipeline_.candidates()) {
      nlohmann::json item = {{"id", c.id},
                             {"triplet", to_json(c.candidate.triplet)},
                             {"source_query", c.candidate.source_query},
                             {"cot_excerpt", c.candidate.cot_excerpt},
                             {"review", std::string(to_string(c.candidate.review))}};
      if (c.candidate.edited) item["edited"] = to_json(*c.candidate.edited);
      list.push_back(std::move(item));
    }
    return {{"revision", revision_}, {"candidates", list}};
  }

  nlohmann::json refinements_json() const {
    std::shared_lock lock(mu_);
    auto list = nlohmann::json::array();
    for (const auto& r : pipeline_.refinements()) {
      auto input = nlohmann::json::array();
      for (const auto& t : r.input) input.push_back(to_json(t));
      list.push_back({{"id", r.id},
                      {"status", "needs_review"},
                      {"attempt", r.attempt},
                      {"query", r.query},
                      {"response_excerpt", r.response_excerpt},
                      {"input", input}});
    }
    return {{"revision", revision_}, {"refinements", list}};
  }

  nlohmann::json graph_json() const {
    std::shared_lock lock(mu_);
    auto nodes = nlohmann::json::array();
    auto edges = nlohmann::json::array();
    if (const auto& g = pipeline_.graph()) {
      for (const auto& e : g->entities()) {
        std::string role = "entity";
        if (e == g->seed().subject) role = "seed_subject";
        if (e == g->seed().object) role = "seed_object";
        nodes.push_back({{"id", e}, {"role", role}});
      }
      for (const auto& e : g->edges()) {
        edges.push_back({{"subject", e.subject}, {"relation", e.relation}, {"object", e.object},
                         {"seed", e == g->seed()}});
      }
    }
    return {{"revision", revision_}, {"nodes", nodes}, {"edges", edges}};
  }

  // Accept / reject / edit a pending candidate, or add a new triplet (id ignored).
  nlohmann::json decide(const std::string& candidate_id, const std::string& action,
                        const std::optional<Triplet>& triplet, std::uint64_t revision) {
    std::unique_lock lock(mu_);
    check_revision(revision);
    pipeline_.decide(candidate_id, review_action_from_string(action), triplet);
    return commit();
  }

  nlohmann::json refine(const std::string& refinement_id, const std::string& query,
                        const std::optional<Triplet>& triplet, std::uint64_t revision) {
    std::unique_lock lock(mu_);
    check_revision(revision);
    pipeline_.refine(refinement_id, Refinement{query, triplet ? std::optional<Path>(Path{*triplet}) : std::nullopt});
    return commit();
  }

  // Runs queued work; counts as a mutation only when the state changes.
  nlohmann::json iterate(std::uint64_t revision) {
    std::unique_lock lock(mu_);
    check_revision(revision);
    const auto before = pipeline_.digest();
    pipeline_.run();
    if (pipeline_.digest() != before) {
      ++revision_;
      persist();
    }
    return {{"revision", revision_}, {"digest", pipeline_.digest()}};
  }

  // Read access for tests and exports.
  template <typename Fn>
  auto with_pipeline(Fn&& fn) const {
    std::shared_lock lock(mu_);
    return fn(pipeline_);
  }

 private:
  struct Restored {};

  // Resumes exactly where the checkpoint left off; queued work waits for iterate().
  ReviewSession(Restored, std::string session_id, Pipeline pipeline, std::filesystem::path checkpoint,
                std::uint64_t revision)
      : session_id_(std::move(session_id)), pipeline_(std::move(pipeline)), checkpoint_(std::move(checkpoint)),
        revision_(revision) {}

  void check_revision(std::uint64_t revision) const {
    if (revision != revision_) {
      throw Error(ErrorCode::RevisionConflict, "revision " + std::to_string(revision) + " is stale, current is " +
                                                   std::to_string(revision_));
    }
  }

  nlohmann::json commit() {
    ++revision_;
    if (!pipeline_.has_pending()) pipeline_.run();
    persist();
    return {{"revision", revision_}, {"digest", pipeline_.digest()}};
  }

  void persist() const {
    if (checkpoint_.empty()) return;
    write_file_atomic(checkpoint_, canonical_dump({{"session_id", session_id_},
                                                   {"revision", revision_},
                                                   {"pipeline", pipeline_.checkpoint()}}));
  }

  mutable std::shared_mutex mu_;
  std::string session_id_;
  Pipeline pipeline_;
  std::filesystem::path checkpoint_;
  std::uint64_t revision_ = 0;
};

inline int http_status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::RevisionConflict: return 409;
    case ErrorCode::UnknownItem: return 404;
    case ErrorCode::InvalidEdit:
    case ErrorCode::IndexOutOfRange:
    case ErrorCode::InvalidTriplet:
    case ErrorCode::MalformedInput:
    case ErrorCode::ParseError: return 400;
    case ErrorCode::EndpointFailure:
    case ErrorCode::TransportError: return 502;
    default: return 500;
  }
}

// Registers the API routes on `server`. The session must outlive it.
inline void register_review_routes(httplib::Server& server, ReviewSession& session) {
  auto reply = [](httplib::Response& res, const nlohmann::json& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  };
  auto guarded = [&session, reply](auto handler) {
    return [&session, reply, handler](const httplib::Request& req, httplib::Response& res) {
      try {
        reply(res, handler(req));
      } catch (const Error& e) {
        reply(res,
              {{"error", {{"code", std::string(to_string(e.code()))}, {"message", e.what()}}},
               {"revision", session.revision()}},
              http_status_for(e.code()));
      } catch (const nlohmann::json::exception& e) {
        reply(res,
              {{"error", {{"code", "ParseError"}, {"message", e.what()}}}, {"revision", session.revision()}}, 400);
      }
    };
  };
  auto body_of = [](const httplib::Request& req) {
    return req.body.empty() ? nlohmann::json::object() : nlohmann::json::parse(req.body);
  };
  auto triplet_of = [](const nlohmann::json& body) -> std::optional<Triplet> {
    if (!body.contains("triplet") || body.at("triplet").is_null()) return std::nullopt;
    return triplet_from_json(body.at("triplet"));
  };

  server.Get("/api/session", guarded([&session](const httplib::Request&) { return session.session_json(); }));
  server.Get("/api/candidates", guarded([&session](const httplib::Request&) { return session.candidates_json(); }));
  server.Get("/api/refinements", guarded([&session](const httplib::Request&) { return session.refinements_json(); }));
  server.Get("/api/graph", guarded([&session](const httplib::Request&) { return session.graph_json(); }));
  server.Post(R"(/api/candidates/([^/]+)/decision)",
              guarded([&session, body_of, triplet_of](const httplib::Request& req) {
                const auto body = body_of(req);
                return session.decide(req.matches[1].str(), body.at("action").get<std::string>(), triplet_of(body),
                                      body.at("revision").get<std::uint64_t>());
              }));
  server.Post(R"(/api/refinements/([^/]+))", guarded([&session, body_of, triplet_of](const httplib::Request& req) {
                const auto body = body_of(req);
                return session.refine(req.matches[1].str(), body.at("query").get<std::string>(), triplet_of(body),
                                      body.at("revision").get<std::uint64_t>());
              }));
  server.Post("/api/iterate", guarded([&session, body_of](const httplib::Request& req) {
                const auto body = body_of(req);
                return session.iterate(body.at("revision").get<std::uint64_t>());
              }));
}

}  // namespace deepedit
