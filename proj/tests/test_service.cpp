#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <thread>

#include "cli_app.hpp"
#include "support.hpp"

using namespace deepedit;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorCode::InvariantViolation;
}

const Triplet kSeed = make_triplet("Harry Potter", "school", "Hogwarts");

std::unique_ptr<ReviewSession> hp_session(const fs::path& checkpoint = {}) {
  return std::make_unique<ReviewSession>(
      "hp", Pipeline(fixtures::pipeline_config(), fixtures::hp_scripted_model(), kSeed, "hp-built"), checkpoint);
}

// httplib server on an ephemeral port, stopped on destruction.
class LocalServer {
 public:
  explicit LocalServer(const std::function<void(httplib::Server&)>& setup) {
    setup(server_);
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~LocalServer() {
    server_.stop();
    thread_.join();
  }
  int port() const { return port_; }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            (std::string("deepedit-svc-") + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }
  std::string str(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = deepedit::cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string mock_config(const TempDir& tmp, const std::string& name, const json& mock_block,
                        const json& extra = json::object()) {
  json j = {{"base_url", "mock:"}, {"model_name", "mock"}, {"samples_per_query", 5}, {"max_parallel", 2},
            {"mock", mock_block}};
  for (const auto& [k, v] : extra.items()) j[k] = v;
  write_file_atomic(tmp / name, j.dump(2));
  return tmp.str(name);
}

}  // namespace

TEST(ReviewSession, EachAcceptedMutationBumpsTheRevision) {
  auto s = hp_session();
  EXPECT_EQ(s->revision(), 0u);
  EXPECT_EQ(s->candidates_json()["candidates"].size(), 5u);
  s->decide("c4", "accept", std::nullopt, 0);
  s->decide("c5", "accept", std::nullopt, 1);
  s->decide("c2", "reject", std::nullopt, 2);
  EXPECT_EQ(s->revision(), 3u);
  const auto cands = s->candidates_json()["candidates"];
  EXPECT_EQ(cands[1]["review"], "rejected");
  EXPECT_EQ(cands[3]["review"], "accepted");
}

TEST(ReviewSession, StaleRevisionIsRejectedWithoutSideEffects) {
  auto s = hp_session();
  s->decide("c2", "reject", std::nullopt, 0);
  const auto before = s->session_json();
  EXPECT_EQ(code_of([&] { s->decide("c4", "accept", std::nullopt, 0); }), ErrorCode::RevisionConflict);
  EXPECT_EQ(s->session_json(), before);
  EXPECT_EQ(code_of([&] { s->decide("c99", "accept", std::nullopt, 1); }), ErrorCode::UnknownItem);
  EXPECT_EQ(code_of([&] { s->decide("c4", "frobnicate", std::nullopt, 1); }), ErrorCode::InvalidEdit);
  EXPECT_EQ(s->revision(), 1u);
  EXPECT_EQ(s->iterate(1)["revision"], 1u);
}

TEST(ReviewSession, RefinementFlowAndGraphView) {
  auto s = hp_session();
  std::uint64_t rev = 0;
  s->decide("c1", "accept", std::nullopt, rev++);
  for (const auto* id : {"c2", "c3"}) s->decide(id, "reject", std::nullopt, rev++);
  for (const auto* id : {"c4", "c5"}) s->decide(id, "accept", std::nullopt, rev++);
  auto refinements = s->refinements_json()["refinements"];
  ASSERT_EQ(refinements.size(), 1u);
  EXPECT_EQ(refinements[0]["attempt"], 0);
  const auto id = refinements[0]["id"].get<std::string>();
  s->refine(id, "Which fantasy series stars Harry Potter?", std::nullopt, rev++);
  refinements = s->refinements_json()["refinements"];
  ASSERT_EQ(refinements.size(), 1u);
  EXPECT_EQ(refinements[0]["attempt"], 1);
  EXPECT_EQ(refinements[0]["query"], "Which fantasy series stars Harry Potter?");
  EXPECT_EQ(code_of([&] { s->refine(id, "again", std::nullopt, rev); }), ErrorCode::UnknownItem);

  const auto graph = s->graph_json();
  EXPECT_EQ(graph["edges"].size(), 3u);
  int seeds = 0;
  for (const auto& e : graph["edges"]) seeds += e["seed"].get<bool>() ? 1 : 0;
  EXPECT_EQ(seeds, 1);
  std::map<std::string, std::string> roles;
  for (const auto& n : graph["nodes"]) roles[n["id"]] = n["role"];
  EXPECT_EQ(roles["Harry Potter"], "seed_subject");
  EXPECT_EQ(roles["Hogwarts"], "seed_object");
  EXPECT_EQ(roles["Gryffindor"], "entity");
  EXPECT_EQ(s->session_json()["chains"], 2);
}

TEST(ReviewSession, CheckpointSurvivesRestart) {
  TempDir tmp;
  const auto file = tmp / "session.json";
  std::string digest;
  {
    auto s = hp_session(file);
    s->decide("c4", "accept", std::nullopt, 0);
    digest = s->session_json()["digest"];
  }
  auto again = ReviewSession::load(file, fixtures::pipeline_config(), fixtures::hp_scripted_model());
  EXPECT_EQ(again->revision(), 1u);
  EXPECT_EQ(again->session_json()["digest"], digest);
  again->decide("c5", "accept", std::nullopt, 1);
  EXPECT_EQ(again->revision(), 2u);
}

TEST(ReviewApi, RoutesAndErrorStatuses) {
  auto session = hp_session();
  LocalServer server([&](httplib::Server& s) { register_review_routes(s, *session); });
  httplib::Client client(server.url());

  auto res = client.Get("/api/session");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(json::parse(res->body)["pending_candidates"], 5);

  res = client.Post("/api/candidates/c4/decision", R"({"action":"accept","revision":0})", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(json::parse(res->body)["revision"], 1);

  res = client.Post("/api/candidates/c5/decision", R"({"action":"accept","revision":0})", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 409);
  const auto conflict = json::parse(res->body);
  EXPECT_EQ(conflict["error"]["code"], "RevisionConflict");
  EXPECT_EQ(conflict["revision"], 1);

  res = client.Post("/api/candidates/c42/decision", R"({"action":"accept","revision":1})", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 404);

  res = client.Post("/api/candidates/c5/decision", "{not json", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);

  res = client.Post("/api/candidates/new/decision",
                    R"({"action":"add","revision":1,"triplet":{"subject":"Draco Malfoy","relation":"house","object":"Slytherin"}})",
                    "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);

  res = client.Get("/api/candidates");
  ASSERT_TRUE(res);
  EXPECT_EQ(json::parse(res->body)["candidates"].size(), 6u);

  res = client.Post("/api/iterate", R"({"revision":2})", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);

  for (const auto* path : {"/api/refinements", "/api/graph"}) {
    res = client.Get(path);
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200) << path;
  }
}

TEST(HttpResponder, SpeaksChatCompletions) {
  json last_body;
  std::string last_auth;
  std::mutex mu;
  LocalServer server([&](httplib::Server& s) {
    s.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mu);
      last_body = json::parse(req.body);
      last_auth = req.get_header_value("Authorization");
      res.set_content(R"({"choices":[{"message":{"role":"assistant","content":"Hogwarts, of course."}}]})",
                      "application/json");
    });
    s.Post("/v1/completions", [&](const httplib::Request& req, httplib::Response& res) {
      const auto body = json::parse(req.body);
      const auto prompt = body["prompt"].get<std::string>();
      const auto boundary = prompt.rfind(' ');
      json lp = {{"text_offset", {0, boundary, boundary + 1}}, {"token_logprobs", {nullptr, -0.5, -0.25}}};
      res.set_content(json{{"choices", {{{"text", prompt}, {"logprobs", lp}}}}}.dump(), "application/json");
    });
  });
  ::setenv("DEEPEDIT_TEST_TOKEN", "s3cret", 1);
  EndpointConfig cfg;
  cfg.base_url = server.url() + "/v1/";
  cfg.model_name = "test-model";
  cfg.auth = "DEEPEDIT_TEST_TOKEN";
  cfg.temperature = 0.7;
  cfg.max_tokens = 64;
  const HttpResponder http(cfg);
  ProbeQuery q{"q1", "Where did Harry Potter study?", "Hogwarts", {}, {}, {{"Who is Harry?", "A wizard."}}};
  EXPECT_EQ(http.complete(q, 0), "Hogwarts, of course.");
  {
    std::lock_guard lock(mu);
    EXPECT_EQ(last_auth, "Bearer s3cret");
    EXPECT_EQ(last_body["model"], "test-model");
    EXPECT_EQ(last_body["max_tokens"], 64);
    EXPECT_DOUBLE_EQ(last_body["temperature"].get<double>(), 0.7);
    ASSERT_EQ(last_body["messages"].size(), 3u);
    EXPECT_EQ(last_body["messages"][1]["role"], "assistant");
    EXPECT_EQ(last_body["messages"][2]["content"], "Where did Harry Potter study?");
  }
  const auto lp = http.continuation_logprob(ProbeQuery{"p", "Harry studied at", "", {}, {}, {}}, "Hogwarts");
  ASSERT_TRUE(lp.has_value());
  EXPECT_DOUBLE_EQ(*lp, -0.75);
}

TEST(HttpResponder, ConfigurationAndTransportErrors) {
  ::unsetenv("DEEPEDIT_ABSENT_TOKEN");
  EndpointConfig cfg;
  cfg.base_url = "http://127.0.0.1:1";
  cfg.auth = "DEEPEDIT_ABSENT_TOKEN";
  EXPECT_EQ(code_of([&] { HttpResponder{cfg}; }), ErrorCode::AuthMissing);
  cfg.auth.clear();
  cfg.base_url = "localhost:8000";
  EXPECT_EQ(code_of([&] { HttpResponder{cfg}; }), ErrorCode::ConfigError);
  cfg.base_url = "http://127.0.0.1:1";
  cfg.request_timeout = std::chrono::milliseconds(200);
  const HttpResponder http(cfg);
  EXPECT_EQ(code_of([&] { http.complete(ProbeQuery{"q", "hello", "x", {}, {}, {}}, 0); }), ErrorCode::TransportError);
}

TEST(HttpResponder, ScoringUnsupportedFallsBackToSampling) {
  LocalServer server([&](httplib::Server& s) {
    s.Post("/chat/completions", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"choices":[{"message":{"content":"Ilvermorny"}}]})", "application/json");
    });
    s.Post("/completions", [](const httplib::Request&, httplib::Response& res) { res.status = 404; });
  });
  EndpointConfig cfg;
  cfg.base_url = server.url();
  cfg.samples_per_query = 3;
  const HttpResponder http(cfg);
  const ProbeQuery prompt{"p", "Where did HP study?", "Ilvermorny", {}, {}, {}};
  EXPECT_FALSE(http.continuation_logprob(prompt, "Ilvermorny").has_value());
  const auto c = preference(http, cfg, prompt, "Ilvermorny", "Hogwarts");
  EXPECT_TRUE(c.sampled);
  EXPECT_EQ(c.p_new, 1.0);
  EXPECT_EQ(c.p_old, 0.0);
}

TEST(EndpointFile, ParsesMockBlockAndRejectsBadConfigs) {
  TempDir tmp;
  const auto path = mock_config(tmp, "mock.json",
                                {{"bundle", fixtures::path("hp_mini").string()},
                                 {"noise", 0.1},
                                 {"seed", 9},
                                 {"edit", {{"scope", "deep"}, {"new_object", "Ilvermorny"}}}},
                                {{"retry_backoff_ms", 5}, {"request_timeout_ms", 1500}});
  const auto f = load_endpoint_file(path);
  ASSERT_TRUE(f.is_mock());
  EXPECT_EQ(f.endpoint.retry_backoff, std::chrono::milliseconds(5));
  EXPECT_EQ(f.endpoint.request_timeout, std::chrono::milliseconds(1500));
  EXPECT_EQ(f.mock->seed, 9u);
  EXPECT_EQ(*f.mock->edit_scope, EditScope::DeepSubject);
  EXPECT_FALSE(mock_world(*f.mock).has_edge(fixtures::e2()));

  EXPECT_EQ(code_of([] { endpoint_from_json(json{{"base_url", "mock:"}}); }), ErrorCode::ConfigError);
  EXPECT_EQ(code_of([] { endpoint_from_json(json{{"model_name", "x"}}); }), ErrorCode::ConfigError);
  EXPECT_EQ(code_of([] { endpoint_from_json(json{{"base_url", "http://x"}, {"samples_per_query", 0}}); }),
            ErrorCode::ConfigError);
  EXPECT_EQ(code_of([&] { load_endpoint_file(tmp / "absent.json"); }), ErrorCode::ConfigError);
}

TEST(Cli, StatsSeedsAndUsageErrors) {
  auto r = invoke({"stats", "--bundle", fixtures::path("hp_mini").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out)["total"], 3);
  r = invoke({"seeds", "--file", fixtures::path("seeds.csv").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out)["categories"], 11);
  EXPECT_EQ(invoke({"frobnicate"}).code, 2);
  EXPECT_EQ(invoke({"stats"}).code, 2);
  EXPECT_EQ(invoke({"mock-edit", "--bundle", "x", "--scope", "sideways"}).code, 2);
  EXPECT_EQ(invoke({"stats", "--bundle", "/nonexistent/bundle"}).code, 3);
  EXPECT_EQ(invoke({"sequence", "--graphs", fixtures::path("hp_mini.source.json").string(), "--out", "/tmp/x", "--l-max",
                 "9"})
                .code,
            2);
}

TEST(Cli, ProbeEvalRoundTrip) {
  TempDir tmp;
  const auto bundle = fixtures::path("hp_mini").string();
  const auto pre_cfg = mock_config(tmp, "pre.json", {{"bundle", bundle}});
  const auto post_cfg =
      mock_config(tmp, "post.json", {{"bundle", bundle}, {"edit", {{"scope", "shallow"}, {"new_object", "Ilvermorny"}}}});

  auto r = invoke({"probe", "--phase", "pre", "--bundle", bundle, "--endpoint-config", pre_cfg, "--dry-run"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out)["queries"], 7);
  EXPECT_FALSE(fs::exists(tmp / "pre.jsonl"));

  r = invoke({"probe", "--phase", "pre", "--bundle", bundle, "--endpoint-config", pre_cfg, "--out", tmp.str("pre.jsonl"),
           "--transcripts", tmp.str("pre.transcripts.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  r = invoke({"probe", "--phase", "post", "--bundle", bundle, "--endpoint-config", post_cfg, "--out",
           tmp.str("post.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_FALSE(read_file(tmp / "pre.transcripts.jsonl").empty());
  EXPECT_EQ(read_file(tmp / "pre.jsonl").find("raw_responses"), std::string::npos);

  r = invoke({"eval", "--bundle", bundle, "--pre", tmp.str("pre.jsonl"), "--post", tmp.str("post.jsonl"), "--out",
           tmp.str("report.json")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NEAR(load_report(tmp / "report.json").ifr_overall, 2.0 - std::sqrt(2.0), 1e-12);

  EXPECT_EQ(invoke({"eval", "--bundle", bundle, "--pre", tmp.str("pre.jsonl"), "--post", tmp.str("pre.jsonl")}).code, 2);
  EXPECT_EQ(invoke({"eval", "--bundle", bundle, "--pre", tmp.str("pre.jsonl"), "--post", tmp.str("pre.jsonl"),
                 "--dry-run"})
                .code,
            3);
  write_file_atomic(tmp / "short.jsonl", read_file(tmp / "post.jsonl").substr(0, read_file(tmp / "post.jsonl").find('\n') + 1));
  r = invoke({"eval", "--bundle", bundle, "--pre", tmp.str("pre.jsonl"), "--post", tmp.str("short.jsonl")});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("MissingProbes"), std::string::npos) << r.err;
}

TEST(Cli, MockEditReportsAreByteIdentical) {
  TempDir tmp;
  const auto bundle = fixtures::path("hp_mini").string();
  for (const auto* name : {"a.json", "b.json"}) {
    const auto r = invoke({"mock-edit", "--bundle", bundle, "--scope", "shallow", "--noise", "0.2", "--seed", "42",
                        "--out", tmp.str(name)});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  EXPECT_EQ(read_file(tmp / "a.json"), read_file(tmp / "b.json"));
  EXPECT_EQ(invoke({"mock-edit", "--bundle", bundle, "--noise", "1.5"}).code, 2);
}

TEST(Cli, UnreachableEndpointExitsWithEndpointError) {
  TempDir tmp;
  write_file_atomic(tmp / "down.json", json{{"base_url", "http://127.0.0.1:1"},
                                            {"model_name", "m"},
                                            {"samples_per_query", 1},
                                            {"max_attempts", 1},
                                            {"request_timeout_ms", 200}}
                                           .dump());
  const auto r = invoke({"probe", "--phase", "pre", "--bundle", fixtures::path("hp_mini").string(), "--endpoint-config",
                      tmp.str("down.json"), "--out", tmp.str("p.jsonl")});
  EXPECT_EQ(r.code, 4);
  EXPECT_EQ(load_probes(tmp / "p.jsonl").size(), 5u);
}

TEST(Cli, BuildWithScriptedMockAndDecisions) {
  TempDir tmp;
  const json script = json::array(
      {{{"match", "Question: Where did HP study?"},
        {"responses", {"HP was sorted into the house Gryffindor. Gryffindor is one of the houses of Hogwarts."}}},
       {{"match", "Sentence: HP was sorted"}, {"responses", {"(HP, house, Gryffindor)"}}},
       {{"match", "Sentence: Gryffindor is one"}, {"responses", {"(Gryffindor, belongs to, Hogwarts)"}}}});
  const auto cfg = mock_config(tmp, "mock.json", {{"bundle", fixtures::path("hp_mini").string()}, {"script", script}});
  write_file_atomic(tmp / "decisions.json",
                    R"({"decisions":[{"item":"c1","action":"accept"},{"item":"c2","action":"accept"}]})");
  auto r = invoke({"build", "--seed", "HP|school|Hogwarts", "--graph-id", "hp-cli", "--endpoint-config", cfg,
                "--decisions", tmp.str("decisions.json"), "--checkpoint", tmp.str("ckpt.json"), "--out",
                tmp.str("built")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto out = json::parse(r.out);
  EXPECT_EQ(out["stats"]["total"], 2);
  EXPECT_EQ(out["edges"], 3);
  const auto bundle = load_bundle(tmp / "built");
  EXPECT_EQ(bundle.graphs[0].id(), "hp-cli");
  EXPECT_TRUE(fs::exists(tmp / "ckpt.json"));

  r = invoke({"build", "--resume", "--endpoint-config", cfg, "--checkpoint", tmp.str("ckpt.json"), "--out",
           tmp.str("again")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(r.out)["digest"], out["digest"]);

  EXPECT_EQ(invoke({"build", "--endpoint-config", cfg, "--out", tmp.str("x")}).code, 2);
  EXPECT_EQ(invoke({"build", "--seed", "HP|school", "--endpoint-config", cfg, "--out", tmp.str("x")}).code, 2);
  EXPECT_EQ(invoke({"build", "--seed", "HP|school|Hogwarts", "--endpoint-config", cfg, "--l-max", "7", "--out",
                 tmp.str("x")})
                .code,
            2);
}
