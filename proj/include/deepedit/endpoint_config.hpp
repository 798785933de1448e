#pragma once
// Endpoint configuration files. A base_url of "mock:" selects the
// graph-backed mock; its "mock" block names the graph, an optional edit
// applied before answering, and optional scripted replies:
//
//   {"base_url": "mock:", "model_name": "mock", "samples_per_query": 5,
//    "mock": {"bundle": "hp_mini", "graph_id": "hp-mini", "noise": 0.0, "seed": 42,
//             "edit": {"scope": "shallow", "new_object": "Ilvermorny"},
//             "script": [{"match": "...", "responses": ["..."]}]}}
//
// Relative paths resolve against the config file's directory.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deepedit/dataset_io.hpp"
#include "deepedit/error.hpp"
#include "deepedit/kg_core.hpp"
#include "deepedit/probe.hpp"

namespace deepedit {

inline constexpr std::string_view kMockScheme = "mock:";

struct MockSettings {
  std::filesystem::path bundle;
  std::string graph_id;  // empty: first graph
  double noise = 0.0;
  std::uint64_t seed = 0;
  std::optional<EditScope> edit_scope;
  std::string edit_new_object;
  std::vector<ScriptedResponder::Rule> script;
};

struct EndpointFile {
  EndpointConfig endpoint;
  std::optional<MockSettings> mock;

  bool is_mock() const { return endpoint.base_url.rfind(kMockScheme, 0) == 0; }
};

inline EditScope edit_scope_from_string(const std::string& s) {
  if (s == "shallow") return EditScope::Shallow;
  if (s == "deep") return EditScope::DeepSubject;
  throw Error(ErrorCode::ConfigError, "scope must be shallow or deep, got '" + s + "'");
}

inline std::vector<ScriptedResponder::Rule> script_rules_from_json(const nlohmann::json& j) {
  std::vector<ScriptedResponder::Rule> rules;
  for (const auto& r : j) {
    rules.push_back({r.at("match").get<std::string>(), r.at("responses").get<std::vector<std::string>>()});
  }
  return rules;
}

inline EndpointFile endpoint_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  EndpointFile f;
  try {
    auto& e = f.endpoint;
    e.base_url = j.at("base_url").get<std::string>();
    e.model_name = j.value("model_name", std::string());
    e.samples_per_query = j.value("samples_per_query", e.samples_per_query);
    e.temperature = j.value("temperature", e.temperature);
    e.max_tokens = j.value("max_tokens", e.max_tokens);
    e.request_timeout = std::chrono::milliseconds(j.value("request_timeout_ms", e.request_timeout.count()));
    e.max_parallel = j.value("max_parallel", e.max_parallel);
    e.auth = j.value("auth", std::string());
    e.max_attempts = j.value("max_attempts", e.max_attempts);
    e.retry_backoff = std::chrono::milliseconds(j.value("retry_backoff_ms", e.retry_backoff.count()));
    if (j.contains("mock")) {
      const auto& m = j.at("mock");
      MockSettings s;
      const auto bundle = m.at("bundle").get<std::string>();
      s.bundle = std::filesystem::path(bundle).is_absolute() ? std::filesystem::path(bundle) : base_dir / bundle;
      s.graph_id = m.value("graph_id", std::string());
      s.noise = m.value("noise", 0.0);
      s.seed = m.value("seed", std::uint64_t{0});
      if (m.contains("edit")) {
        s.edit_scope = edit_scope_from_string(m.at("edit").at("scope").get<std::string>());
        s.edit_new_object = m.at("edit").at("new_object").get<std::string>();
      }
      if (m.contains("script")) s.script = script_rules_from_json(m.at("script"));
      f.mock = std::move(s);
    }
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::ConfigError, std::string("endpoint config: ") + ex.what());
  }
  f.endpoint.validate();
  if (f.is_mock() && !f.mock) throw Error(ErrorCode::ConfigError, "mock endpoint needs a \"mock\" block");
  return f;
}

inline EndpointFile load_endpoint_file(const std::filesystem::path& path) {
  std::string content;
  try {
    content = read_file(path);
  } catch (const Error& e) {
    throw Error(ErrorCode::ConfigError, e.what());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(content);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::ConfigError, path.string() + ": " + e.what());
  }
  return endpoint_from_json(j, path.parent_path());
}

// Graph the mock answers from, with the configured edit applied.
inline KnowledgeGraph mock_world(const MockSettings& s) {
  const auto bundle = load_bundle(s.bundle);
  if (bundle.graphs.empty()) throw Error(ErrorCode::ConfigError, "mock bundle has no graphs");
  const KnowledgeGraph* g = s.graph_id.empty() ? &bundle.graphs.front() : bundle.graph(s.graph_id);
  if (g == nullptr) throw Error(ErrorCode::ConfigError, "mock bundle has no graph '" + s.graph_id + "'");
  if (!s.edit_scope) return *g;
  return apply_delta(*g, expand_edit_request(*g, EditRequest{g->seed(), s.edit_new_object, *s.edit_scope}));
}

inline std::shared_ptr<const Responder> make_mock_responder(const MockSettings& s) {
  auto mock = std::make_shared<MockResponder>(mock_world(s), s.noise, s.seed);
  if (s.script.empty()) return mock;
  return std::make_shared<ScriptedResponder>(s.script, mock);
}

}  // namespace deepedit
