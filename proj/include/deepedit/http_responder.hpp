#pragma once
// Chat-completions client. Requests:
//   POST {base_url}/chat/completions
//   {model, messages: [{role, content}], temperature, max_tokens}
// and, for continuation scoring, the legacy completions route with
// echo + logprobs. Transport faults surface as TransportError so the probe
// driver can retry them.

#include <cstdlib>
#include <optional>
#include <string>
#include <utility>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "deepedit/error.hpp"
#include "deepedit/probe.hpp"

namespace deepedit {

class HttpResponder final : public Responder {
 public:
  explicit HttpResponder(EndpointConfig config) : config_(std::move(config)) {
    config_.validate();
    split_base_url(config_.base_url);
    if (!config_.auth.empty()) {
      const char* token = std::getenv(config_.auth.c_str());
      if (token == nullptr || *token == '\0') {
        throw Error(ErrorCode::AuthMissing, "environment variable " + config_.auth + " is not set");
      }
      token_ = token;
    }
  }

  std::string complete(const ProbeQuery& query, int sample_index) const override {
    (void)sample_index;
    nlohmann::json messages = nlohmann::json::array();
    for (const auto& turn : query.history) {
      messages.push_back({{"role", "user"}, {"content", turn.query}});
      messages.push_back({{"role", "assistant"}, {"content", turn.answer}});
    }
    messages.push_back({{"role", "user"}, {"content", query.text}});
    nlohmann::json body = {{"model", config_.model_name},
                           {"messages", messages},
                           {"temperature", config_.temperature},
                           {"max_tokens", config_.max_tokens}};
    auto res = post(prefix_ + "/chat/completions", body);
    if (!res.ok) throw Error(ErrorCode::TransportError, res.error);
    try {
      const auto& choice = res.body.at("choices").at(0);
      if (choice.contains("message") && choice["message"].contains("content") &&
          choice["message"]["content"].is_string()) {
        return choice["message"]["content"].get<std::string>();
      }
      if (choice.contains("text") && choice["text"].is_string()) return choice["text"].get<std::string>();
    } catch (const nlohmann::json::exception&) {
    }
    throw Error(ErrorCode::TransportError, "response carries no choice text");
  }

  std::optional<double> continuation_logprob(const ProbeQuery& prompt, const std::string& continuation) const override {
    const std::string full = prompt.text + " " + continuation;
    nlohmann::json body = {{"model", config_.model_name}, {"prompt", full},  {"max_tokens", 0},
                           {"echo", true},                {"logprobs", 1},   {"temperature", 0.0}};
    auto res = post(prefix_ + "/completions", body);
    if (!res.ok) {
      if (res.status == 400 || res.status == 404 || res.status == 501) return std::nullopt;
      throw Error(ErrorCode::TransportError, res.error);
    }
    try {
      const auto& lp = res.body.at("choices").at(0).at("logprobs");
      const auto& offsets = lp.at("text_offset");
      const auto& scores = lp.at("token_logprobs");
      const auto boundary = static_cast<long long>(prompt.text.size());
      double total = 0.0;
      bool any = false;
      for (std::size_t i = 0; i < offsets.size() && i < scores.size(); ++i) {
        if (offsets[i].get<long long>() < boundary || scores[i].is_null()) continue;
        total += scores[i].get<double>();
        any = true;
      }
      if (!any) return std::nullopt;
      return total;
    } catch (const nlohmann::json::exception&) {
      return std::nullopt;
    }
  }

 private:
  struct PostResult {
    bool ok = false;
    int status = 0;
    std::string error;
    nlohmann::json body;
  };

  void split_base_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw Error(ErrorCode::ConfigError, "base_url needs a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    host_ = url.substr(0, path_start);
    prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
  }

  PostResult post(const std::string& path, const nlohmann::json& body) const {
    httplib::Client client(host_);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.request_timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.request_timeout - secs);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    client.set_write_timeout(secs.count(), usecs.count());
    httplib::Headers headers;
    if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
    PostResult out;
    auto res = client.Post(path, headers, body.dump(), "application/json");
    if (!res) {
      out.error = "request to " + host_ + path + " failed: " + httplib::to_string(res.error());
      return out;
    }
    out.status = res->status;
    if (res->status != 200) {
      out.error = "HTTP " + std::to_string(res->status) + " from " + host_ + path;
      return out;
    }
    try {
      out.body = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::parse_error& e) {
      out.error = std::string("malformed JSON from endpoint: ") + e.what();
      return out;
    }
    out.ok = true;
    return out;
  }

  EndpointConfig config_;
  std::string host_;
  std::string prefix_;
  std::string token_;
};

}  // namespace deepedit
