// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <json.hpp>

#include "flans/prompts.hpp"

namespace flans {

EndpointConfig EndpointConfig::from_env() {
  EndpointConfig c;
  if (const char* u = std::getenv("FLANS_PARAPHRASE_URL")) c.url = u;
  if (const char* t = std::getenv("FLANS_PARAPHRASE_TOKEN")) c.token = t;
  return c;
}

ParaphraseResult paraphrase_external(const Prompt& prompt, const EndpointConfig& endpoint) {
  if (endpoint.url.empty()) return {prompt, std::nullopt};
  auto fallback = [&](const std::string& why) {
    return ParaphraseResult{prompt, "paraphrase provider failed (" + why + "); keeping template text"};
  };
  const std::size_t colon = endpoint.url.find("://");
  const std::string scheme = colon == std::string::npos ? "" : endpoint.url.substr(0, colon);
  if (scheme != "http" && scheme != "https") return fallback("endpoint must be an http:// or https:// URL");
  const std::size_t slash = endpoint.url.find('/', colon + 3);
  const std::string origin = endpoint.url.substr(0, slash);
  const std::string path = slash == std::string::npos ? "/" : endpoint.url.substr(slash);

  try {
    httplib::Client client(origin);
    client.set_connection_timeout(endpoint.timeout_seconds, 0);
    client.set_read_timeout(endpoint.timeout_seconds, 0);
    httplib::Headers headers;
    if (!endpoint.token.empty()) headers.emplace("Authorization", "Bearer " + endpoint.token);
    const std::string body = nlohmann::json{{"text", prompt.text}}.dump();
    auto res = client.Post(path, headers, body, "application/json");
    if (!res) return fallback(httplib::to_string(res.error()));
    if (res->status != 200) return fallback("HTTP " + std::to_string(res->status));
    const auto j = nlohmann::json::parse(res->body);
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) return fallback("response lacks a text field");
    std::string text = j["text"].get<std::string>();
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) return fallback("empty paraphrase");
    Prompt out = prompt;
    out.text = std::move(text);
    out.source = PromptSource::ExternalProvider;
    return {out, std::nullopt};
  } catch (const std::exception& e) {
    return fallback(e.what());
  }
}

}  // namespace flans
