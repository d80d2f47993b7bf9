#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace charbot {

struct ChatMessage {
  std::string role;
  std::string content;
};

struct ChatRequest {
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  int max_tokens = 2048;
  std::int64_t timeout_ms = 60000;

  void validate() const;
  nlohmann::json to_json() const;
  static ChatRequest from_json(const nlohmann::json& j);

  static ChatRequest single_user(std::string model_name, std::string prompt);
};

struct ChatResponse {
  std::string content;
  std::string finish_reason = "stop";
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;
  std::int64_t latency_ms = 0;

  nlohmann::json to_json() const;
  static ChatResponse from_json(const nlohmann::json& j);
};

// The only seam in the library that may perform network I/O.
class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual ChatResponse complete(const ChatRequest& request) = 0;
};

struct HttpClientConfig {
  std::string base_url;   // e.g. https://api.example.com/v1
  std::string api_key;
  std::string model;      // default model name when the request leaves it empty
  double backoff_base_s = 1.0;
  int max_attempts = 5;   // retries on 429/5xx: attempts-1 backoffs, then fails
  int max_in_flight = 4;

  // Reads API_BASE_URL, API_KEY, MODEL_NAME. Missing credential -> AuthFailed
  // before any network traffic.
  static HttpClientConfig from_env();
};

class HttpChatClient : public ChatClient {
 public:
  explicit HttpChatClient(HttpClientConfig cfg);
  ChatResponse complete(const ChatRequest& request) override;

 private:
  HttpClientConfig cfg_;
  std::unique_ptr<class InFlightLimiter> limiter_;
};

// Deterministic offline stand-in. Replies are canned per prompt template so
// every pipeline stage has a schema-valid response; unrecognized prompts get
// UnknownTemplate.
class StubChatClient : public ChatClient {
 public:
  ChatResponse complete(const ChatRequest& request) override;
};

// Wraps another client and appends {"request","response"} JSONL records.
class AuditingClient : public ChatClient {
 public:
  AuditingClient(std::shared_ptr<ChatClient> inner, std::filesystem::path log_path);
  ChatResponse complete(const ChatRequest& request) override;

 private:
  std::shared_ptr<ChatClient> inner_;
  std::filesystem::path log_path_;
  std::mutex mutex_;
};

// Serves recorded responses from an audit log, keyed by the exact request.
class ReplayChatClient : public ChatClient {
 public:
  explicit ReplayChatClient(const std::filesystem::path& log_path);
  ChatResponse complete(const ChatRequest& request) override;

 private:
  std::map<std::string, ChatResponse> by_request_;
};

}  // namespace charbot
