#include "charbot/client.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <semaphore>
#include <thread>

#include "charbot/errors.hpp"
#include "charbot/prompts.hpp"
#include "httplib.h"

namespace charbot {

void ChatRequest::validate() const {
  if (messages.empty()) throw ValidationError("ChatRequest: messages must be non-empty");
  if (temperature < 0.0) throw ValidationError("ChatRequest: temperature must be >= 0");
}

nlohmann::json ChatRequest::to_json() const {
  nlohmann::json msgs = nlohmann::json::array();
  for (const ChatMessage& m : messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
  return {{"model", model},
          {"messages", msgs},
          {"temperature", temperature},
          {"max_tokens", max_tokens},
          {"timeout_ms", timeout_ms}};
}

ChatRequest ChatRequest::from_json(const nlohmann::json& j) {
  ChatRequest r;
  r.model = j.at("model").get<std::string>();
  for (const auto& m : j.at("messages"))
    r.messages.push_back({m.at("role").get<std::string>(), m.at("content").get<std::string>()});
  r.temperature = j.at("temperature").get<double>();
  r.max_tokens = j.at("max_tokens").get<int>();
  r.timeout_ms = j.at("timeout_ms").get<std::int64_t>();
  return r;
}

ChatRequest ChatRequest::single_user(std::string model_name, std::string prompt) {
  ChatRequest r;
  r.model = std::move(model_name);
  r.messages.push_back({"user", std::move(prompt)});
  return r;
}

nlohmann::json ChatResponse::to_json() const {
  return {{"content", content},
          {"finish_reason", finish_reason},
          {"prompt_tokens", prompt_tokens},
          {"completion_tokens", completion_tokens},
          {"latency_ms", latency_ms}};
}

ChatResponse ChatResponse::from_json(const nlohmann::json& j) {
  ChatResponse r;
  r.content = j.at("content").get<std::string>();
  r.finish_reason = j.at("finish_reason").get<std::string>();
  r.prompt_tokens = j.at("prompt_tokens").get<std::int64_t>();
  r.completion_tokens = j.at("completion_tokens").get<std::int64_t>();
  r.latency_ms = j.at("latency_ms").get<std::int64_t>();
  return r;
}

// --- HTTP client --------------------------------------------------------------

HttpClientConfig HttpClientConfig::from_env() {
  HttpClientConfig cfg;
  const char* base = std::getenv("API_BASE_URL");
  const char* key = std::getenv("API_KEY");
  const char* model = std::getenv("MODEL_NAME");
  if (!base || std::string(base).empty())
    throw AuthFailed("API_BASE_URL is not set");
  if (!key || std::string(key).empty())
    throw AuthFailed("API_KEY is not set");
  cfg.base_url = base;
  cfg.api_key = key;
  cfg.model = model ? model : "";
  return cfg;
}

class InFlightLimiter {
 public:
  explicit InFlightLimiter(int limit) : sem_(limit) {}
  void acquire() { sem_.acquire(); }
  void release() { sem_.release(); }

 private:
  std::counting_semaphore<64> sem_;
};

HttpChatClient::HttpChatClient(HttpClientConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.api_key.empty()) throw AuthFailed("HttpChatClient: empty API key");
  if (cfg_.base_url.empty()) throw AuthFailed("HttpChatClient: empty base URL");
  limiter_ = std::make_unique<InFlightLimiter>(std::max(1, std::min(cfg_.max_in_flight, 64)));
}

namespace {

// Splits "scheme://host[:port]/prefix" into origin and path prefix.
std::pair<std::string, std::string> split_base_url(const std::string& base) {
  std::string url = base;
  while (!url.empty() && url.back() == '/') url.pop_back();
  const std::size_t scheme_end = url.find("://");
  const std::size_t path_start =
      url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
  if (path_start == std::string::npos) return {url, ""};
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

ChatResponse HttpChatClient::complete(const ChatRequest& request) {
  request.validate();
  limiter_->acquire();
  struct Release {
    InFlightLimiter* l;
    ~Release() { l->release(); }
  } release{limiter_.get()};

  const auto [origin, prefix] = split_base_url(cfg_.base_url);
  httplib::Client cli(origin);
  cli.set_connection_timeout(std::chrono::milliseconds(request.timeout_ms));
  cli.set_read_timeout(std::chrono::milliseconds(request.timeout_ms));
  cli.set_write_timeout(std::chrono::milliseconds(request.timeout_ms));

  nlohmann::json body = {{"model", request.model.empty() ? cfg_.model : request.model},
                         {"temperature", request.temperature},
                         {"max_tokens", request.max_tokens}};
  body["messages"] = nlohmann::json::array();
  for (const ChatMessage& m : request.messages)
    body["messages"].push_back({{"role", m.role}, {"content", m.content}});
  const std::string payload = body.dump();

  httplib::Headers headers = {{"Authorization", "Bearer " + cfg_.api_key}};
  const std::string path = prefix + "/chat/completions";

  int last_status = 0;
  for (int attempt = 0; attempt < cfg_.max_attempts; ++attempt) {
    if (attempt > 0) {
      const double delay_s = cfg_.backoff_base_s * std::pow(2.0, attempt - 1);
      std::this_thread::sleep_for(std::chrono::duration<double>(delay_s));
    }
    const auto t0 = std::chrono::steady_clock::now();
    httplib::Result res = cli.Post(path, headers, payload, "application/json");
    const auto t1 = std::chrono::steady_clock::now();
    if (!res) {
      throw Timeout("chat_complete: transport failure (" + httplib::to_string(res.error()) + ")");
    }
    last_status = res->status;
    if (res->status == 401 || res->status == 403)
      throw AuthFailed("chat_complete: HTTP " + std::to_string(res->status));
    if (res->status == 429 || res->status >= 500) continue;
    if (res->status != 200)
      throw MalformedResponse("chat_complete: unexpected HTTP " + std::to_string(res->status));

    nlohmann::json j;
    try {
      j = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::parse_error& e) {
      throw MalformedResponse(std::string("chat_complete: response is not JSON: ") + e.what());
    }
    try {
      ChatResponse out;
      const auto& choice = j.at("choices").at(0);
      out.content = choice.at("message").at("content").get<std::string>();
      out.finish_reason = choice.value("finish_reason", "stop");
      if (j.contains("usage")) {
        out.prompt_tokens = j["usage"].value("prompt_tokens", 0);
        out.completion_tokens = j["usage"].value("completion_tokens", 0);
      }
      out.latency_ms =
          std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();
      return out;
    } catch (const nlohmann::json::exception& e) {
      throw MalformedResponse(std::string("chat_complete: response shape unexpected: ") + e.what());
    }
  }
  throw RateLimited("chat_complete: retries exhausted, last HTTP status " +
                    std::to_string(last_status));
}

// --- stub client ---------------------------------------------------------------

namespace {

const char* stub_reply(PromptTemplate t) {
  switch (t) {
    case PromptTemplate::McqGeneration:
      return R"([{"question": "Do you think habit makes people defend old arrangements regardless of their merit?", "option": ["Yes, habit breeds loyalty that evidence rarely shakes.", "No, people weigh each custom on its merits.", "Only scholars defend old arrangements.", "Habit plays no role in public opinion."], "answer": "A"}, {"question": "Do you believe comparison helps readers notice the weight of familiar conventions?", "option": ["Comparison only confuses readers.", "Yes, a second example makes the first visible.", "Conventions are visible without any contrast.", "Readers should avoid comparing traditions."], "answer": "B"}, {"question": "Do you hold that criticism should name concrete faults rather than vague moods?", "option": ["Vague moods are the heart of criticism.", "Criticism should avoid naming faults.", "Yes, criticism earns its keep by being specific.", "Specific faults are unknowable."], "answer": "C"}])";
    case PromptTemplate::GqaGeneration:
      return R"([{"question": "Why do you insist that familiar customs deserve the sharpest scrutiny?", "answer": "Because what is familiar hides itself; only by dragging a custom into the light and setting it beside another way of living can one see what it costs."}, {"question": "What do you think maintains poor writing in circulation?", "answer": "Indulgent readers and silent critics maintain it together; the remedy is plain criticism that names the fault and praises the sound."}, {"question": "How should a reader treat an argument that flatters them?", "answer": "With double suspicion, for flattery is the cheapest of all arguments and the most readily believed."}])";
    case PromptTemplate::StGeneration:
      return R"([{"original": "Habit defends the old order with zeal, yet that very zeal betrays how little of it was ever examined by anyone.", "plain": "People defend old customs energetically, but that energy shows they never really examined those customs."}, {"original": "The loudest praise of a dead convention often issues from those who never once lived under its actual weight.", "plain": "The people who praise an old convention the most are often the ones who never experienced its burdens."}, {"original": "A critic who fears to name the fault has already joined the party of the fault, whatever banner he may carry.", "plain": "A critic who will not point out a flaw is effectively siding with the flaw, regardless of what he claims."}])";
    case PromptTemplate::AprRewrite:
      return "the author pointed out: comparison is among the best instruments of understanding. "
             "the author believed: before a reader has seen a second way of writing, the "
             "difficulties of the first remain invisible to them.";
    case PromptTemplate::ContentStyleJudge:
      return "The reply keeps the reference's terse, pointed register.\n4\nThe reply restates the "
             "core claim without drifting from the source.\n4";
    case PromptTemplate::StyleMatchJudge:
      return "1";
  }
  throw UnknownTemplate("stub reply: unknown template");
}

}  // namespace

ChatResponse StubChatClient::complete(const ChatRequest& request) {
  request.validate();
  const std::string& prompt = request.messages.back().content;
  const auto t = detect_template(prompt);
  if (!t)
    throw UnknownTemplate("stub_complete: prompt does not match any known template");
  ChatResponse r;
  r.content = stub_reply(*t);
  r.finish_reason = "stop";
  r.prompt_tokens = static_cast<std::int64_t>(prompt.size() / 4);
  r.completion_tokens = static_cast<std::int64_t>(r.content.size() / 4);
  r.latency_ms = 0;
  return r;
}

// --- audit / replay -------------------------------------------------------------

AuditingClient::AuditingClient(std::shared_ptr<ChatClient> inner, std::filesystem::path log_path)
    : inner_(std::move(inner)), log_path_(std::move(log_path)) {}

ChatResponse AuditingClient::complete(const ChatRequest& request) {
  ChatResponse response = inner_->complete(request);
  std::lock_guard<std::mutex> lock(mutex_);
  std::ofstream out(log_path_, std::ios::app);
  if (!out) throw IoError("audit log: cannot open " + log_path_.string());
  out << nlohmann::json({{"request", request.to_json()}, {"response", response.to_json()}}).dump()
      << "\n";
  return response;
}

ReplayChatClient::ReplayChatClient(const std::filesystem::path& log_path) {
  std::ifstream in(log_path);
  if (!in) throw IoError("replay log: cannot open " + log_path.string());
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    by_request_[j.at("request").dump()] = ChatResponse::from_json(j.at("response"));
  }
}

ChatResponse ReplayChatClient::complete(const ChatRequest& request) {
  auto it = by_request_.find(request.to_json().dump());
  if (it == by_request_.end())
    throw ClientError("replay: no recorded response for this request");
  return it->second;
}

}  // namespace charbot
