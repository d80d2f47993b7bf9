#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "charbot/client.hpp"
#include "json.hpp"

namespace charbot {

struct Essay {
  std::string collection;
  std::string title;
  std::string body;
  std::string id;  // stable hash of (collection, title)
};

struct Corpus {
  std::vector<Essay> essays;  // sorted by (collection, title)
};

std::string essay_id(const std::string& collection, const std::string& title);

// Accepts a directory of UTF-8 .txt files (optionally grouped into
// per-collection subdirectories) or a JSONL manifest {collection,title,body}.
Corpus load_corpus(const std::filesystem::path& path);

inline const std::vector<std::string> kTaskIds = {"mcq", "gqa", "st"};

struct McqExample {
  std::string question;
  std::array<std::string, 4> options;
  char answer = 'A';  // 'A'..'D'
};

struct GqaExample {
  std::string question;
  std::string answer;
};

struct StExample {
  std::string original;  // styled sentence, the training target
  std::string plain;     // neutral paraphrase, the instruction payload
};

struct TaskExample {
  std::string task;  // "mcq" | "gqa" | "st"
  std::string source_essay_id;
  std::variant<McqExample, GqaExample, StExample> payload;

  const McqExample& mcq() const { return std::get<McqExample>(payload); }
  const GqaExample& gqa() const { return std::get<GqaExample>(payload); }
  const StExample& st() const { return std::get<StExample>(payload); }

  // `live_lengths` additionally enforces the 80-120 codepoint window on
  // ST originals, which binds only generator output.
  void validate(bool live_lengths = false) const;

  nlohmann::json to_json() const;
  static TaskExample from_json(const nlohmann::json& j);

  // Instruction/response rendering used by fine-tuning and evaluation.
  std::string instruction() const;
  std::string response() const;
};

void write_examples_jsonl(const std::filesystem::path& path,
                          const std::vector<TaskExample>& examples);
std::vector<TaskExample> read_examples_jsonl(const std::filesystem::path& path);

// --- authorial perspective reframing ------------------------------------------

enum class AprMode { Live, Fallback };

struct AprResult {
  std::string text;
  std::vector<std::string> warnings;
};

// Fallback mode prefixes every sentence with "<name> pointed out: "; live mode
// sends the rewrite prompt through the client and checks that each paragraph
// carries at least one attribution (violations become warnings).
AprResult apr_transform(const Essay& essay, AprMode mode, const std::string& attribution_name,
                        ChatClient* client = nullptr, const std::string& model_name = "");

// --- task data generation -------------------------------------------------------

enum class GenMode { Live, Synthetic };

// Exactly three validated examples per essay. Live responses are parsed as a
// strict JSON array against the task schema; synthetic mode derives
// deterministic examples from seeded essay substrings.
std::vector<TaskExample> generate_task_data(const Essay& essay, const std::string& task,
                                            GenMode mode, std::uint64_t seed,
                                            ChatClient* client = nullptr,
                                            const std::string& author = "the author",
                                            const std::string& model_name = "");

// Strict parser for a generator reply; exposed for tests and replay tooling.
std::vector<TaskExample> parse_generation_reply(const Essay& essay, const std::string& task,
                                                const std::string& raw);

// Whole-corpus generation. Live mode fans out over essays with at most
// `max_in_flight` concurrent requests; output order follows essay order.
std::vector<TaskExample> generate_corpus_task_data(const Corpus& corpus, const std::string& task,
                                                   GenMode mode, std::uint64_t seed,
                                                   ChatClient* client = nullptr,
                                                   const std::string& author = "the author",
                                                   const std::string& model_name = "",
                                                   int max_in_flight = 4);

// --- dataset splits ---------------------------------------------------------------

struct SplitSpec {
  double train = 0.85;
  double val = 0.05;
  double test = 0.10;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SplitResult {
  std::vector<TaskExample> train;
  std::vector<TaskExample> val;
  std::vector<TaskExample> test;
};

// Seeded uniform shuffle, then |train| = floor(train*n), |val| = floor(val*n),
// remainder to test.
SplitResult split_dataset(const std::vector<TaskExample>& examples, const SplitSpec& spec);

}  // namespace charbot
