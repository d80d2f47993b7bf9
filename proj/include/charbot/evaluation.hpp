#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "charbot/client.hpp"
#include "charbot/corpus.hpp"
#include "charbot/model.hpp"
#include "json.hpp"

namespace charbot {

enum class JudgeMode { Live, Stub };

// matches / total
double mcq_accuracy(const std::vector<char>& predictions, const std::vector<char>& gold);

struct BleuBreakdown {
  std::array<double, 4> precisions{};  // clipped n-gram precisions, n = 1..4
  double brevity_penalty = 0.0;
  double bleu = 0.0;
  std::size_t candidate_tokens = 0;
  std::size_t reference_tokens = 0;
};

// Vanilla corpus-less sentence BLEU: geometric mean of clipped n-gram
// precisions (n=1..4, uniform weights) times the brevity penalty, no
// smoothing. Token streams are codepoints when either side contains CJK
// text, whitespace-separated words otherwise.
BleuBreakdown bleu_detail(const std::string& candidate, const std::string& reference);
double bleu(const std::string& candidate, const std::string& reference);

// Unigram F1 with clip counting.
double rouge1(const std::string& candidate, const std::string& reference);

// Lexical similarity primitives behind the stub judges.
double bigram_jaccard(const std::string& a, const std::string& b);
double unigram_overlap_f1(const std::string& candidate, const std::string& reference);
// [0,1] -> 1..5 (quarter-wide bins, top bin closed at 1.0).
int quartile_score(double v);

// Strict judge reply parsers: every reply maps to a value or a typed error.
int parse_style_match_reply(const std::string& raw);
// Returns (content, style); the reply carries style on line 2, content on line 4.
std::pair<int, int> parse_content_style_reply(const std::string& raw);

// 1 iff styles judged consistent. Stub: character-bigram Jaccard >= 0.15.
int style_match(const std::string& generated, const std::string& reference_answer,
                const std::string& question, JudgeMode judge, ChatClient* client = nullptr,
                const std::string& model_name = "");

// (content 1-5, style 1-5). Stub: unigram-overlap and bigram-Jaccard
// quartile maps; offline surrogate only, no claim of agreement with a live judge.
std::pair<int, int> content_style_scores(const std::string& original_text,
                                         const std::string& question, const std::string& response,
                                         JudgeMode judge, ChatClient* client = nullptr,
                                         const std::string& model_name = "");

struct TaskMetrics {
  std::map<std::string, double> values;
  std::size_t count = 0;
};

struct EvalReport {
  std::string judge;  // "stub" or the live judge model name
  std::uint64_t seed = 0;
  std::string checkpoint;
  std::string tokenization = "codepoints-for-cjk-else-whitespace";
  std::string rouge_variant = "rouge1-f1";
  std::map<std::string, TaskMetrics> tasks;
  std::string timestamp;

  nlohmann::json to_json() const;
};

struct BuildReportOptions {
  JudgeMode judge = JudgeMode::Stub;
  ChatClient* client = nullptr;
  std::string judge_model;
  std::uint64_t seed = 0;
  std::string checkpoint_ref;
  std::size_t max_new_tokens = 128;
  // Per-example records are appended here when set.
  std::optional<std::filesystem::path> per_example_path;
};

// Runs MCQ selection over the "mcq" set and greedy decoding over "gqa"/"st",
// then aggregates per-task metric means. Tasks with no examples are omitted.
EvalReport build_report(const ModelState& state,
                        const std::map<std::string, std::vector<TaskExample>>& test_sets,
                        const BuildReportOptions& options);

}  // namespace charbot
