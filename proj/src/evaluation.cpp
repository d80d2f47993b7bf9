#include "charbot/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "charbot/errors.hpp"
#include "charbot/prompts.hpp"
#include "charbot/text.hpp"

namespace charbot {

double mcq_accuracy(const std::vector<char>& predictions, const std::vector<char>& gold) {
  if (predictions.size() != gold.size())
    throw LengthMismatch("mcq_accuracy: " + std::to_string(predictions.size()) +
                         " predictions vs " + std::to_string(gold.size()) + " gold labels");
  if (predictions.empty()) throw EmptyInput("mcq_accuracy: no predictions");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    if (predictions[i] == gold[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

namespace {

std::vector<std::string> metric_tokens(const std::string& a, const std::string& b,
                                       const std::string& self) {
  const bool char_level = contains_cjk(a) || contains_cjk(b);
  return char_level ? codepoint_tokens(self) : split_whitespace(self);
}

std::map<std::string, std::size_t> ngram_counts(const std::vector<std::string>& tokens,
                                                std::size_t n) {
  std::map<std::string, std::size_t> counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string key;
    for (std::size_t j = 0; j < n; ++j) {
      if (j) key += '\x1f';
      key += tokens[i + j];
    }
    ++counts[key];
  }
  return counts;
}

}  // namespace

BleuBreakdown bleu_detail(const std::string& candidate, const std::string& reference) {
  if (trim(reference).empty()) throw EmptyReference("bleu: reference is empty");
  const std::vector<std::string> cand = metric_tokens(candidate, reference, candidate);
  const std::vector<std::string> ref = metric_tokens(candidate, reference, reference);

  BleuBreakdown out;
  out.candidate_tokens = cand.size();
  out.reference_tokens = ref.size();
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto cand_counts = ngram_counts(cand, n);
    const auto ref_counts = ngram_counts(ref, n);
    std::size_t clipped = 0, total = 0;
    for (const auto& [gram, count] : cand_counts) {
      total += count;
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) clipped += std::min(count, it->second);
    }
    out.precisions[n - 1] =
        total == 0 ? 0.0 : static_cast<double>(clipped) / static_cast<double>(total);
  }
  if (cand.empty()) {
    out.brevity_penalty = 0.0;
    out.bleu = 0.0;
    return out;
  }
  const double c = static_cast<double>(cand.size());
  const double r = static_cast<double>(ref.size());
  out.brevity_penalty = c >= r ? 1.0 : std::exp(1.0 - r / c);
  double log_sum = 0.0;
  for (double p : out.precisions) {
    if (p == 0.0) {
      out.bleu = 0.0;  // no smoothing: any empty n-gram overlap zeroes the score
      return out;
    }
    log_sum += std::log(p);
  }
  out.bleu = out.brevity_penalty * std::exp(log_sum / 4.0);
  return out;
}

double bleu(const std::string& candidate, const std::string& reference) {
  return bleu_detail(candidate, reference).bleu;
}

double rouge1(const std::string& candidate, const std::string& reference) {
  if (trim(reference).empty()) throw EmptyReference("rouge1: reference is empty");
  const std::vector<std::string> cand = metric_tokens(candidate, reference, candidate);
  const std::vector<std::string> ref = metric_tokens(candidate, reference, reference);
  const auto cand_counts = ngram_counts(cand, 1);
  const auto ref_counts = ngram_counts(ref, 1);
  std::size_t overlap = 0;
  for (const auto& [gram, count] : cand_counts) {
    auto it = ref_counts.find(gram);
    if (it != ref_counts.end()) overlap += std::min(count, it->second);
  }
  if (cand.empty() || ref.empty() || overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(cand.size());
  const double r = static_cast<double>(overlap) / static_cast<double>(ref.size());
  return 2.0 * p * r / (p + r);
}

// --- stub judge primitives -----------------------------------------------------

namespace {

std::set<std::string> bigram_set(const std::string& text) {
  const std::vector<std::string> chars = codepoint_tokens(text);
  std::set<std::string> out;
  for (std::size_t i = 0; i + 2 <= chars.size(); ++i) out.insert(chars[i] + '\x1f' + chars[i + 1]);
  return out;
}

}  // namespace

double bigram_jaccard(const std::string& a, const std::string& b) {
  const std::set<std::string> sa = bigram_set(a), sb = bigram_set(b);
  if (sa.empty() && sb.empty()) return a == b ? 1.0 : 0.0;
  std::size_t inter = 0;
  for (const std::string& g : sa) inter += sb.count(g);
  const std::size_t uni = sa.size() + sb.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double unigram_overlap_f1(const std::string& candidate, const std::string& reference) {
  if (trim(reference).empty()) return 0.0;
  return rouge1(candidate, reference);
}

int quartile_score(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return 1 + std::min(4, static_cast<int>(std::floor(v * 4.0)));
}

// --- judge reply parsing ---------------------------------------------------------

int parse_style_match_reply(const std::string& raw) {
  const std::string t = trim(raw);
  if (t == "1") return 1;
  if (t == "0") return 0;
  throw UnparseableJudgeOutput("style-match judge replied '" + raw + "', expected '1' or '0'");
}

namespace {

int parse_score_line(const std::string& line, const char* which) {
  const std::string t = trim(line);
  if (t.empty() || t.size() > 2 ||
      !std::all_of(t.begin(), t.end(), [](unsigned char c) { return std::isdigit(c); }))
    throw UnparseableJudgeOutput(std::string("judge ") + which + " line is not a bare integer: '" +
                                 line + "'");
  const int v = std::stoi(t);
  if (v < 1 || v > 5)
    throw ScoreOutOfRange(std::string("judge ") + which + " score " + std::to_string(v) +
                          " outside 1-5");
  return v;
}

}  // namespace

std::pair<int, int> parse_content_style_reply(const std::string& raw) {
  std::vector<std::string> lines = split_lines(raw);
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  if (lines.size() != 4)
    throw UnparseableJudgeOutput("content/style judge replied with " +
                                 std::to_string(lines.size()) + " lines, expected 4");
  const int style = parse_score_line(lines[1], "style");
  const int content = parse_score_line(lines[3], "content");
  return {content, style};
}

int style_match(const std::string& generated, const std::string& reference_answer,
                const std::string& question, JudgeMode judge, ChatClient* client,
                const std::string& model_name) {
  if (judge == JudgeMode::Stub) return bigram_jaccard(generated, reference_answer) >= 0.15 ? 1 : 0;
  if (client == nullptr) throw ClientError("style_match: live judge requires a client");
  const std::string prompt = render_template(PromptTemplate::StyleMatchJudge,
                                             {{"question", question},
                                              {"generated_text", generated},
                                              {"answer", reference_answer}});
  return parse_style_match_reply(
      client->complete(ChatRequest::single_user(model_name, prompt)).content);
}

std::pair<int, int> content_style_scores(const std::string& original_text,
                                         const std::string& question, const std::string& response,
                                         JudgeMode judge, ChatClient* client,
                                         const std::string& model_name) {
  if (judge == JudgeMode::Stub) {
    const int content = quartile_score(unigram_overlap_f1(response, original_text));
    const int style = quartile_score(bigram_jaccard(response, original_text));
    return {content, style};
  }
  if (client == nullptr) throw ClientError("content_style_scores: live judge requires a client");
  const std::string prompt = render_template(PromptTemplate::ContentStyleJudge,
                                             {{"original_text", original_text},
                                              {"user_question", question},
                                              {"ai_response", response}});
  return parse_content_style_reply(
      client->complete(ChatRequest::single_user(model_name, prompt)).content);
}

// --- reports ------------------------------------------------------------------------

nlohmann::json EvalReport::to_json() const {
  nlohmann::json tasks_json = nlohmann::json::object();
  for (const auto& [task, metrics] : tasks) {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [name, value] : metrics.values) m[name] = value;
    tasks_json[task] = {{"count", metrics.count}, {"metrics", m}};
  }
  return {{"judge", judge},
          {"seed", seed},
          {"checkpoint", checkpoint},
          {"tokenization", tokenization},
          {"rouge_variant", rouge_variant},
          {"tasks", tasks_json},
          {"timestamp", timestamp}};
}

namespace {

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

double mean(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

}  // namespace

EvalReport build_report(const ModelState& state,
                        const std::map<std::string, std::vector<TaskExample>>& test_sets,
                        const BuildReportOptions& options) {
  bool any = false;
  for (const auto& [task, set] : test_sets) any = any || !set.empty();
  if (!any) throw ValidationError("build_report: every test set is empty");

  EvalReport report;
  report.judge = options.judge == JudgeMode::Stub ? "stub" : options.judge_model;
  report.seed = options.seed;
  report.checkpoint = options.checkpoint_ref;
  report.timestamp = utc_timestamp();

  std::ofstream per_example;
  if (options.per_example_path) {
    per_example.open(*options.per_example_path, std::ios::trunc);
    if (!per_example)
      throw IoError("build_report: cannot open " + options.per_example_path->string());
  }
  auto emit = [&](const nlohmann::json& j) {
    if (per_example.is_open()) per_example << j.dump() << "\n";
  };

  // MCQ accuracy
  if (auto it = test_sets.find("mcq"); it != test_sets.end() && !it->second.empty()) {
    std::vector<char> predictions, gold;
    for (const TaskExample& ex : it->second) {
      const auto& m = ex.mcq();
      const char predicted = answer_mcq(
          state, m.question, std::vector<std::string>(m.options.begin(), m.options.end()), "mcq");
      predictions.push_back(predicted);
      gold.push_back(m.answer);
      emit({{"task", "mcq"},
            {"input", ex.instruction()},
            {"output", std::string(1, predicted)},
            {"gold", std::string(1, m.answer)},
            {"metrics", {{"correct", predicted == m.answer ? 1 : 0}}}});
    }
    TaskMetrics tm;
    tm.count = predictions.size();
    tm.values["accuracy"] = mcq_accuracy(predictions, gold);
    report.tasks.emplace("mcq", std::move(tm));
  }

  // GQA: content / style judge scores on greedy decodes
  if (auto it = test_sets.find("gqa"); it != test_sets.end() && !it->second.empty()) {
    std::vector<double> contents, styles;
    for (const TaskExample& ex : it->second) {
      const std::string decoded = greedy_decode(
          state, prompt_tokens("gqa", ex.instruction()), options.max_new_tokens, "gqa");
      const auto [content, style] =
          content_style_scores(ex.gqa().answer, ex.gqa().question, decoded, options.judge,
                               options.client, options.judge_model);
      contents.push_back(content);
      styles.push_back(style);
      emit({{"task", "gqa"},
            {"input", ex.instruction()},
            {"output", decoded},
            {"gold", ex.gqa().answer},
            {"metrics", {{"content_score", content}, {"style_score", style}}}});
    }
    TaskMetrics tm;
    tm.count = contents.size();
    tm.values["content_score"] = mean(contents);
    tm.values["style_score"] = mean(styles);
    report.tasks.emplace("gqa", std::move(tm));
  }

  // ST: BLEU / ROUGE-1 / style matching on greedy decodes
  if (auto it = test_sets.find("st"); it != test_sets.end() && !it->second.empty()) {
    std::vector<double> bleus, rouges, matches;
    for (const TaskExample& ex : it->second) {
      const std::string decoded = greedy_decode(
          state, prompt_tokens("st", ex.instruction()), options.max_new_tokens, "st");
      const BleuBreakdown b = bleu_detail(decoded, ex.st().original);
      const double r1 = rouge1(decoded, ex.st().original);
      const int sm = style_match(decoded, ex.st().original, ex.instruction(), options.judge,
                                 options.client, options.judge_model);
      bleus.push_back(b.bleu);
      rouges.push_back(r1);
      matches.push_back(sm);
      emit({{"task", "st"},
            {"input", ex.instruction()},
            {"output", decoded},
            {"gold", ex.st().original},
            {"metrics",
             {{"bleu", b.bleu},
              {"p1", b.precisions[0]},
              {"p2", b.precisions[1]},
              {"p3", b.precisions[2]},
              {"p4", b.precisions[3]},
              {"brevity_penalty", b.brevity_penalty},
              {"rouge1", r1},
              {"style_match", sm}}}});
    }
    TaskMetrics tm;
    tm.count = bleus.size();
    tm.values["bleu"] = mean(bleus);
    tm.values["rouge1"] = mean(rouges);
    tm.values["style_matching"] = mean(matches);
    report.tasks.emplace("st", std::move(tm));
  }

  return report;
}

}  // namespace charbot
