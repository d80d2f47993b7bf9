#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace charbot {

inline constexpr const char* kPromptVersion = "prompts-v1";

// The fixed prompt assets of the pipeline: three dataset generators, the
// perspective-reframing rewrite, and the two judge prompts. Placeholders use
// {name} syntax; {author} generalizes the target persona.
enum class PromptTemplate {
  McqGeneration,     // -> JSON array of {question, option[4], answer}
  GqaGeneration,     // -> JSON array of {question, answer}
  StGeneration,      // -> JSON array of {original, plain}
  AprRewrite,        // -> reframed article text
  ContentStyleJudge, // -> 4 lines, scores on lines 2 and 4
  StyleMatchJudge,   // -> "1" or "0"
};

const std::string& prompt_template(PromptTemplate t);
std::string template_id(PromptTemplate t);

std::string render_template(PromptTemplate t,
                            const std::vector<std::pair<std::string, std::string>>& values);

// Recovers the template a rendered prompt came from; how the offline stub
// decides what shape of reply to produce.
std::optional<PromptTemplate> detect_template(const std::string& rendered);

}  // namespace charbot
