#include "charbot/prompts.hpp"

#include "charbot/errors.hpp"
#include "charbot/text.hpp"

namespace charbot {

namespace {

const std::string kMcqGeneration = R"(This article titled {title} was written by {author}. The content is as follows: {input_article}. Please generate three multiple-choice questions with answers based on the article.

Each question should directly inquire about {author}'s viewpoints, phrased in second-person ("you") addressing them directly, avoiding terms like "the author," "{author}," "this article," or "the text." Each question must have four options with one correct answer. If involving specific concepts, explain them within the question. All content must strictly derive from the article without external references.

Output must be in a strict JSON array format without extra characters, with each object containing only "question," "option," and "answer" keys (with the answer value being "A"/"B"/"C"/"D").)";

const std::string kGqaGeneration = R"(This article titled {title} was written by {author}. The content is as follows: {input_article}. Please generate three question-answer pairs based on this article.

Each question should directly inquire about {author}'s viewpoints based on the article's content. Questions must be phrased in second-person ("you") addressing {author} directly, without mentioning terms like "the author," "{author}," "this article," or "the text." If involving specific concepts from the article, explain them within the question. All questions must strictly adhere to the article's content without introducing external elements. Answers should reflect {author}'s original language style and perspective, maintain detailed accuracy aligned with the text, and avoid terms like "{author}," "author," or "article."

Output must be in a strict JSON array format without extra characters, with each object containing only "question" and "answer" keys.)";

const std::string kStGeneration = R"(You are familiar with {author}'s writing style and modern vernacular language. Given a passage from {author}'s work, select three representative sentences and convert them to modern vernacular.

[Requirements]
1. Selected sentences should exemplify {author}'s stylistic features and reflect the article's main themes.
2. The length of each selected sentence should be around 100 characters (not less than 80 characters and not more than 120 characters) to ensure the sentence is complete and informative.
3. When converting, use smooth modern vernacular language to convey the original meaning of the sentence, avoiding overly complex or obscure expressions.
4. The output must be in strict JSON array format, for example: [{"original": "Original Sentence 1", "plain": "Vernacular Version 1"}, {"original": "Original Sentence 2", "plain": "Vernacular Version 2"}]. Do not include any extra characters or explanations.

[Input Article]
{input_article})";

const std::string kAprRewrite = R"(Please use modern vernacular language to paraphrase the following article by {author} from a third-person perspective and accurately convey the original information.

[Requirements]
1. Clear Attribution: Use phrases such as "{author} pointed out," "{author} believed," "{author} said," "{author} criticized," "{author} mocked," or other appropriate expressions to indicate that the viewpoints belong to {author}. Each paraphrased paragraph must include at least one explicit attribution to {author}; when necessary, the attribution must clearly state that the viewpoint belongs to {author}.
2. Sentence-by-Sentence Paraphrasing: Each sentence of the original text must be paraphrased individually in smooth modern vernacular from a third-person perspective. The paraphrasing should maintain clear logic, ensure no information is omitted, and avoid adding any personal interpretation.
3. Use fluent modern vernacular expressions (no archaic language).
4. Include {author}'s name as frequently as possible throughout the paraphrased article.
5. Output only the paraphrased text.

[Input Article]
{input_article})";

const std::string kContentStyleJudge = R"(You are a reviewer and scoring expert who is very familiar with {author}'s writings. Some AI chatbots are simulating {author}'s responses. You are now required to evaluate the following AI chatbots' responses simulating {author}, based solely on the provided original text.

1. Evaluate whether the response conforms to the language style of the provided original text:
   - Consider only language style factors; do not take into account the core content meaning or any other factors.
   [Direct deduction conditions]
   - Using plain modern vernacular,
   - Using a different language than the original text,
   - Using commonly used modern vocabulary that does not match the style of the provided original text,
   - Using a preachy tone.

2. Evaluate whether the response conforms to the core content meaning of the provided original text (including whether it aligns with the facts of the provided original text, and whether it is consistent with the ideas, emotions, or stances expressed in the provided original text):
   - Consider only the core content meaning factors; do not take into account the language style or any other factors.
   [Direct deduction conditions]
   - Being vague and off-topic, unrelated to the original text.

3. Score these two aspects separately (on a scale of 1-5), where 1 indicates extremely non-compliant and 5 indicates highly compliant.

Please evaluate each AI chatbot's response according to the following format. For each response, output only 4 lines, with the 2nd and 4th lines containing only the numeric scores:
Line 1: A brief evaluation of the language style.
Line 2: Language style score (1-5).
Line 3: A brief evaluation of the core content meaning.
Line 4: Core content meaning score (1-5).

Evaluation begins:

[Original Text]
{original_text}

[User's Question]
{user_question}

[AI Chatbot's Response]
{ai_response})";

const std::string kStyleMatchJudge = R"(You are an expert in language style analysis. Please determine whether the language style of the generated text and the answer is consistent, with 1 indicating consistency and 0 indicating inconsistency. Please output only the number 1 or 0, without any additional content.

Question:
{question}

Generated Text:
{generated_text}

Answer:
{answer})";

}  // namespace

const std::string& prompt_template(PromptTemplate t) {
  switch (t) {
    case PromptTemplate::McqGeneration: return kMcqGeneration;
    case PromptTemplate::GqaGeneration: return kGqaGeneration;
    case PromptTemplate::StGeneration: return kStGeneration;
    case PromptTemplate::AprRewrite: return kAprRewrite;
    case PromptTemplate::ContentStyleJudge: return kContentStyleJudge;
    case PromptTemplate::StyleMatchJudge: return kStyleMatchJudge;
  }
  throw UnknownTemplate("prompt_template: unknown template");
}

std::string template_id(PromptTemplate t) {
  switch (t) {
    case PromptTemplate::McqGeneration: return "gen_mcq";
    case PromptTemplate::GqaGeneration: return "gen_gqa";
    case PromptTemplate::StGeneration: return "gen_st";
    case PromptTemplate::AprRewrite: return "apr";
    case PromptTemplate::ContentStyleJudge: return "judge_content_style";
    case PromptTemplate::StyleMatchJudge: return "judge_style_match";
  }
  throw UnknownTemplate("template_id: unknown template");
}

std::string render_template(PromptTemplate t,
                            const std::vector<std::pair<std::string, std::string>>& values) {
  return substitute_placeholders(prompt_template(t), values);
}

std::optional<PromptTemplate> detect_template(const std::string& rendered) {
  struct Marker {
    PromptTemplate t;
    const char* needle;
  };
  static const Marker markers[] = {
      {PromptTemplate::McqGeneration, "three multiple-choice questions"},
      {PromptTemplate::GqaGeneration, "three question-answer pairs"},
      {PromptTemplate::StGeneration, "select three representative sentences"},
      {PromptTemplate::AprRewrite, "from a third-person perspective"},
      {PromptTemplate::ContentStyleJudge, "output only 4 lines"},
      {PromptTemplate::StyleMatchJudge, "output only the number 1 or 0"},
  };
  for (const Marker& m : markers)
    if (rendered.find(m.needle) != std::string::npos) return m.t;
  return std::nullopt;
}

}  // namespace charbot
