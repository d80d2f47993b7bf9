#include "charbot/corpus.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "charbot/errors.hpp"
#include "charbot/model.hpp"
#include "charbot/prompts.hpp"
#include "charbot/rng.hpp"
#include "charbot/text.hpp"

namespace charbot {

std::string essay_id(const std::string& collection, const std::string& title) {
  // FNV-1a over collection and title with a separator byte.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  };
  feed(collection);
  h ^= 0x1f;
  h *= 0x100000001b3ULL;
  feed(title);
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

namespace {

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void push_essay(Corpus& corpus, std::set<std::string>& ids, std::string collection,
                std::string title, std::string body) {
  if (!is_valid_utf8(body))
    throw InvalidUtf8("essay '" + title + "' in '" + collection + "' is not valid UTF-8");
  if (trim(body).empty())
    throw EmptyBody("essay '" + title + "' in '" + collection + "' has an empty body");
  Essay e;
  e.collection = std::move(collection);
  e.title = std::move(title);
  e.body = std::move(body);
  e.id = essay_id(e.collection, e.title);
  if (!ids.insert(e.id).second)
    throw DuplicateEssayId("duplicate essay '" + e.title + "' in collection '" + e.collection +
                           "'");
  corpus.essays.push_back(std::move(e));
}

}  // namespace

Corpus load_corpus(const std::filesystem::path& path) {
  Corpus corpus;
  std::set<std::string> ids;

  if (std::filesystem::is_directory(path)) {
    std::vector<std::filesystem::path> entries;
    for (const auto& entry : std::filesystem::directory_iterator(path))
      entries.push_back(entry.path());
    std::sort(entries.begin(), entries.end());
    const std::string root_collection = path.filename().string();
    for (const auto& entry : entries) {
      if (std::filesystem::is_directory(entry)) {
        std::vector<std::filesystem::path> files;
        for (const auto& f : std::filesystem::directory_iterator(entry))
          if (f.path().extension() == ".txt") files.push_back(f.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files)
          push_essay(corpus, ids, entry.filename().string(), f.stem().string(),
                     read_text_file(f));
      } else if (entry.extension() == ".txt") {
        push_essay(corpus, ids, root_collection, entry.stem().string(), read_text_file(entry));
      }
    }
  } else if (path.extension() == ".jsonl") {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (trim(line).empty()) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw IoError("manifest line " + std::to_string(line_no) + " is not JSON: " + e.what());
      }
      push_essay(corpus, ids, j.at("collection").get<std::string>(),
                 j.at("title").get<std::string>(), j.at("body").get<std::string>());
    }
  } else {
    throw IoError("load_corpus: expected a directory or a .jsonl manifest, got " + path.string());
  }

  if (corpus.essays.empty()) throw EmptyCorpus("load_corpus: no essays found in " + path.string());
  std::sort(corpus.essays.begin(), corpus.essays.end(), [](const Essay& a, const Essay& b) {
    return std::tie(a.collection, a.title) < std::tie(b.collection, b.title);
  });
  return corpus;
}

// --- TaskExample ------------------------------------------------------------------

void TaskExample::validate(bool live_lengths) const {
  if (source_essay_id.empty()) throw SchemaViolation("source_essay_id is empty", "source_essay_id");
  if (task == "mcq") {
    const auto& m = mcq();
    if (m.question.empty()) throw SchemaViolation("mcq question is empty", "question");
    for (const std::string& o : m.options)
      if (o.empty()) throw SchemaViolation("mcq option is empty", "option");
    if (m.answer < 'A' || m.answer > 'D')
      throw SchemaViolation("mcq answer must be one of A-D", "answer");
  } else if (task == "gqa") {
    const auto& g = gqa();
    if (g.question.empty()) throw SchemaViolation("gqa question is empty", "question");
    if (g.answer.empty()) throw SchemaViolation("gqa answer is empty", "answer");
  } else if (task == "st") {
    const auto& s = st();
    if (s.original.empty()) throw SchemaViolation("st original is empty", "original");
    if (s.plain.empty()) throw SchemaViolation("st plain is empty", "plain");
    if (live_lengths) {
      const std::size_t len = codepoint_count(s.original);
      if (len < 80 || len > 120)
        throw SchemaViolation(
            "st original must be 80-120 characters, got " + std::to_string(len), "original");
    }
  } else {
    throw SchemaViolation("unknown task '" + task + "'", "task");
  }
}

nlohmann::json TaskExample::to_json() const {
  nlohmann::json j = {{"task", task}, {"source_essay_id", source_essay_id}};
  if (task == "mcq") {
    const auto& m = mcq();
    j["question"] = m.question;
    j["option"] = std::vector<std::string>(m.options.begin(), m.options.end());
    j["answer"] = std::string(1, m.answer);
  } else if (task == "gqa") {
    j["question"] = gqa().question;
    j["answer"] = gqa().answer;
  } else {
    j["original"] = st().original;
    j["plain"] = st().plain;
  }
  return j;
}

TaskExample TaskExample::from_json(const nlohmann::json& j) {
  TaskExample ex;
  ex.task = j.at("task").get<std::string>();
  ex.source_essay_id = j.at("source_essay_id").get<std::string>();
  if (ex.task == "mcq") {
    McqExample m;
    m.question = j.at("question").get<std::string>();
    const auto opts = j.at("option").get<std::vector<std::string>>();
    if (opts.size() != 4)
      throw SchemaViolation("mcq needs exactly 4 options, got " + std::to_string(opts.size()),
                            "option");
    std::copy(opts.begin(), opts.end(), m.options.begin());
    const std::string ans = j.at("answer").get<std::string>();
    if (ans.size() != 1) throw SchemaViolation("mcq answer must be a single letter", "answer");
    m.answer = ans[0];
    ex.payload = std::move(m);
  } else if (ex.task == "gqa") {
    ex.payload = GqaExample{j.at("question").get<std::string>(), j.at("answer").get<std::string>()};
  } else if (ex.task == "st") {
    ex.payload = StExample{j.at("original").get<std::string>(), j.at("plain").get<std::string>()};
  } else {
    throw SchemaViolation("unknown task '" + ex.task + "'", "task");
  }
  ex.validate();
  return ex;
}

std::string TaskExample::instruction() const {
  if (task == "mcq") return render_mcq_instruction(mcq().question, mcq().options);
  if (task == "gqa") return gqa().question;
  return render_st_instruction(st().plain);
}

std::string TaskExample::response() const {
  if (task == "mcq") return std::string(1, mcq().answer);
  if (task == "gqa") return gqa().answer;
  return st().original;
}

void write_examples_jsonl(const std::filesystem::path& path,
                          const std::vector<TaskExample>& examples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const TaskExample& ex : examples) out << ex.to_json().dump() << "\n";
}

std::vector<TaskExample> read_examples_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<TaskExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      out.push_back(TaskExample::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": not valid JSON: " +
                    e.what());
    }
  }
  return out;
}

// --- APR ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_paragraphs(const std::string& text) {
  std::vector<std::string> out;
  std::string current;
  const std::vector<std::string> lines = split_lines(text);
  for (const std::string& line : lines) {
    if (trim(line).empty()) {
      if (!trim(current).empty()) out.push_back(current);
      current.clear();
    } else {
      if (!current.empty()) current += "\n";
      current += line;
    }
  }
  if (!trim(current).empty()) out.push_back(current);
  return out;
}

}  // namespace

AprResult apr_transform(const Essay& essay, AprMode mode, const std::string& attribution_name,
                        ChatClient* client, const std::string& model_name) {
  if (trim(essay.body).empty()) throw EmptyBody("apr_transform: essay body is empty");
  const std::string prefix = attribution_name + " pointed out: ";
  if (essay.body.find(prefix) != std::string::npos)
    throw AlreadyTransformed("apr_transform: body already carries '" + prefix +
                             "' attributions");

  if (mode == AprMode::Fallback) {
    AprResult result;
    const std::vector<std::string> sentences = split_sentences(essay.body);
    for (std::size_t i = 0; i < sentences.size(); ++i) {
      if (i) result.text += " ";
      result.text += prefix + sentences[i];
    }
    return result;
  }

  if (client == nullptr) throw ClientError("apr_transform: live mode requires a client");
  const std::string prompt = render_template(
      PromptTemplate::AprRewrite,
      {{"author", attribution_name}, {"input_article", essay.body}});
  AprResult result;
  result.text = client->complete(ChatRequest::single_user(model_name, prompt)).content;
  const std::vector<std::string> paragraphs = split_paragraphs(result.text);
  for (std::size_t i = 0; i < paragraphs.size(); ++i) {
    if (paragraphs[i].find(attribution_name) == std::string::npos)
      result.warnings.push_back("paragraph " + std::to_string(i + 1) +
                                " carries no attribution to " + attribution_name);
  }
  return result;
}

// --- generation -----------------------------------------------------------------------

namespace {

PromptTemplate template_for_task(const std::string& task) {
  if (task == "mcq") return PromptTemplate::McqGeneration;
  if (task == "gqa") return PromptTemplate::GqaGeneration;
  if (task == "st") return PromptTemplate::StGeneration;
  throw ValidationError("unknown task '" + task + "'");
}

void require_keys_exactly(const nlohmann::json& obj, const std::vector<std::string>& keys,
                          const std::string& raw) {
  for (const std::string& k : keys)
    if (!obj.contains(k)) throw SchemaViolation("missing key '" + k + "'", k);
  for (const auto& [k, v] : obj.items())
    if (std::find(keys.begin(), keys.end(), k) == keys.end())
      throw SchemaViolation("unexpected key '" + k + "' in " + raw, k);
}

// Seeded distinct-ish codepoint windows from the essay body.
std::vector<std::string> essay_windows(const Essay& essay, std::uint64_t seed, std::size_t count,
                                       std::size_t width_cp) {
  const std::vector<char32_t> cps = decode_utf8(essay.body);
  const std::size_t n = cps.size();
  const std::size_t width = std::min(width_cp, n);
  Rng rng(seed);
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < count; ++i) {
    std::string chosen;
    for (int attempt = 0; attempt < 8; ++attempt) {
      const std::size_t start = n > width ? rng.next_below(n - width + 1) : 0;
      chosen = encode_utf8(std::vector<char32_t>(cps.begin() + start, cps.begin() + start + width));
      if (seen.insert(chosen).second) break;
    }
    out.push_back(std::move(chosen));
  }
  return out;
}

std::string reversed_codepoints(const std::string& s) {
  std::vector<char32_t> cps = decode_utf8(s);
  std::reverse(cps.begin(), cps.end());
  return encode_utf8(cps);
}

std::vector<TaskExample> synthesize_examples(const Essay& essay, const std::string& task,
                                             std::uint64_t seed) {
  const std::uint64_t stream = Rng::hash_str(Rng::hash_str(seed, essay.id), task);
  Rng rng(Rng::mix(stream, 7));
  std::vector<TaskExample> out;
  if (task == "mcq") {
    const auto windows = essay_windows(essay, stream, 3, 40);
    for (std::size_t i = 0; i < 3; ++i) {
      McqExample m;
      m.question = "Which of the following passages appears in " + essay.title + " (passage " +
                   std::to_string(i + 1) + ")?";
      const std::size_t correct = rng.next_below(4);
      for (std::size_t slot = 0; slot < 4; ++slot) {
        if (slot == correct) {
          m.options[slot] = windows[i];
        } else {
          // corrupted variants keep the distractors essay-flavoured
          std::string distractor = reversed_codepoints(windows[i]) + " [" +
                                   std::to_string(slot + 1) + "]";
          m.options[slot] = distractor;
        }
      }
      m.answer = static_cast<char>('A' + correct);
      out.push_back(TaskExample{task, essay.id, std::move(m)});
    }
  } else if (task == "gqa") {
    const auto windows = essay_windows(essay, stream, 3, 40);
    for (std::size_t i = 0; i < 3; ++i) {
      GqaExample g;
      g.question =
          "What does passage " + std::to_string(i + 1) + " of " + essay.title + " say?";
      g.answer = windows[i];
      out.push_back(TaskExample{task, essay.id, std::move(g)});
    }
  } else if (task == "st") {
    const auto windows = essay_windows(essay, stream, 3, 100);
    for (std::size_t i = 0; i < 3; ++i) {
      StExample s;
      s.original = windows[i];
      s.plain = "A plain restatement of passage " + std::to_string(i + 1) + ": " + windows[i];
      out.push_back(TaskExample{task, essay.id, std::move(s)});
    }
  } else {
    throw ValidationError("unknown task '" + task + "'");
  }
  for (const TaskExample& ex : out) ex.validate();
  return out;
}

}  // namespace

std::vector<TaskExample> parse_generation_reply(const Essay& essay, const std::string& task,
                                                const std::string& raw) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error& e) {
    throw MalformedJudgeJson(std::string("generator reply is not JSON: ") + e.what(), raw);
  }
  if (!j.is_array()) throw MalformedJudgeJson("generator reply is not a JSON array", raw);
  if (j.size() != 3)
    throw SchemaViolation("generator reply must hold exactly 3 items, got " +
                              std::to_string(j.size()),
                          "array");

  std::vector<TaskExample> out;
  for (const auto& item : j) {
    if (!item.is_object()) throw MalformedJudgeJson("generator array item is not an object", raw);
    TaskExample ex;
    ex.task = task;
    ex.source_essay_id = essay.id;
    if (task == "mcq") {
      require_keys_exactly(item, {"question", "option", "answer"}, raw);
      McqExample m;
      m.question = item.at("question").get<std::string>();
      if (!item.at("option").is_array() || item.at("option").size() != 4)
        throw SchemaViolation("mcq 'option' must be an array of 4 strings", "option");
      for (std::size_t i = 0; i < 4; ++i) m.options[i] = item.at("option")[i].get<std::string>();
      const std::string ans = item.at("answer").get<std::string>();
      if (ans.size() != 1) throw SchemaViolation("mcq 'answer' must be a single letter", "answer");
      m.answer = ans[0];
      ex.payload = std::move(m);
    } else if (task == "gqa") {
      require_keys_exactly(item, {"question", "answer"}, raw);
      ex.payload = GqaExample{item.at("question").get<std::string>(),
                              item.at("answer").get<std::string>()};
    } else if (task == "st") {
      require_keys_exactly(item, {"original", "plain"}, raw);
      ex.payload = StExample{item.at("original").get<std::string>(),
                             item.at("plain").get<std::string>()};
    } else {
      throw ValidationError("unknown task '" + task + "'");
    }
    ex.validate(/*live_lengths=*/task == "st");
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<TaskExample> generate_task_data(const Essay& essay, const std::string& task,
                                            GenMode mode, std::uint64_t seed, ChatClient* client,
                                            const std::string& author,
                                            const std::string& model_name) {
  if (mode == GenMode::Synthetic) return synthesize_examples(essay, task, seed);
  if (client == nullptr) throw ClientError("generate_task_data: live mode requires a client");
  const std::string prompt =
      render_template(template_for_task(task), {{"title", essay.title},
                                                {"input_article", essay.body},
                                                {"author", author}});
  const ChatResponse reply = client->complete(ChatRequest::single_user(model_name, prompt));
  return parse_generation_reply(essay, task, reply.content);
}

std::vector<TaskExample> generate_corpus_task_data(const Corpus& corpus, const std::string& task,
                                                   GenMode mode, std::uint64_t seed,
                                                   ChatClient* client, const std::string& author,
                                                   const std::string& model_name,
                                                   int max_in_flight) {
  const std::size_t n = corpus.essays.size();
  std::vector<std::vector<TaskExample>> slots(n);

  if (mode == GenMode::Synthetic) {
    for (std::size_t i = 0; i < n; ++i)
      slots[i] = generate_task_data(corpus.essays[i], task, mode, seed);
  } else {
    const int workers =
        std::max(1, std::min<int>(max_in_flight, static_cast<int>(n)));
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w]() {
        try {
          for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            slots[i] =
                generate_task_data(corpus.essays[i], task, mode, seed, client, author, model_name);
          }
        } catch (...) {
          errors[w] = std::current_exception();
          next.store(n);  // stop other workers picking up new essays
        }
      });
    }
    for (auto& t : pool) t.join();
    for (const auto& err : errors)
      if (err) std::rethrow_exception(err);
  }

  std::vector<TaskExample> out;
  out.reserve(3 * n);
  for (auto& slot : slots) out.insert(out.end(), slot.begin(), slot.end());
  return out;
}

// --- splits ---------------------------------------------------------------------------

void SplitSpec::validate() const {
  const double sum = train + val + test;
  if (std::abs(sum - 1.0) > 1e-9)
    throw ValidationError("SplitSpec: ratios must sum to 1, got " + std::to_string(sum));
  for (double r : {train, val, test})
    if (r <= 0.0 || r >= 1.0) throw ValidationError("SplitSpec: each ratio must be in (0,1)");
}

SplitResult split_dataset(const std::vector<TaskExample>& examples, const SplitSpec& spec) {
  spec.validate();
  if (examples.empty()) throw ValidationError("split_dataset: no examples");
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(spec.seed);
  rng.shuffle(order);

  const auto n = static_cast<double>(examples.size());
  const std::size_t n_train = static_cast<std::size_t>(std::floor(spec.train * n));
  const std::size_t n_val = static_cast<std::size_t>(std::floor(spec.val * n));

  SplitResult result;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const TaskExample& ex = examples[order[i]];
    if (i < n_train)
      result.train.push_back(ex);
    else if (i < n_train + n_val)
      result.val.push_back(ex);
    else
      result.test.push_back(ex);
  }
  return result;
}

}  // namespace charbot
