#include "charbot/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <map>

#include "charbot/container.hpp"
#include "charbot/errors.hpp"
#include "charbot/rng.hpp"

namespace charbot {

void LMConfig::validate() const {
  if (vocab_base == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0)
    throw ValidationError("LMConfig: all dimensions must be positive");
  if (d_model % n_heads != 0) throw ValidationError("LMConfig: d_model must divide by n_heads");
  if (max_seq < 16) throw ValidationError("LMConfig: max_seq must be at least 16");
}

nlohmann::json LMConfig::to_json() const {
  return {{"vocab_base", vocab_base}, {"n_special", n_special},   {"d_model", d_model},
          {"n_layers", n_layers},     {"n_heads", n_heads},       {"d_ff", d_ff},
          {"max_seq", max_seq},       {"seed", seed},             {"adapter_layers", adapter_layers},
          {"template_version", template_version}};
}

LMConfig LMConfig::from_json(const nlohmann::json& j) {
  LMConfig c;
  c.vocab_base = j.at("vocab_base").get<std::size_t>();
  c.n_special = j.at("n_special").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.max_seq = j.at("max_seq").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.adapter_layers = j.at("adapter_layers").get<std::vector<std::string>>();
  c.template_version = j.at("template_version").get<std::string>();
  c.validate();
  return c;
}

std::vector<int> tokenize_bytes(const std::string& text) {
  std::vector<int> out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<int>(c));
  return out;
}

std::string detokenize(const std::vector<int>& ids) {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids)
    if (id >= 0 && id < 256) out += static_cast<char>(static_cast<unsigned char>(id));
  return out;
}

// --- state ------------------------------------------------------------------

PretrainAdapterSet& ModelState::pretrain_set() {
  if (auto* p = std::get_if<PretrainAdapterSet>(&adapters)) return *p;
  throw ValidationError("model state does not hold a pre-train adapter set");
}
const PretrainAdapterSet& ModelState::pretrain_set() const {
  if (auto* p = std::get_if<PretrainAdapterSet>(&adapters)) return *p;
  throw ValidationError("model state does not hold a pre-train adapter set");
}
TaskAdapterBank& ModelState::bank() {
  if (auto* p = std::get_if<TaskAdapterBank>(&adapters)) return *p;
  throw ValidationError("model state does not hold a task adapter bank");
}
const TaskAdapterBank& ModelState::bank() const {
  if (auto* p = std::get_if<TaskAdapterBank>(&adapters)) return *p;
  throw ValidationError("model state does not hold a task adapter bank");
}
MultiTaskAdapters& ModelState::multi() {
  if (auto* p = std::get_if<MultiTaskAdapters>(&adapters)) return *p;
  throw ValidationError("model state does not hold per-task adapters");
}
const MultiTaskAdapters& ModelState::multi() const {
  if (auto* p = std::get_if<MultiTaskAdapters>(&adapters)) return *p;
  throw ValidationError("model state does not hold per-task adapters");
}

std::vector<std::pair<std::string, Tensor>> ModelState::named_base_tensors() {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("tok_emb", tok_emb);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "blk" + std::to_string(i) + ".";
    BlockWeights& b = blocks[i];
    out.emplace_back(p + "ln1.g", b.ln1_gain);
    out.emplace_back(p + "ln1.b", b.ln1_bias);
    for (auto* lin : {&b.wq, &b.wk, &b.wv, &b.wo, &b.fc1, &b.fc2}) {
      out.emplace_back(lin->layer_id + ".W", lin->W0);
      if (lin->bias.defined()) out.emplace_back(lin->layer_id + ".b", lin->bias);
    }
    out.emplace_back(p + "ln2.g", b.ln2_gain);
    out.emplace_back(p + "ln2.b", b.ln2_bias);
  }
  out.emplace_back("lnf.g", lnf_gain);
  out.emplace_back("lnf.b", lnf_bias);
  out.emplace_back("lm_head.W", lm_head.W0);
  return out;
}

std::vector<const BaseLinear*> ModelState::all_linears() const {
  std::vector<const BaseLinear*> out;
  for (const BlockWeights& b : blocks)
    for (const BaseLinear* lin : {&b.wq, &b.wk, &b.wv, &b.wo, &b.fc1, &b.fc2}) out.push_back(lin);
  out.push_back(&lm_head);
  return out;
}

std::vector<BaseLinear> ModelState::adapter_target_layers() const {
  std::vector<std::string> wanted = config.adapter_layers;
  if (wanted.empty()) wanted = default_adapter_layer_ids(config);
  std::vector<BaseLinear> out;
  for (const BaseLinear* lin : all_linears())
    if (std::find(wanted.begin(), wanted.end(), lin->layer_id) != wanted.end()) out.push_back(*lin);
  if (out.size() != wanted.size())
    throw ValidationError("adapter allowlist names a layer the model does not have");
  return out;
}

std::vector<std::string> default_adapter_layer_ids(const LMConfig& config) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    const std::string p = "blk" + std::to_string(i) + ".";
    for (const char* name : {"attn.q", "attn.k", "attn.v", "attn.o", "ffn.fc1", "ffn.fc2"})
      out.push_back(p + name);
  }
  return out;
}

namespace {

Tensor gaussian_tensor(std::vector<std::size_t> shape, double stddev, Rng& rng) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  std::vector<double> data(n);
  for (double& v : data) v = rng.next_gaussian(0.0, stddev);
  return Tensor(std::move(shape), std::move(data), false);
}

BaseLinear make_linear(const std::string& id, std::size_t d, std::size_t k, Rng& rng,
                       bool with_bias = true) {
  Tensor w = gaussian_tensor({d, k}, 1.0 / std::sqrt(static_cast<double>(k)), rng);
  Tensor b = with_bias ? Tensor::zeros({d}) : Tensor();
  return BaseLinear(id, std::move(w), std::move(b));
}

// Sinusoidal position table [max_seq x d]; a pure function of the config.
Tensor position_table(const LMConfig& cfg) {
  Tensor pe = Tensor::zeros({cfg.max_seq, cfg.d_model});
  for (std::size_t pos = 0; pos < cfg.max_seq; ++pos) {
    for (std::size_t i = 0; 2 * i < cfg.d_model; ++i) {
      const double angle =
          static_cast<double>(pos) /
          std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(cfg.d_model));
      pe.at(pos, 2 * i) = std::sin(angle);
      if (2 * i + 1 < cfg.d_model) pe.at(pos, 2 * i + 1) = std::cos(angle);
    }
  }
  return pe;
}

}  // namespace

ModelState init_model(const LMConfig& config) {
  config.validate();
  ModelState s;
  s.config = config;
  const std::size_t d = config.d_model, v = config.vocab_size();

  {
    Rng rng(Rng::hash_str(config.seed, "tok_emb"));
    s.tok_emb = gaussian_tensor({v, d}, 0.5, rng);
  }
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    const std::string p = "blk" + std::to_string(i) + ".";
    Rng rng(Rng::hash_str(config.seed, p));
    BlockWeights b;
    b.ln1_gain = Tensor::full({d}, 1.0);
    b.ln1_bias = Tensor::zeros({d});
    b.wq = make_linear(p + "attn.q", d, d, rng);
    b.wk = make_linear(p + "attn.k", d, d, rng);
    b.wv = make_linear(p + "attn.v", d, d, rng);
    b.wo = make_linear(p + "attn.o", d, d, rng);
    b.ln2_gain = Tensor::full({d}, 1.0);
    b.ln2_bias = Tensor::zeros({d});
    b.fc1 = make_linear(p + "ffn.fc1", config.d_ff, d, rng);
    b.fc2 = make_linear(p + "ffn.fc2", d, config.d_ff, rng);
    s.blocks.push_back(std::move(b));
  }
  s.lnf_gain = Tensor::full({d}, 1.0);
  s.lnf_bias = Tensor::zeros({d});
  {
    Rng rng(Rng::hash_str(config.seed, "lm_head"));
    s.lm_head = make_linear("lm_head", v, d, rng, /*with_bias=*/false);
  }
  return s;
}

namespace {

AdapterRef lookup_adapter(const ModelState& state, const std::string& layer_id,
                          const std::optional<std::string>& task) {
  if (const auto* set = std::get_if<PretrainAdapterSet>(&state.adapters))
    return resolve_adapter(*set, layer_id);
  if (const auto* bank = std::get_if<TaskAdapterBank>(&state.adapters)) {
    if (!task) throw UnknownTask("lm_forward: a task is required with task-routed adapters");
    return resolve_adapter(*bank, layer_id, *task);
  }
  if (const auto* multi = std::get_if<MultiTaskAdapters>(&state.adapters)) {
    if (!task) throw UnknownTask("lm_forward: a task is required with per-task adapters");
    auto it = multi->per_task.find(*task);
    if (it == multi->per_task.end())
      throw UnknownTask("lm_forward: no per-task adapters for '" + *task + "'");
    return resolve_adapter(it->second, layer_id);
  }
  return {};
}

}  // namespace

Tensor lm_forward(const ModelState& state, const std::vector<int>& tokens,
                  const std::optional<std::string>& task) {
  const LMConfig& cfg = state.config;
  if (tokens.empty()) throw ValidationError("lm_forward: empty token sequence");
  if (tokens.size() > cfg.max_seq)
    throw SequenceTooLong("lm_forward: " + std::to_string(tokens.size()) +
                          " tokens exceed max_seq " + std::to_string(cfg.max_seq));
  const std::size_t len = tokens.size();
  const std::size_t d = cfg.d_model;
  const std::size_t heads = cfg.n_heads;
  const std::size_t hd = d / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // The position table is a pure function of (max_seq, d_model); cache it.
  static thread_local struct {
    std::size_t max_seq = 0;
    std::size_t d_model = 0;
    Tensor table;
  } pos_cache;
  if (pos_cache.max_seq != cfg.max_seq || pos_cache.d_model != cfg.d_model) {
    pos_cache.table = position_table(cfg);
    pos_cache.max_seq = cfg.max_seq;
    pos_cache.d_model = cfg.d_model;
  }
  Tensor pos = Tensor::zeros({len, d});
  std::copy_n(pos_cache.table.data(), len * d, pos.data());

  Tensor x = add(embedding_rows(state.tok_emb, tokens), pos);
  for (const BlockWeights& blk : state.blocks) {
    Tensor h = layer_norm(x, blk.ln1_gain, blk.ln1_bias);
    Tensor q = adapted_linear(blk.wq, h, lookup_adapter(state, blk.wq.layer_id, task));
    Tensor k = adapted_linear(blk.wk, h, lookup_adapter(state, blk.wk.layer_id, task));
    Tensor v = adapted_linear(blk.wv, h, lookup_adapter(state, blk.wv.layer_id, task));
    std::vector<Tensor> head_outputs;
    head_outputs.reserve(heads);
    for (std::size_t hidx = 0; hidx < heads; ++hidx) {
      Tensor qh = slice_cols(q, hidx * hd, hd);
      Tensor kh = slice_cols(k, hidx * hd, hd);
      Tensor vh = slice_cols(v, hidx * hd, hd);
      Tensor scores = scale(matmul_nt(qh, kh), att_scale);
      Tensor probs = causal_softmax_rows(scores);
      head_outputs.push_back(matmul(probs, vh));
    }
    Tensor attn = concat_cols(head_outputs);
    Tensor o = adapted_linear(blk.wo, attn, lookup_adapter(state, blk.wo.layer_id, task));
    x = add(x, o);

    Tensor h2 = layer_norm(x, blk.ln2_gain, blk.ln2_bias);
    Tensor f = adapted_linear(blk.fc1, h2, lookup_adapter(state, blk.fc1.layer_id, task));
    Tensor g = gelu(f);
    Tensor f2 = adapted_linear(blk.fc2, g, lookup_adapter(state, blk.fc2.layer_id, task));
    x = add(x, f2);
  }
  Tensor h = layer_norm(x, state.lnf_gain, state.lnf_bias);
  return adapted_linear(state.lm_head, h, lookup_adapter(state, state.lm_head.layer_id, task));
}

double sequence_logprob(const ModelState& state, const std::vector<int>& prompt,
                        const std::vector<int>& continuation,
                        const std::optional<std::string>& task) {
  if (continuation.empty()) return 0.0;
  std::vector<int> tokens = prompt;
  tokens.insert(tokens.end(), continuation.begin(), continuation.end());
  if (tokens.size() > state.config.max_seq)
    throw SequenceTooLong("sequence_logprob: combined length " + std::to_string(tokens.size()) +
                          " exceeds max_seq " + std::to_string(state.config.max_seq));
  Tensor logits = lm_forward(state, tokens, task);
  const std::size_t v = state.config.vocab_size();
  double total = 0.0;
  for (std::size_t i = 0; i < continuation.size(); ++i) {
    const std::size_t pos = prompt.size() + i;  // token at pos predicted by logits[pos-1]
    if (pos == 0) throw ValidationError("sequence_logprob: continuation needs a non-empty prompt");
    total += log_softmax_at(logits.data() + (pos - 1) * v,
                            v, static_cast<std::size_t>(tokens[pos]));
  }
  return total;
}

char answer_mcq(const ModelState& state, const std::string& question,
                const std::vector<std::string>& options, const std::string& task) {
  if (options.size() != 4) throw ValidationError("answer_mcq: exactly four options are required");
  for (const std::string& o : options)
    if (o.empty()) throw ValidationError("answer_mcq: options must be non-empty");
  const std::array<std::string, 4> opts{options[0], options[1], options[2], options[3]};
  const std::vector<int> prompt = prompt_tokens(task, render_mcq_instruction(question, opts));
  char best = 'A';
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<int> cont = tokenize_bytes(options[i]);
    const std::size_t budget = state.config.max_seq - prompt.size();
    if (cont.size() > budget) cont.resize(budget);
    if (cont.empty()) continue;
    const double lp = sequence_logprob(state, prompt, cont, task);
    const double score = lp / static_cast<double>(cont.size());
    if (score > best_score) {
      best_score = score;
      best = static_cast<char>('A' + i);
    }
  }
  return best;
}

std::string greedy_decode(const ModelState& state, const std::vector<int>& prompt,
                          std::size_t max_new, const std::optional<std::string>& task) {
  if (prompt.size() > state.config.max_seq)
    throw SequenceTooLong("greedy_decode: prompt exceeds max_seq");
  std::vector<int> tokens = prompt;
  std::vector<int> generated;
  const std::size_t v = state.config.vocab_size();
  for (std::size_t step = 0; step < max_new; ++step) {
    if (tokens.size() >= state.config.max_seq) break;
    Tensor logits = lm_forward(state, tokens, task);
    const double* row = logits.data() + (tokens.size() - 1) * v;
    int best = 0;
    for (std::size_t j = 1; j < v; ++j)
      if (row[j] > row[best]) best = static_cast<int>(j);
    if (best == kTokenEos) break;
    generated.push_back(best);
    tokens.push_back(best);
  }
  return detokenize(generated);
}

// --- prompt rendering ---------------------------------------------------------

std::string task_tag(const std::string& task) {
  if (task == "mcq") return "[MCQ]";
  if (task == "gqa") return "[GQA]";
  if (task == "st") return "[ST]";
  std::string upper = task;
  std::transform(upper.begin(), upper.end(), upper.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  return "[" + upper + "]";
}

std::string render_mcq_instruction(const std::string& question,
                                   const std::array<std::string, 4>& options) {
  std::string out = question;
  const char* letters = "ABCD";
  for (std::size_t i = 0; i < 4; ++i) {
    out += "\n";
    out += letters[i];
    out += ": ";
    out += options[i];
  }
  return out;
}

std::string render_st_instruction(const std::string& plain) {
  return "Describe the following paragraph in your tone: " + plain;
}

std::string render_prompt(const std::string& task, const std::string& instruction) {
  return task_tag(task) + " Instruction: " + instruction + "\nResponse:";
}

std::vector<int> prompt_tokens(const std::string& task, const std::string& instruction) {
  std::vector<int> out;
  out.push_back(kTokenBos);
  for (int t : tokenize_bytes(render_prompt(task, instruction))) out.push_back(t);
  out.push_back(kTokenSep);
  return out;
}

RenderedExample render_training_example(const std::string& task, const std::string& instruction,
                                        const std::string& response, std::size_t cutoff,
                                        bool pad_to_cutoff) {
  RenderedExample ex;
  ex.tokens = prompt_tokens(task, instruction);
  const std::size_t prompt_len = ex.tokens.size();
  for (int t : tokenize_bytes(response)) ex.tokens.push_back(t);
  ex.tokens.push_back(kTokenEos);
  if (ex.tokens.size() > cutoff) ex.tokens.resize(cutoff);
  ex.loss_mask.assign(ex.tokens.size(), 0);
  for (std::size_t i = prompt_len; i < ex.tokens.size(); ++i) ex.loss_mask[i] = 1;
  if (pad_to_cutoff) {
    while (ex.tokens.size() < cutoff) {
      ex.tokens.push_back(kTokenPad);
      ex.loss_mask.push_back(0);
    }
  }
  return ex;
}

// --- checkpoints ---------------------------------------------------------------

namespace {
constexpr const char* kModelMagic = "CHLM";
}

void write_checkpoint(const std::filesystem::path& path, const ModelState& state) {
  Container c;
  c.magic = kModelMagic;
  auto& self = const_cast<ModelState&>(state);
  nlohmann::json manifest = nlohmann::json::array();
  for (auto& [name, t] : self.named_base_tensors()) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}});
    c.payload.insert(c.payload.end(), t.values().begin(), t.values().end());
  }
  c.header = {{"kind", "model"}, {"config", state.config.to_json()}, {"tensors", manifest}};
  write_container(path, c);
}

ModelState read_checkpoint(const std::filesystem::path& path) {
  Container c = read_container(path, kModelMagic);
  if (!c.header.contains("config") || !c.header.contains("tensors"))
    throw ShapeHeaderMismatch("checkpoint header missing 'config' or 'tensors'");
  ModelState state = init_model(LMConfig::from_json(c.header.at("config")));

  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : state.named_base_tensors()) by_name.emplace(name, t);

  std::size_t pos = 0;
  for (const auto& entry : c.header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw ShapeHeaderMismatch("checkpoint names unknown tensor '" + name + "'");
    Tensor t = it->second;
    if (t.shape() != shape)
      throw ShapeHeaderMismatch("checkpoint tensor '" + name + "' has unexpected shape");
    if (pos + t.numel() > c.payload.size())
      throw TruncatedPayload("checkpoint payload ends before tensor '" + name + "'");
    std::copy_n(c.payload.begin() + pos, t.numel(), t.values().begin());
    pos += t.numel();
  }
  if (pos != c.payload.size())
    throw ShapeHeaderMismatch("checkpoint payload holds more values than the manifest declares");
  return state;
}

}  // namespace charbot
