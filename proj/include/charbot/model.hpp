#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "charbot/charlora.hpp"
#include "charbot/tensor.hpp"
#include "json.hpp"

namespace charbot {

// Byte-level vocabulary with a handful of special markers above 255.
inline constexpr int kTokenBos = 256;
inline constexpr int kTokenEos = 257;
inline constexpr int kTokenSep = 258;
inline constexpr int kTokenPad = 259;

inline constexpr const char* kTemplateVersion = "templates-v1";

struct LMConfig {
  std::size_t vocab_base = 256;  // raw byte values
  std::size_t n_special = 4;     // BOS, EOS, SEP, PAD
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq = 256;
  std::uint64_t seed = 0;
  // Layer ids that receive adapters; empty selects every attention projection
  // and feed-forward linear.
  std::vector<std::string> adapter_layers;
  std::string template_version = kTemplateVersion;

  std::size_t vocab_size() const { return vocab_base + n_special; }
  void validate() const;

  nlohmann::json to_json() const;
  static LMConfig from_json(const nlohmann::json& j);
};

std::vector<int> tokenize_bytes(const std::string& text);
// Inverse of tokenize_bytes on marker-free text; special ids are dropped.
std::string detokenize(const std::vector<int>& ids);

struct BlockWeights {
  Tensor ln1_gain, ln1_bias;
  BaseLinear wq, wk, wv, wo;
  Tensor ln2_gain, ln2_bias;
  BaseLinear fc1, fc2;
};

struct ModelState {
  LMConfig config;
  Tensor tok_emb;  // [V x d]
  std::vector<BlockWeights> blocks;
  Tensor lnf_gain, lnf_bias;
  BaseLinear lm_head;  // [V x d]
  std::variant<std::monostate, PretrainAdapterSet, TaskAdapterBank, MultiTaskAdapters> adapters;

  bool has_adapters() const { return !std::holds_alternative<std::monostate>(adapters); }
  PretrainAdapterSet& pretrain_set();
  const PretrainAdapterSet& pretrain_set() const;
  TaskAdapterBank& bank();
  const TaskAdapterBank& bank() const;
  MultiTaskAdapters& multi();
  const MultiTaskAdapters& multi() const;

  // Base tensors in checkpoint order, paired with stable names.
  std::vector<std::pair<std::string, Tensor>> named_base_tensors();

  // Every linear layer by id, in forward order.
  std::vector<const BaseLinear*> all_linears() const;
  std::vector<BaseLinear> adapter_target_layers() const;
};

// Deterministic random init; base weights are frozen (requires_grad false).
ModelState init_model(const LMConfig& config);

// Default adapter allowlist: attention q/k/v/o and feed-forward fc1/fc2 of
// every block.
std::vector<std::string> default_adapter_layer_ids(const LMConfig& config);

// Causal forward pass: logits [len x vocab]. `task` is required when the
// state holds task-routed adapters.
Tensor lm_forward(const ModelState& state, const std::vector<int>& tokens,
                  const std::optional<std::string>& task = std::nullopt);

// Sum over continuation positions of log softmax(logits)[next token].
double sequence_logprob(const ModelState& state, const std::vector<int>& prompt,
                        const std::vector<int>& continuation,
                        const std::optional<std::string>& task = std::nullopt);

// Argmax over options of length-normalised option log-likelihood, ties to the
// lowest letter. Exactly four options.
char answer_mcq(const ModelState& state, const std::string& question,
                const std::vector<std::string>& options, const std::string& task = "mcq");

// Deterministic argmax decoding; stops at EOS, max_new tokens, or the
// context limit. Ties resolve to the lowest token id.
std::string greedy_decode(const ModelState& state, const std::vector<int>& prompt_tokens,
                          std::size_t max_new, const std::optional<std::string>& task = std::nullopt);

// --- prompt rendering (fixed strings, versioned via LMConfig) ---------------

std::string task_tag(const std::string& task);
std::string render_mcq_instruction(const std::string& question,
                                   const std::array<std::string, 4>& options);
std::string render_st_instruction(const std::string& plain);
// "[TAG] Instruction: ...\nResponse:"
std::string render_prompt(const std::string& task, const std::string& instruction);
// BOS + prompt bytes + SEP
std::vector<int> prompt_tokens(const std::string& task, const std::string& instruction);

struct RenderedExample {
  std::vector<int> tokens;
  std::vector<std::uint8_t> loss_mask;  // 1 on response positions (incl. EOS)
};

// Prompt + response + EOS, truncated to `cutoff`; optionally padded to
// `cutoff` with PAD (mask 0).
RenderedExample render_training_example(const std::string& task, const std::string& instruction,
                                        const std::string& response, std::size_t cutoff,
                                        bool pad_to_cutoff = false);

// --- checkpoints (magic "CHLM") ----------------------------------------------

void write_checkpoint(const std::filesystem::path& path, const ModelState& state);
ModelState read_checkpoint(const std::filesystem::path& path);

}  // namespace charbot
