#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "charbot/corpus.hpp"
#include "charbot/model.hpp"
#include "charbot/optimizer.hpp"
#include "json.hpp"

namespace charbot {

struct TrainConfig {
  std::size_t rank = 64;
  double learning_rate = 5.0e-5;
  std::size_t epochs = 3;
  std::size_t batch_size = 4;
  std::size_t cutoff_pretrain = 2048;
  std::size_t cutoff_finetune = 1024;
  std::string schedule = "round_robin";  // round_robin | sequential
  double apr_mix = 0.5;                  // fraction of reframed text in the pre-train stream
  std::uint64_t seed = 0;
  std::string ablation = "charlora";  // charlora | vanilla_lora | multi_lora
  bool use_apr = true;

  void validate() const;
  nlohmann::json to_json() const;
  // Unknown keys are rejected; missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
};

// Laptop-sized profile: small model, short cutoffs, a learning rate that
// makes a few hundred steps meaningful. TrainConfig defaults stay at the
// full-scale values; this is the configuration the acceptance runs use.
LMConfig desk_lm_config(std::uint64_t seed);
TrainConfig desk_train_config(std::uint64_t seed);

struct StepLog {
  std::size_t step = 0;
  std::string task;
  double loss = 0.0;
  double lr = 0.0;
};

using StepCallback = std::function<void(const StepLog&)>;

struct TrainOptions {
  std::size_t max_steps = 0;   // 0: run cfg.epochs epochs; otherwise stop at this global step
  std::size_t start_step = 0;  // resume point; earlier batches are skipped deterministically
  StepCallback callback;
};

struct TrainResult {
  std::vector<StepLog> history;
};

// --- batching ------------------------------------------------------------------

struct TaskBatch {
  std::string task;
  std::vector<TaskExample> examples;
};

// One epoch of batches. round_robin cycles tasks (skipping exhausted ones),
// sequential drains tasks in declared order; examples are shuffled per task
// with the given seed.
std::vector<TaskBatch> schedule_batches(
    const std::map<std::string, std::vector<TaskExample>>& datasets, const std::string& policy,
    std::size_t batch_size, std::uint64_t seed);

// Non-overlapping cutoff-sized windows; windows shorter than 2 tokens are dropped.
std::vector<std::vector<int>> chunk_token_stream(const std::vector<int>& stream,
                                                 std::size_t cutoff);

// The pre-training chunk pool: original essay bytes plus (per apr_mix)
// reframed texts, EOS-joined per document.
std::vector<std::vector<int>> build_pretrain_chunks(const Corpus& corpus,
                                                    const std::vector<std::string>& apr_texts,
                                                    const TrainConfig& cfg,
                                                    std::size_t max_seq);

// --- the two stages ---------------------------------------------------------------

// Next-token training of the pre-train adapter pair on frozen base weights.
// Initializes the adapter set from cfg if the state has none.
TrainResult pretrain(ModelState& state, const Corpus& corpus,
                     const std::vector<std::string>& apr_texts, const TrainConfig& cfg,
                     AdamW& optimizer, const TrainOptions& options = {});

// One fine-tune step on a single task batch: response-masked cross entropy,
// backward, and a routed optimizer update.
double finetune_step(ModelState& state, const std::string& task,
                     const std::vector<TaskExample>& batch, const TrainConfig& cfg,
                     AdamW& optimizer);

// Replicates pre-train adapters per cfg.ablation on first call, then runs
// scheduled task batches for cfg.epochs (or options.max_steps).
TrainResult finetune(ModelState& state,
                     const std::map<std::string, std::vector<TaskExample>>& datasets,
                     const TrainConfig& cfg, AdamW& optimizer, const TrainOptions& options = {});

// --- checkpoints ---------------------------------------------------------------------

// Directory layout: model.chlm, adapters.chla (or adapters_<task>.chla for
// per-task sets), optim.chos, train.json {config, step, adapters, rng}.
void write_training_checkpoint(const std::filesystem::path& dir, const ModelState& state,
                               const AdamW& optimizer, const TrainConfig& cfg, std::size_t step);

struct TrainingCheckpoint {
  ModelState state;
  AdamW optimizer;
  TrainConfig config;
  std::size_t step = 0;
};

TrainingCheckpoint read_training_checkpoint(const std::filesystem::path& dir);

// --- ablation harness -------------------------------------------------------------------

struct AblationRecord {
  std::string variant;
  std::size_t trainable_adapter_params = 0;
  std::map<std::string, double> final_task_losses;
  std::vector<StepLog> pretrain_history;
  std::vector<StepLog> finetune_history;

  nlohmann::json to_json() const;
};

// Full two-stage run of the variant named by cfg.ablation, reporting the
// trainable adapter parameter count and each task's final loss.
AblationRecord run_ablation(const LMConfig& lm_cfg, const TrainConfig& cfg, const Corpus& corpus,
                            const std::vector<std::string>& apr_texts,
                            const std::map<std::string, std::vector<TaskExample>>& datasets,
                            std::size_t pretrain_steps, std::size_t finetune_steps);

// Trainable adapter parameters of whatever topology the state holds.
std::size_t adapter_param_count(const ModelState& state);

}  // namespace charbot
