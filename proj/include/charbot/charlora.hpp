#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "charbot/optimizer.hpp"
#include "charbot/tensor.hpp"

namespace charbot {

// A frozen linear layer y = W0 x (+ bias). W0 never requires grad; adapters
// carry all trainable state.
struct BaseLinear {
  BaseLinear() = default;
  BaseLinear(std::string id, Tensor w0, Tensor b = {});

  std::string layer_id;
  Tensor W0;    // [d x k]
  Tensor bias;  // [d] or undefined

  std::size_t out_dim() const { return W0.shape()[0]; }
  std::size_t in_dim() const { return W0.shape()[1]; }
};

// Low-rank pair: delta = B * A with A:[r x k], B:[d x r].
struct AdapterPair {
  Tensor A;
  Tensor B;
  std::size_t rank = 0;
};

// One pair per adapted layer; the pre-training stage trains exactly this.
struct PretrainAdapterSet {
  std::vector<std::string> layer_order;
  std::map<std::string, AdapterPair> layers;
  std::size_t rank = 0;
  double delta_scale = 1.0;  // multiplier on B*A*x; fixed at 1 by default

  bool has_layer(const std::string& id) const { return layers.count(id) != 0; }
  const AdapterPair& at(const std::string& id) const;
  AdapterPair& at(const std::string& id);
};

// Fine-tuning state: per layer one shared A plus one B per task. Every task
// list is identical across layers and matches task_order.
struct TaskAdapterBank {
  struct Layer {
    Tensor A;                         // shared across tasks
    std::map<std::string, Tensor> B;  // task id -> [d x r]
  };
  std::vector<std::string> layer_order;
  std::map<std::string, Layer> layers;
  std::vector<std::string> task_order;
  std::optional<std::string> active_task;
  std::size_t rank = 0;
  double delta_scale = 1.0;

  bool has_task(const std::string& task) const;
  const Layer& at(const std::string& id) const;
  Layer& at(const std::string& id);
};

// Independent (A_i, B_i) per task; the Multi-LoRA ablation arrangement.
struct MultiTaskAdapters {
  std::vector<std::string> task_order;
  std::map<std::string, PretrainAdapterSet> per_task;
};

using AdapterStore = std::variant<PretrainAdapterSet, TaskAdapterBank>;

// Resolved view of one layer's adapter for a forward pass.
struct AdapterRef {
  const Tensor* A = nullptr;
  const Tensor* B = nullptr;
  double scale = 1.0;
};

// B starts at exactly zero so the adapted model is the base model; A is
// Gaussian with variance 1/rank. Deterministic in (seed, layer order).
PretrainAdapterSet init_pretrain_adapters(const std::vector<BaseLinear>& layers, std::size_t rank,
                                          std::uint64_t seed);

// Deep-copies B_pt into one B per task and carries A over as the single
// shared matrix. Task ids must be non-empty and distinct.
TaskAdapterBank replicate_for_tasks(const PretrainAdapterSet& pretrain,
                                    const std::vector<std::string>& tasks);

// Independent deep copies per task (Multi-LoRA).
MultiTaskAdapters clone_per_task(const PretrainAdapterSet& pretrain,
                                 const std::vector<std::string>& tasks);

// Adapter lookup for a forward pass; throws UnknownTask for banks.
AdapterRef resolve_adapter(const PretrainAdapterSet& set, const std::string& layer_id);
AdapterRef resolve_adapter(const TaskAdapterBank& bank, const std::string& layer_id,
                           const std::string& task);

// y = W0 x + scale * B (A x) (+ bias). Accepts x of shape [k] or [rows x k];
// A x is computed first, B A is never materialized. `adapter.A == nullptr`
// gives the plain base forward.
Tensor adapted_linear(const BaseLinear& layer, const Tensor& x, const AdapterRef& adapter);

Tensor adapter_forward(const BaseLinear& layer, const PretrainAdapterSet& set, const Tensor& x);
Tensor adapter_forward(const BaseLinear& layer, const TaskAdapterBank& bank, const Tensor& x,
                       const std::string& task);

// Steps A_pt and B_active; all other tensors are untouched and all adapter
// gradients are cleared afterwards. Throws NoGradients when no backward pass
// has populated the active set.
void apply_gradients(TaskAdapterBank& bank, const std::string& active, const StepFn& step);
void apply_gradients(PretrainAdapterSet& set, const StepFn& step);

// W0 + B_task * A_pt as a plain weight matrix.
Tensor merge(const BaseLinear& layer, const TaskAdapterBank& bank, const std::string& task);
Tensor merge(const BaseLinear& layer, const PretrainAdapterSet& set);

// Stable iteration over trainable tensors, for optimizers and checkpoints.
// Bank names: "<layer>.A" and "<layer>.B.<task>"; pretrain: "<layer>.A"/"<layer>.B".
std::vector<std::pair<std::string, Tensor>> named_params(PretrainAdapterSet& set);
std::vector<std::pair<std::string, Tensor>> named_params(TaskAdapterBank& bank);

std::size_t trainable_param_count(const PretrainAdapterSet& set);
std::size_t trainable_param_count(const TaskAdapterBank& bank);
std::size_t trainable_param_count(const MultiTaskAdapters& multi);

// Adapter container, magic "CHLA". Header: {kind, rank, layers:[{layer_id,d,k}],
// tasks:[...]}. Payload per layer: A row-major, then one B per task in header
// task order (a single B for kind "pretrain"). Round-trips bit-exactly.
void write_adapter_file(const std::filesystem::path& path, const PretrainAdapterSet& set);
void write_adapter_file(const std::filesystem::path& path, const TaskAdapterBank& bank);
AdapterStore read_adapter_file(const std::filesystem::path& path);

// Raw f64 LE bytes of a tensor's values; the currency of freezing checks.
std::vector<std::uint8_t> tensor_payload_bytes(const Tensor& t);

}  // namespace charbot
