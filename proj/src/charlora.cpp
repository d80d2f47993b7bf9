#include "charbot/charlora.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>

#include "charbot/container.hpp"
#include "charbot/errors.hpp"
#include "charbot/rng.hpp"

namespace charbot {

BaseLinear::BaseLinear(std::string id, Tensor w0, Tensor b)
    : layer_id(std::move(id)), W0(std::move(w0)), bias(std::move(b)) {
  if (W0.ndim() != 2 || W0.shape()[0] == 0 || W0.shape()[1] == 0)
    throw ShapeMismatch("BaseLinear '" + layer_id + "': W0 must be a non-empty 2-D matrix");
  if (bias.defined() && (bias.ndim() != 1 || bias.numel() != out_dim()))
    throw ShapeMismatch("BaseLinear '" + layer_id + "': bias must be [d]");
  W0.set_requires_grad(false);
  if (bias.defined()) bias.set_requires_grad(false);
}

const AdapterPair& PretrainAdapterSet::at(const std::string& id) const {
  auto it = layers.find(id);
  if (it == layers.end()) throw ValidationError("adapter set has no layer '" + id + "'");
  return it->second;
}

AdapterPair& PretrainAdapterSet::at(const std::string& id) {
  auto it = layers.find(id);
  if (it == layers.end()) throw ValidationError("adapter set has no layer '" + id + "'");
  return it->second;
}

bool TaskAdapterBank::has_task(const std::string& task) const {
  return std::find(task_order.begin(), task_order.end(), task) != task_order.end();
}

const TaskAdapterBank::Layer& TaskAdapterBank::at(const std::string& id) const {
  auto it = layers.find(id);
  if (it == layers.end()) throw ValidationError("adapter bank has no layer '" + id + "'");
  return it->second;
}

TaskAdapterBank::Layer& TaskAdapterBank::at(const std::string& id) {
  auto it = layers.find(id);
  if (it == layers.end()) throw ValidationError("adapter bank has no layer '" + id + "'");
  return it->second;
}

PretrainAdapterSet init_pretrain_adapters(const std::vector<BaseLinear>& layers, std::size_t rank,
                                          std::uint64_t seed) {
  if (rank == 0) throw RankTooLarge("init_pretrain_adapters: rank must be >= 1");
  PretrainAdapterSet set;
  set.rank = rank;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(rank));
  for (const BaseLinear& layer : layers) {
    const std::size_t d = layer.out_dim(), k = layer.in_dim();
    if (rank > std::min(d, k))
      throw RankTooLarge("init_pretrain_adapters: rank " + std::to_string(rank) +
                         " exceeds min(d,k) for layer '" + layer.layer_id + "'");
    if (rank * 2 > std::min(d, k))
      std::cerr << "warning: rank " << rank << " is not small against min(d,k)="
                << std::min(d, k) << " for layer '" << layer.layer_id << "'\n";
    Rng rng(Rng::hash_str(seed, layer.layer_id));
    AdapterPair pair;
    pair.rank = rank;
    std::vector<double> a(rank * k);
    for (double& v : a) v = rng.next_gaussian(0.0, stddev);
    pair.A = Tensor({rank, k}, std::move(a), true);
    pair.B = Tensor::zeros({d, rank}, true);
    set.layer_order.push_back(layer.layer_id);
    set.layers.emplace(layer.layer_id, std::move(pair));
  }
  return set;
}

TaskAdapterBank replicate_for_tasks(const PretrainAdapterSet& pretrain,
                                    const std::vector<std::string>& tasks) {
  if (tasks.empty()) throw ValidationError("replicate_for_tasks: task list is empty");
  std::set<std::string> seen;
  for (const std::string& t : tasks)
    if (!seen.insert(t).second) throw DuplicateTask("replicate_for_tasks: duplicate task '" + t + "'");

  TaskAdapterBank bank;
  bank.layer_order = pretrain.layer_order;
  bank.task_order = tasks;
  bank.rank = pretrain.rank;
  bank.delta_scale = pretrain.delta_scale;
  for (const std::string& id : pretrain.layer_order) {
    const AdapterPair& pair = pretrain.at(id);
    TaskAdapterBank::Layer layer;
    layer.A = pair.A.clone();
    layer.A.set_requires_grad(true);
    for (const std::string& task : tasks) {
      Tensor b = pair.B.clone();
      b.set_requires_grad(true);
      layer.B.emplace(task, std::move(b));
    }
    bank.layers.emplace(id, std::move(layer));
  }
  return bank;
}

MultiTaskAdapters clone_per_task(const PretrainAdapterSet& pretrain,
                                 const std::vector<std::string>& tasks) {
  if (tasks.empty()) throw ValidationError("clone_per_task: task list is empty");
  MultiTaskAdapters multi;
  multi.task_order = tasks;
  for (const std::string& task : tasks) {
    PretrainAdapterSet copy;
    copy.layer_order = pretrain.layer_order;
    copy.rank = pretrain.rank;
    copy.delta_scale = pretrain.delta_scale;
    for (const std::string& id : pretrain.layer_order) {
      const AdapterPair& pair = pretrain.at(id);
      AdapterPair dup;
      dup.rank = pair.rank;
      dup.A = pair.A.clone();
      dup.A.set_requires_grad(true);
      dup.B = pair.B.clone();
      dup.B.set_requires_grad(true);
      copy.layers.emplace(id, std::move(dup));
    }
    multi.per_task.emplace(task, std::move(copy));
  }
  return multi;
}

AdapterRef resolve_adapter(const PretrainAdapterSet& set, const std::string& layer_id) {
  auto it = set.layers.find(layer_id);
  if (it == set.layers.end()) return {};
  return {&it->second.A, &it->second.B, set.delta_scale};
}

AdapterRef resolve_adapter(const TaskAdapterBank& bank, const std::string& layer_id,
                           const std::string& task) {
  if (!bank.has_task(task)) throw UnknownTask("adapter bank has no task '" + task + "'");
  auto it = bank.layers.find(layer_id);
  if (it == bank.layers.end()) return {};
  return {&it->second.A, &it->second.B.at(task), bank.delta_scale};
}

Tensor adapted_linear(const BaseLinear& layer, const Tensor& x, const AdapterRef& adapter) {
  const bool vector_input = x.ndim() == 1;
  Tensor rows = vector_input ? reshape(x, {1, x.numel()}) : x;
  if (rows.cols() != layer.in_dim())
    throw ShapeMismatch("adapted_linear '" + layer.layer_id + "': input has " +
                        std::to_string(rows.cols()) + " features, expected " +
                        std::to_string(layer.in_dim()));

  Tensor y = matmul_nt(rows, layer.W0);
  if (adapter.A != nullptr) {
    Tensor u = matmul_nt(rows, *adapter.A);     // [rows x r]
    Tensor delta = matmul_nt(u, *adapter.B);    // [rows x d]
    if (adapter.scale != 1.0) delta = scale(delta, adapter.scale);
    y = add(y, delta);
  }
  if (layer.bias.defined()) y = add_bias_row(y, layer.bias);
  return vector_input ? reshape(y, {layer.out_dim()}) : y;
}

Tensor adapter_forward(const BaseLinear& layer, const PretrainAdapterSet& set, const Tensor& x) {
  return adapted_linear(layer, x, resolve_adapter(set, layer.layer_id));
}

Tensor adapter_forward(const BaseLinear& layer, const TaskAdapterBank& bank, const Tensor& x,
                       const std::string& task) {
  return adapted_linear(layer, x, resolve_adapter(bank, layer.layer_id, task));
}

namespace {

void step_param(const StepFn& step, const std::string& name, Tensor& param) {
  step(name, param);
  param.zero_grad();
}

}  // namespace

void apply_gradients(TaskAdapterBank& bank, const std::string& active, const StepFn& step) {
  if (!bank.has_task(active)) throw UnknownTask("apply_gradients: no task '" + active + "'");
  bool any = false;
  for (const std::string& id : bank.layer_order) {
    const auto& layer = bank.at(id);
    any = any || layer.A.has_grad() || layer.B.at(active).has_grad();
  }
  if (!any)
    throw NoGradients("apply_gradients: no gradients on task '" + active +
                      "' (was backward run?)");
  for (const std::string& id : bank.layer_order) {
    auto& layer = bank.at(id);
    step_param(step, id + ".A", layer.A);
    step_param(step, id + ".B." + active, layer.B.at(active));
    for (auto& [task, b] : layer.B)
      if (task != active) b.zero_grad();
  }
}

void apply_gradients(PretrainAdapterSet& set, const StepFn& step) {
  bool any = false;
  for (const std::string& id : set.layer_order) {
    const AdapterPair& pair = set.at(id);
    any = any || pair.A.has_grad() || pair.B.has_grad();
  }
  if (!any) throw NoGradients("apply_gradients: no gradients on adapter set (was backward run?)");
  for (const std::string& id : set.layer_order) {
    AdapterPair& pair = set.at(id);
    step_param(step, id + ".A", pair.A);
    step_param(step, id + ".B", pair.B);
  }
}

namespace {

Tensor merged_weight(const BaseLinear& layer, const Tensor& a, const Tensor& b, double scale_) {
  Tensor delta = matmul(b, a);  // [d x r] * [r x k] -> [d x k]
  Tensor out = layer.W0.clone();
  out.set_requires_grad(false);
  for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) += scale_ * delta(i);
  return out;
}

}  // namespace

Tensor merge(const BaseLinear& layer, const TaskAdapterBank& bank, const std::string& task) {
  AdapterRef ref = resolve_adapter(bank, layer.layer_id, task);
  if (ref.A == nullptr)
    throw ValidationError("merge: layer '" + layer.layer_id + "' is not adapted");
  return merged_weight(layer, *ref.A, *ref.B, ref.scale);
}

Tensor merge(const BaseLinear& layer, const PretrainAdapterSet& set) {
  AdapterRef ref = resolve_adapter(set, layer.layer_id);
  if (ref.A == nullptr)
    throw ValidationError("merge: layer '" + layer.layer_id + "' is not adapted");
  return merged_weight(layer, *ref.A, *ref.B, ref.scale);
}

std::vector<std::pair<std::string, Tensor>> named_params(PretrainAdapterSet& set) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const std::string& id : set.layer_order) {
    AdapterPair& pair = set.at(id);
    out.emplace_back(id + ".A", pair.A);
    out.emplace_back(id + ".B", pair.B);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> named_params(TaskAdapterBank& bank) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const std::string& id : bank.layer_order) {
    auto& layer = bank.at(id);
    out.emplace_back(id + ".A", layer.A);
    for (const std::string& task : bank.task_order)
      out.emplace_back(id + ".B." + task, layer.B.at(task));
  }
  return out;
}

std::size_t trainable_param_count(const PretrainAdapterSet& set) {
  std::size_t n = 0;
  for (const auto& [id, pair] : set.layers) n += pair.A.numel() + pair.B.numel();
  return n;
}

std::size_t trainable_param_count(const TaskAdapterBank& bank) {
  std::size_t n = 0;
  for (const auto& [id, layer] : bank.layers) {
    n += layer.A.numel();
    for (const auto& [task, b] : layer.B) n += b.numel();
  }
  return n;
}

std::size_t trainable_param_count(const MultiTaskAdapters& multi) {
  std::size_t n = 0;
  for (const auto& [task, set] : multi.per_task) n += trainable_param_count(set);
  return n;
}

// --- serialization ----------------------------------------------------------

namespace {

constexpr const char* kAdapterMagic = "CHLA";

nlohmann::json layers_manifest(const std::vector<std::string>& order,
                               const std::function<std::pair<std::size_t, std::size_t>(
                                   const std::string&)>& dims) {
  nlohmann::json arr = nlohmann::json::array();
  for (const std::string& id : order) {
    auto [d, k] = dims(id);
    arr.push_back({{"layer_id", id}, {"d", d}, {"k", k}});
  }
  return arr;
}

void append_tensor(std::vector<double>& payload, const Tensor& t) {
  payload.insert(payload.end(), t.values().begin(), t.values().end());
}

Tensor take_tensor(const std::vector<double>& payload, std::size_t& pos,
                   std::vector<std::size_t> shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  if (pos + n > payload.size())
    throw TruncatedPayload("adapter payload ends before all declared tensors");
  std::vector<double> data(payload.begin() + pos, payload.begin() + pos + n);
  pos += n;
  return Tensor(std::move(shape), std::move(data), true);
}

}  // namespace

void write_adapter_file(const std::filesystem::path& path, const PretrainAdapterSet& set) {
  Container c;
  c.magic = kAdapterMagic;
  c.header = {{"kind", "pretrain"},
              {"rank", set.rank},
              {"layers", layers_manifest(set.layer_order,
                                         [&](const std::string& id) {
                                           const AdapterPair& p = set.at(id);
                                           return std::make_pair(p.B.shape()[0], p.A.shape()[1]);
                                         })},
              {"tasks", nlohmann::json::array()}};
  for (const std::string& id : set.layer_order) {
    const AdapterPair& pair = set.at(id);
    append_tensor(c.payload, pair.A);
    append_tensor(c.payload, pair.B);
  }
  write_container(path, c);
}

void write_adapter_file(const std::filesystem::path& path, const TaskAdapterBank& bank) {
  Container c;
  c.magic = kAdapterMagic;
  c.header = {{"kind", "bank"},
              {"rank", bank.rank},
              {"layers", layers_manifest(bank.layer_order,
                                         [&](const std::string& id) {
                                           const auto& l = bank.at(id);
                                           return std::make_pair(
                                               l.B.begin()->second.shape()[0], l.A.shape()[1]);
                                         })},
              {"tasks", bank.task_order}};
  for (const std::string& id : bank.layer_order) {
    const auto& layer = bank.at(id);
    append_tensor(c.payload, layer.A);
    for (const std::string& task : bank.task_order) append_tensor(c.payload, layer.B.at(task));
  }
  write_container(path, c);
}

AdapterStore read_adapter_file(const std::filesystem::path& path) {
  Container c = read_container(path, kAdapterMagic);
  for (const char* key : {"kind", "rank", "layers", "tasks"})
    if (!c.header.contains(key))
      throw ShapeHeaderMismatch(std::string("adapter header missing key '") + key + "'");
  const std::string kind = c.header.at("kind").get<std::string>();
  const std::size_t rank = c.header.at("rank").get<std::size_t>();
  if (rank == 0) throw ShapeHeaderMismatch("adapter header declares rank 0");
  const auto tasks = c.header.at("tasks").get<std::vector<std::string>>();

  struct LayerDims {
    std::string id;
    std::size_t d, k;
  };
  std::vector<LayerDims> dims;
  for (const auto& entry : c.header.at("layers")) {
    LayerDims ld{entry.at("layer_id").get<std::string>(), entry.at("d").get<std::size_t>(),
                 entry.at("k").get<std::size_t>()};
    if (ld.d == 0 || ld.k == 0)
      throw ShapeHeaderMismatch("adapter header declares a zero-sized layer '" + ld.id + "'");
    dims.push_back(std::move(ld));
  }

  const std::size_t n_b = kind == "bank" ? tasks.size() : 1;
  std::size_t expected = 0;
  for (const auto& ld : dims) expected += rank * ld.k + n_b * ld.d * rank;
  if (c.payload.size() < expected)
    throw TruncatedPayload("adapter payload holds " + std::to_string(c.payload.size()) +
                           " values, header declares " + std::to_string(expected));
  if (c.payload.size() > expected)
    throw ShapeHeaderMismatch("adapter payload holds " + std::to_string(c.payload.size()) +
                              " values, header declares only " + std::to_string(expected));

  std::size_t pos = 0;
  if (kind == "pretrain") {
    PretrainAdapterSet set;
    set.rank = rank;
    for (const auto& ld : dims) {
      AdapterPair pair;
      pair.rank = rank;
      pair.A = take_tensor(c.payload, pos, {rank, ld.k});
      pair.B = take_tensor(c.payload, pos, {ld.d, rank});
      set.layer_order.push_back(ld.id);
      set.layers.emplace(ld.id, std::move(pair));
    }
    return set;
  }
  if (kind == "bank") {
    if (tasks.empty()) throw ShapeHeaderMismatch("adapter bank header declares no tasks");
    TaskAdapterBank bank;
    bank.rank = rank;
    bank.task_order = tasks;
    for (const auto& ld : dims) {
      TaskAdapterBank::Layer layer;
      layer.A = take_tensor(c.payload, pos, {rank, ld.k});
      for (const std::string& task : tasks)
        layer.B.emplace(task, take_tensor(c.payload, pos, {ld.d, rank}));
      bank.layer_order.push_back(ld.id);
      bank.layers.emplace(ld.id, std::move(layer));
    }
    return bank;
  }
  throw ShapeHeaderMismatch("adapter header has unknown kind '" + kind + "'");
}

std::vector<std::uint8_t> tensor_payload_bytes(const Tensor& t) {
  std::vector<std::uint8_t> out;
  out.reserve(8 * t.numel());
  for (double v : t.values()) append_f64_le(out, v);
  return out;
}

}  // namespace charbot
