#include "charbot/training.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "charbot/container.hpp"
#include "charbot/errors.hpp"
#include "charbot/rng.hpp"

namespace charbot {

void TrainConfig::validate() const {
  if (rank == 0 || epochs == 0 || batch_size == 0)
    throw ValidationError("TrainConfig: rank, epochs and batch_size must be positive");
  if (cutoff_pretrain < 8 || cutoff_finetune < 8)
    throw ValidationError("TrainConfig: cutoffs must be at least 8 tokens");
  if (learning_rate <= 0.0) throw ValidationError("TrainConfig: learning_rate must be positive");
  if (apr_mix < 0.0 || apr_mix > 1.0)
    throw ValidationError("TrainConfig: apr_mix must lie in [0,1]");
  if (schedule != "round_robin" && schedule != "sequential")
    throw ValidationError("TrainConfig: schedule must be round_robin or sequential");
  if (ablation != "charlora" && ablation != "vanilla_lora" && ablation != "multi_lora")
    throw ValidationError("TrainConfig: ablation must be charlora, vanilla_lora or multi_lora");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"rank", rank},
          {"learning_rate", learning_rate},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"cutoff_pretrain", cutoff_pretrain},
          {"cutoff_finetune", cutoff_finetune},
          {"schedule", schedule},
          {"apr_mix", apr_mix},
          {"seed", seed},
          {"ablation", ablation},
          {"use_apr", use_apr}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "rank",   "learning_rate", "epochs",  "batch_size", "cutoff_pretrain", "cutoff_finetune",
      "schedule", "apr_mix",     "seed",    "ablation",   "use_apr"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ValidationError("TrainConfig: unknown key '" + key + "'");
  TrainConfig c;
  if (j.contains("rank")) c.rank = j["rank"].get<std::size_t>();
  if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
  if (j.contains("epochs")) c.epochs = j["epochs"].get<std::size_t>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
  if (j.contains("cutoff_pretrain")) c.cutoff_pretrain = j["cutoff_pretrain"].get<std::size_t>();
  if (j.contains("cutoff_finetune")) c.cutoff_finetune = j["cutoff_finetune"].get<std::size_t>();
  if (j.contains("schedule")) c.schedule = j["schedule"].get<std::string>();
  if (j.contains("apr_mix")) c.apr_mix = j["apr_mix"].get<double>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("ablation")) c.ablation = j["ablation"].get<std::string>();
  if (j.contains("use_apr")) c.use_apr = j["use_apr"].get<bool>();
  c.validate();
  return c;
}

LMConfig desk_lm_config(std::uint64_t seed) {
  LMConfig cfg;
  cfg.d_model = 64;
  cfg.n_layers = 2;
  cfg.n_heads = 4;
  cfg.d_ff = 256;
  cfg.max_seq = 256;
  cfg.seed = seed;
  return cfg;
}

TrainConfig desk_train_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.rank = 8;
  cfg.learning_rate = 1e-2;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.cutoff_pretrain = 256;
  cfg.cutoff_finetune = 128;
  cfg.seed = seed;
  return cfg;
}

// --- batching ----------------------------------------------------------------------

std::vector<TaskBatch> schedule_batches(
    const std::map<std::string, std::vector<TaskExample>>& datasets, const std::string& policy,
    std::size_t batch_size, std::uint64_t seed) {
  if (policy != "round_robin" && policy != "sequential")
    throw ValidationError("schedule_batches: unknown policy '" + policy + "'");
  if (batch_size == 0) throw ValidationError("schedule_batches: batch_size must be positive");

  // Canonical task order first, any extra dataset keys after, sorted.
  std::vector<std::string> order;
  for (const std::string& t : kTaskIds)
    if (datasets.count(t) && !datasets.at(t).empty()) order.push_back(t);
  for (const auto& [task, examples] : datasets)
    if (std::find(kTaskIds.begin(), kTaskIds.end(), task) == kTaskIds.end() && !examples.empty())
      order.push_back(task);
  if (order.empty()) throw AllEmpty("schedule_batches: every dataset is empty");

  std::map<std::string, std::vector<TaskBatch>> per_task;
  for (const std::string& task : order) {
    std::vector<TaskExample> shuffled = datasets.at(task);
    Rng rng(Rng::hash_str(seed, task));
    rng.shuffle(shuffled);
    std::vector<TaskBatch> batches;
    for (std::size_t i = 0; i < shuffled.size(); i += batch_size) {
      TaskBatch b;
      b.task = task;
      const std::size_t end = std::min(shuffled.size(), i + batch_size);
      b.examples.assign(shuffled.begin() + i, shuffled.begin() + end);
      batches.push_back(std::move(b));
    }
    per_task.emplace(task, std::move(batches));
  }

  std::vector<TaskBatch> out;
  if (policy == "sequential") {
    for (const std::string& task : order)
      for (TaskBatch& b : per_task.at(task)) out.push_back(std::move(b));
    return out;
  }
  // round robin, skipping exhausted tasks
  std::map<std::string, std::size_t> cursor;
  bool remaining = true;
  while (remaining) {
    remaining = false;
    for (const std::string& task : order) {
      auto& batches = per_task.at(task);
      std::size_t& i = cursor[task];
      if (i < batches.size()) {
        out.push_back(std::move(batches[i]));
        ++i;
        remaining = remaining || i < batches.size();
      }
    }
  }
  return out;
}

std::vector<std::vector<int>> chunk_token_stream(const std::vector<int>& stream,
                                                 std::size_t cutoff) {
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < stream.size(); i += cutoff) {
    const std::size_t end = std::min(stream.size(), i + cutoff);
    if (end - i < 2) continue;
    out.emplace_back(stream.begin() + i, stream.begin() + end);
  }
  return out;
}

namespace {

std::vector<int> document_stream(const std::vector<std::string>& texts) {
  std::vector<int> out;
  for (const std::string& text : texts) {
    for (int t : tokenize_bytes(text)) out.push_back(t);
    out.push_back(kTokenEos);
  }
  return out;
}

}  // namespace

std::vector<std::vector<int>> build_pretrain_chunks(const Corpus& corpus,
                                                    const std::vector<std::string>& apr_texts,
                                                    const TrainConfig& cfg, std::size_t max_seq) {
  const std::size_t cutoff = std::min(cfg.cutoff_pretrain, max_seq);
  std::vector<std::string> originals;
  originals.reserve(corpus.essays.size());
  for (const Essay& e : corpus.essays) originals.push_back(e.body);

  auto orig_chunks = chunk_token_stream(document_stream(originals), cutoff);
  if (!cfg.use_apr || apr_texts.empty() || cfg.apr_mix == 0.0) return orig_chunks;

  auto apr_chunks = chunk_token_stream(document_stream(apr_texts), cutoff);
  if (cfg.apr_mix >= 1.0) return apr_chunks;

  // Target |apr| / (|orig| + |apr|) = apr_mix, clamped to availability.
  const double ratio = cfg.apr_mix / (1.0 - cfg.apr_mix);
  std::size_t want =
      static_cast<std::size_t>(std::llround(ratio * static_cast<double>(orig_chunks.size())));
  want = std::min(want, apr_chunks.size());

  std::vector<std::size_t> idx(apr_chunks.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(Rng::hash_str(cfg.seed, "apr-chunk-select"));
  rng.shuffle(idx);

  std::vector<std::vector<int>> pool = std::move(orig_chunks);
  for (std::size_t i = 0; i < want; ++i) pool.push_back(apr_chunks[idx[i]]);
  return pool;
}

// --- loss helpers --------------------------------------------------------------------

namespace {

// Next-token cross entropy over one chunk; every position participates.
Tensor chunk_loss(const ModelState& state, const std::vector<int>& chunk) {
  Tensor logits = lm_forward(state, chunk);
  std::vector<int> targets(chunk.size(), 0);
  std::vector<std::uint8_t> mask(chunk.size(), 0);
  for (std::size_t i = 0; i + 1 < chunk.size(); ++i) {
    targets[i] = chunk[i + 1];
    mask[i] = 1;
  }
  return masked_cross_entropy(logits, targets, mask);
}

// Response-masked cross entropy for one rendered example.
Tensor example_loss(const ModelState& state, const std::string& task,
                    const RenderedExample& rendered) {
  Tensor logits = lm_forward(state, rendered.tokens, task);
  std::vector<int> targets(rendered.tokens.size(), 0);
  std::vector<std::uint8_t> mask(rendered.tokens.size(), 0);
  for (std::size_t i = 0; i + 1 < rendered.tokens.size(); ++i) {
    targets[i] = rendered.tokens[i + 1];
    mask[i] = rendered.loss_mask[i + 1];
  }
  return masked_cross_entropy(logits, targets, mask);
}

Tensor mean_of(std::vector<Tensor> losses) {
  Tensor total = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  return scale(total, 1.0 / static_cast<double>(losses.size()));
}

}  // namespace

// --- pretrain -------------------------------------------------------------------------

TrainResult pretrain(ModelState& state, const Corpus& corpus,
                     const std::vector<std::string>& apr_texts, const TrainConfig& cfg,
                     AdamW& optimizer, const TrainOptions& options) {
  cfg.validate();
  if (corpus.essays.empty()) throw EmptyCorpus("pretrain: corpus is empty");
  if (std::holds_alternative<std::monostate>(state.adapters))
    state.adapters =
        init_pretrain_adapters(state.adapter_target_layers(), cfg.rank, cfg.seed);
  PretrainAdapterSet& set = state.pretrain_set();

  const auto pool = build_pretrain_chunks(corpus, apr_texts, cfg, state.config.max_seq);
  if (pool.empty()) throw EmptyCorpus("pretrain: corpus provides no usable chunks");
  const std::size_t batches_per_epoch =
      (pool.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps =
      options.max_steps ? options.max_steps : cfg.epochs * batches_per_epoch;

  TrainResult result;
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<std::size_t> epoch_order;

  for (std::size_t step = options.start_step; step < total_steps; ++step) {
    const std::size_t epoch = step / batches_per_epoch;
    const std::size_t batch_index = step % batches_per_epoch;
    if (epoch != cached_epoch) {
      epoch_order.resize(pool.size());
      for (std::size_t i = 0; i < pool.size(); ++i) epoch_order[i] = i;
      Rng rng(Rng::mix(Rng::hash_str(cfg.seed, "pretrain-epoch"), epoch));
      rng.shuffle(epoch_order);
      cached_epoch = epoch;
    }

    const std::size_t begin = batch_index * cfg.batch_size;
    const std::size_t end = std::min(pool.size(), begin + cfg.batch_size);

    double loss_value = 0.0;
    {
      Graph graph;
      std::vector<Tensor> losses;
      for (std::size_t i = begin; i < end; ++i) losses.push_back(chunk_loss(state, pool[epoch_order[i]]));
      Tensor loss = mean_of(std::move(losses));
      loss.check_finite("pretrain loss");
      backward(loss, graph);
      loss_value = loss.item();
    }
    apply_gradients(set, optimizer.step_fn());

    StepLog log{step, "pretrain", loss_value, optimizer.config().lr};
    result.history.push_back(log);
    if (options.callback) options.callback(log);
  }
  return result;
}

// --- finetune --------------------------------------------------------------------------

namespace {

std::vector<std::string> dataset_task_order(
    const std::map<std::string, std::vector<TaskExample>>& datasets) {
  std::vector<std::string> tasks;
  for (const std::string& t : kTaskIds)
    if (datasets.count(t)) tasks.push_back(t);
  for (const auto& [task, examples] : datasets)
    if (std::find(kTaskIds.begin(), kTaskIds.end(), task) == kTaskIds.end())
      throw UnknownTaskInDataset("finetune: dataset task '" + task + "' is not one of mcq/gqa/st");
  return tasks;
}

void prepare_finetune_adapters(ModelState& state, const TrainConfig& cfg,
                               const std::vector<std::string>& tasks) {
  if (std::holds_alternative<std::monostate>(state.adapters))
    state.adapters =
        init_pretrain_adapters(state.adapter_target_layers(), cfg.rank, cfg.seed);
  if (cfg.ablation == "charlora") {
    if (std::holds_alternative<PretrainAdapterSet>(state.adapters))
      state.adapters = replicate_for_tasks(state.pretrain_set(), tasks);
    // an existing bank is reused as-is
  } else if (cfg.ablation == "vanilla_lora") {
    if (!std::holds_alternative<PretrainAdapterSet>(state.adapters))
      throw ValidationError("finetune: vanilla_lora expects a pre-train adapter set");
  } else {  // multi_lora
    if (std::holds_alternative<PretrainAdapterSet>(state.adapters))
      state.adapters = clone_per_task(state.pretrain_set(), tasks);
    else if (!std::holds_alternative<MultiTaskAdapters>(state.adapters))
      throw ValidationError("finetune: multi_lora expects pre-train or per-task adapters");
  }
}

}  // namespace

double finetune_step(ModelState& state, const std::string& task,
                     const std::vector<TaskExample>& batch, const TrainConfig& cfg,
                     AdamW& optimizer) {
  if (batch.empty()) throw EmptyDataset("finetune_step: empty batch for task '" + task + "'");
  const std::size_t cutoff = std::min(cfg.cutoff_finetune, state.config.max_seq);

  double loss_value = 0.0;
  {
    Graph graph;
    std::vector<Tensor> losses;
    for (const TaskExample& ex : batch) {
      const RenderedExample rendered =
          render_training_example(task, ex.instruction(), ex.response(), cutoff);
      losses.push_back(example_loss(state, task, rendered));
    }
    Tensor loss = mean_of(std::move(losses));
    loss.check_finite("finetune loss");
    backward(loss, graph);
    loss_value = loss.item();
  }

  if (auto* bank = std::get_if<TaskAdapterBank>(&state.adapters)) {
    bank->active_task = task;
    apply_gradients(*bank, task, optimizer.step_fn());
  } else if (auto* set = std::get_if<PretrainAdapterSet>(&state.adapters)) {
    apply_gradients(*set, optimizer.step_fn());
  } else if (auto* multi = std::get_if<MultiTaskAdapters>(&state.adapters)) {
    auto it = multi->per_task.find(task);
    if (it == multi->per_task.end()) throw UnknownTask("finetune_step: no adapters for '" + task + "'");
    apply_gradients(it->second, optimizer.step_fn());
  } else {
    throw ValidationError("finetune_step: model state has no adapters");
  }
  return loss_value;
}

TrainResult finetune(ModelState& state,
                     const std::map<std::string, std::vector<TaskExample>>& datasets,
                     const TrainConfig& cfg, AdamW& optimizer, const TrainOptions& options) {
  cfg.validate();
  if (datasets.empty()) throw AllEmpty("finetune: no datasets");
  const std::vector<std::string> tasks = dataset_task_order(datasets);
  for (const std::string& t : tasks)
    if (datasets.at(t).empty()) throw EmptyDataset("finetune: dataset for task '" + t + "' is empty");

  prepare_finetune_adapters(state, cfg, tasks);

  const std::uint64_t schedule_seed = Rng::hash_str(cfg.seed, "finetune-epoch");
  std::size_t cached_epoch = static_cast<std::size_t>(-1);
  std::vector<TaskBatch> epoch_batches;
  auto batches_for = [&](std::size_t epoch) -> const std::vector<TaskBatch>& {
    if (epoch != cached_epoch) {
      epoch_batches =
          schedule_batches(datasets, cfg.schedule, cfg.batch_size, Rng::mix(schedule_seed, epoch));
      cached_epoch = epoch;
    }
    return epoch_batches;
  };

  const std::size_t batches_per_epoch = batches_for(0).size();
  const std::size_t total_steps =
      options.max_steps ? options.max_steps : cfg.epochs * batches_per_epoch;

  TrainResult result;
  for (std::size_t step = options.start_step; step < total_steps; ++step) {
    const std::size_t epoch = step / batches_per_epoch;
    const TaskBatch& batch = batches_for(epoch)[step % batches_per_epoch];
    const double loss = finetune_step(state, batch.task, batch.examples, cfg, optimizer);
    StepLog log{step, batch.task, loss, optimizer.config().lr};
    result.history.push_back(log);
    if (options.callback) options.callback(log);
  }
  return result;
}

// --- checkpoints --------------------------------------------------------------------------

namespace {

constexpr const char* kOptimMagic = "CHOS";

void write_optimizer_state(const std::filesystem::path& path, const AdamW& opt) {
  Container c;
  c.magic = kOptimMagic;
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& [name, mom] : opt.state()) {
    manifest.push_back({{"name", name}, {"len", mom.m.size()}, {"t", mom.t}});
    c.payload.insert(c.payload.end(), mom.m.begin(), mom.m.end());
    c.payload.insert(c.payload.end(), mom.v.begin(), mom.v.end());
  }
  c.header = {{"kind", "optimizer"},
              {"lr", opt.config().lr},
              {"beta1", opt.config().beta1},
              {"beta2", opt.config().beta2},
              {"eps", opt.config().eps},
              {"weight_decay", opt.config().weight_decay},
              {"params", manifest}};
  write_container(path, c);
}

AdamW read_optimizer_state(const std::filesystem::path& path) {
  Container c = read_container(path, kOptimMagic);
  AdamW::Config cfg;
  cfg.lr = c.header.at("lr").get<double>();
  cfg.beta1 = c.header.at("beta1").get<double>();
  cfg.beta2 = c.header.at("beta2").get<double>();
  cfg.eps = c.header.at("eps").get<double>();
  cfg.weight_decay = c.header.at("weight_decay").get<double>();
  AdamW opt(cfg);
  std::size_t pos = 0;
  for (const auto& entry : c.header.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::size_t len = entry.at("len").get<std::size_t>();
    if (pos + 2 * len > c.payload.size())
      throw TruncatedPayload("optimizer payload ends before moment buffers of '" + name + "'");
    AdamW::Moments mom;
    mom.t = entry.at("t").get<std::uint64_t>();
    mom.m.assign(c.payload.begin() + pos, c.payload.begin() + pos + len);
    mom.v.assign(c.payload.begin() + pos + len, c.payload.begin() + pos + 2 * len);
    pos += 2 * len;
    opt.state().emplace(name, std::move(mom));
  }
  if (pos != c.payload.size())
    throw ShapeHeaderMismatch("optimizer payload longer than its manifest");
  return opt;
}

}  // namespace

void write_training_checkpoint(const std::filesystem::path& dir, const ModelState& state,
                               const AdamW& optimizer, const TrainConfig& cfg, std::size_t step) {
  std::filesystem::create_directories(dir);
  write_checkpoint(dir / "model.chlm", state);

  std::string adapters_kind = "none";
  std::vector<std::string> adapter_files;
  if (const auto* set = std::get_if<PretrainAdapterSet>(&state.adapters)) {
    adapters_kind = "pretrain";
    write_adapter_file(dir / "adapters.chla", *set);
    adapter_files.push_back("adapters.chla");
  } else if (const auto* bank = std::get_if<TaskAdapterBank>(&state.adapters)) {
    adapters_kind = "bank";
    write_adapter_file(dir / "adapters.chla", *bank);
    adapter_files.push_back("adapters.chla");
  } else if (const auto* multi = std::get_if<MultiTaskAdapters>(&state.adapters)) {
    adapters_kind = "multi";
    for (const std::string& task : multi->task_order) {
      const std::string file = "adapters_" + task + ".chla";
      write_adapter_file(dir / file, multi->per_task.at(task));
      adapter_files.push_back(file);
    }
  }
  write_optimizer_state(dir / "optim.chos", optimizer);

  // The data order is a pure function of (seed, step), which is what makes
  // resume bit-exact; the derived stream state is recorded for inspection.
  const Rng marker(Rng::mix(cfg.seed, step));
  nlohmann::json rng_state = nlohmann::json::array();
  for (std::uint64_t w : marker.state()) rng_state.push_back(w);

  nlohmann::json meta = {{"config", cfg.to_json()},
                         {"step", step},
                         {"adapters", adapters_kind},
                         {"adapter_files", adapter_files},
                         {"rng", {{"scheme", "derived-from-seed-and-step"}, {"state", rng_state}}}};
  std::ofstream out(dir / "train.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "train.json").string());
  out << meta.dump(2) << "\n";
}

TrainingCheckpoint read_training_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "train.json");
  if (!in) throw IoError("cannot open " + (dir / "train.json").string());
  nlohmann::json meta;
  in >> meta;

  TrainingCheckpoint ck;
  ck.config = TrainConfig::from_json(meta.at("config"));
  ck.step = meta.at("step").get<std::size_t>();
  ck.state = read_checkpoint(dir / "model.chlm");
  ck.optimizer = read_optimizer_state(dir / "optim.chos");

  const std::string kind = meta.at("adapters").get<std::string>();
  if (kind == "pretrain" || kind == "bank") {
    AdapterStore store = read_adapter_file(dir / "adapters.chla");
    if (auto* set = std::get_if<PretrainAdapterSet>(&store))
      ck.state.adapters = std::move(*set);
    else
      ck.state.adapters = std::move(std::get<TaskAdapterBank>(store));
  } else if (kind == "multi") {
    MultiTaskAdapters multi;
    for (const auto& file : meta.at("adapter_files")) {
      const std::string name = file.get<std::string>();
      // adapters_<task>.chla
      const std::string task = name.substr(9, name.size() - 9 - 5);
      AdapterStore store = read_adapter_file(dir / name);
      multi.task_order.push_back(task);
      multi.per_task.emplace(task, std::move(std::get<PretrainAdapterSet>(store)));
    }
    ck.state.adapters = std::move(multi);
  }
  return ck;
}

// --- ablation ---------------------------------------------------------------------------------

nlohmann::json AblationRecord::to_json() const {
  nlohmann::json losses = nlohmann::json::object();
  for (const auto& [task, loss] : final_task_losses) losses[task] = loss;
  return {{"variant", variant},
          {"trainable_adapter_params", trainable_adapter_params},
          {"final_task_losses", losses}};
}

std::size_t adapter_param_count(const ModelState& state) {
  if (const auto* set = std::get_if<PretrainAdapterSet>(&state.adapters))
    return trainable_param_count(*set);
  if (const auto* bank = std::get_if<TaskAdapterBank>(&state.adapters))
    return trainable_param_count(*bank);
  if (const auto* multi = std::get_if<MultiTaskAdapters>(&state.adapters))
    return trainable_param_count(*multi);
  return 0;
}

AblationRecord run_ablation(const LMConfig& lm_cfg, const TrainConfig& cfg, const Corpus& corpus,
                            const std::vector<std::string>& apr_texts,
                            const std::map<std::string, std::vector<TaskExample>>& datasets,
                            std::size_t pretrain_steps, std::size_t finetune_steps) {
  cfg.validate();
  AblationRecord record;
  record.variant = cfg.ablation;

  ModelState state = init_model(lm_cfg);
  AdamW optimizer(AdamW::Config{.lr = cfg.learning_rate});

  TrainOptions pre_opts;
  pre_opts.max_steps = pretrain_steps;
  record.pretrain_history = pretrain(state, corpus, apr_texts, cfg, optimizer, pre_opts).history;

  TrainOptions ft_opts;
  ft_opts.max_steps = finetune_steps;
  record.finetune_history = finetune(state, datasets, cfg, optimizer, ft_opts).history;

  record.trainable_adapter_params = adapter_param_count(state);
  for (const StepLog& log : record.finetune_history)
    record.final_task_losses[log.task] = log.loss;  // last write per task wins
  return record;
}

}  // namespace charbot
