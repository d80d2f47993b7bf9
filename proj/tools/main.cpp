// characterbot: persona adapter training and evaluation pipeline.
//
// Subcommands: apr | gen-data | pretrain | finetune | eval | merge | inspect.
// Exit codes: 0 success, 1 validation error, 2 I/O or client error.
// Diagnostics go to stderr; machine-readable output goes to files or stdout.

#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>

#include "CLI11.hpp"
#include "charbot/charlora.hpp"
#include "charbot/client.hpp"
#include "charbot/corpus.hpp"
#include "charbot/errors.hpp"
#include "charbot/evaluation.hpp"
#include "charbot/model.hpp"
#include "charbot/training.hpp"
#include "json.hpp"

namespace {

using namespace charbot;

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

struct ClientOptions {
  bool offline = false;
  std::string model;      // generation / judge model name
  std::string audit_log;
  std::string replay_log;
};

std::shared_ptr<ChatClient> make_live_client(const ClientOptions& opts) {
  if (opts.offline)
    throw ValidationError("--offline forbids live mode; use fallback/synthetic/stub");
  std::shared_ptr<ChatClient> client;
  if (!opts.replay_log.empty())
    client = std::make_shared<ReplayChatClient>(opts.replay_log);
  else
    client = std::make_shared<HttpChatClient>(HttpClientConfig::from_env());
  if (!opts.audit_log.empty()) client = std::make_shared<AuditingClient>(client, opts.audit_log);
  return client;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  return out;
}

// Layered config: defaults or desk profile, then --config file, then flags.
struct TrainFlags {
  std::string config_path;
  std::string profile = "desk";
  std::optional<std::size_t> rank, epochs, batch_size, cutoff_pretrain, cutoff_finetune;
  std::optional<double> learning_rate, apr_mix;
  std::optional<std::string> schedule, ablation;
  std::optional<bool> use_apr;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "TrainConfig JSON file");
    cmd->add_option("--profile", profile, "Config profile: desk or full")
        ->check(CLI::IsMember({"desk", "full"}));
    cmd->add_option("--rank", rank, "Adapter rank");
    cmd->add_option("--lr", learning_rate, "Learning rate");
    cmd->add_option("--epochs", epochs, "Training epochs");
    cmd->add_option("--batch-size", batch_size, "Batch size");
    cmd->add_option("--cutoff-pretrain", cutoff_pretrain, "Pre-train token cutoff");
    cmd->add_option("--cutoff-finetune", cutoff_finetune, "Fine-tune token cutoff");
    cmd->add_option("--schedule", schedule, "round_robin or sequential");
    cmd->add_option("--apr-mix", apr_mix, "Fraction of reframed text in the pre-train stream");
    cmd->add_option("--ablation", ablation, "charlora, vanilla_lora or multi_lora");
    cmd->add_option("--use-apr", use_apr, "Include reframed text in pre-training");
  }

  TrainConfig resolve(std::uint64_t seed) const {
    TrainConfig cfg = profile == "desk" ? desk_train_config(seed) : TrainConfig{};
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw IoError("cannot open config " + config_path);
      nlohmann::json j;
      try {
        in >> j;
      } catch (const nlohmann::json::parse_error& e) {
        throw IoError("config " + config_path + " is not valid JSON: " + e.what());
      }
      cfg = TrainConfig::from_json(j);
    }
    cfg.seed = seed;
    if (rank) cfg.rank = *rank;
    if (learning_rate) cfg.learning_rate = *learning_rate;
    if (epochs) cfg.epochs = *epochs;
    if (batch_size) cfg.batch_size = *batch_size;
    if (cutoff_pretrain) cfg.cutoff_pretrain = *cutoff_pretrain;
    if (cutoff_finetune) cfg.cutoff_finetune = *cutoff_finetune;
    if (schedule) cfg.schedule = *schedule;
    if (apr_mix) cfg.apr_mix = *apr_mix;
    if (ablation) cfg.ablation = *ablation;
    if (use_apr) cfg.use_apr = *use_apr;
    cfg.validate();
    return cfg;
  }
};

StepCallback log_writer(std::ofstream* log) {
  if (!log) return {};
  return [log](const StepLog& s) {
    *log << nlohmann::json({{"step", s.step},
                            {"task", s.task},
                            {"loss", s.loss},
                            {"lr", s.lr},
                            {"timestamp", utc_now()}})
                .dump()
         << "\n";
  };
}

std::vector<std::string> load_apr_texts(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open APR file " + path);
  std::vector<std::string> texts;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    texts.push_back(nlohmann::json::parse(line).at("text").get<std::string>());
  }
  return texts;
}

std::map<std::string, std::vector<TaskExample>> load_datasets(const std::string& dir) {
  std::map<std::string, std::vector<TaskExample>> datasets;
  for (const std::string& task : kTaskIds) {
    const std::filesystem::path p = std::filesystem::path(dir) / (task + ".jsonl");
    if (std::filesystem::exists(p)) datasets[task] = read_examples_jsonl(p);
  }
  if (datasets.empty())
    throw ValidationError("no <task>.jsonl files found in " + dir);
  return datasets;
}

nlohmann::json inspect_adapter_file(const std::filesystem::path& path) {
  AdapterStore store = read_adapter_file(path);
  nlohmann::json out;
  out["file"] = path.string();
  if (const auto* set = std::get_if<PretrainAdapterSet>(&store)) {
    out["kind"] = "pretrain";
    out["rank"] = set->rank;
    out["tasks"] = nlohmann::json::array();
    nlohmann::json layers = nlohmann::json::array();
    for (const std::string& id : set->layer_order) {
      const AdapterPair& p = set->at(id);
      layers.push_back({{"layer_id", id},
                        {"A", p.A.shape()},
                        {"B", p.B.shape()}});
    }
    out["layers"] = layers;
    out["trainable_params"] = trainable_param_count(*set);
  } else {
    const auto& bank = std::get<TaskAdapterBank>(store);
    out["kind"] = "bank";
    out["rank"] = bank.rank;
    out["tasks"] = bank.task_order;
    nlohmann::json layers = nlohmann::json::array();
    for (const std::string& id : bank.layer_order) {
      const auto& l = bank.at(id);
      layers.push_back({{"layer_id", id},
                        {"A", l.A.shape()},
                        {"B", l.B.begin()->second.shape()},
                        {"tasks", bank.task_order.size()}});
    }
    out["layers"] = layers;
    out["trainable_params"] = trainable_param_count(bank);
  }
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"characterbot: persona adapters, data pipeline, training and evaluation"};
  app.require_subcommand(1);

  bool offline = false;
  app.add_flag("--offline", offline, "Forbid network use (fallback/synthetic/stub only)");

  // --- apr ---
  auto* apr_cmd = app.add_subcommand("apr", "Reframe a corpus into attributed third person");
  std::string apr_corpus, apr_mode = "fallback", apr_name = "the author", apr_out;
  ClientOptions apr_client;
  apr_cmd->add_option("--corpus", apr_corpus, "Corpus directory or JSONL manifest")->required();
  apr_cmd->add_option("--mode", apr_mode, "fallback or live")
      ->check(CLI::IsMember({"fallback", "live"}));
  apr_cmd->add_option("--name", apr_name, "Attribution name");
  apr_cmd->add_option("--out", apr_out, "Output JSONL path")->required();
  apr_cmd->add_option("--model", apr_client.model, "Generation model name (live mode)");
  apr_cmd->add_option("--audit-log", apr_client.audit_log, "Append request/response JSONL");
  apr_cmd->add_option("--replay", apr_client.replay_log, "Serve responses from an audit log");

  // --- gen-data ---
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the three task datasets");
  std::string gen_corpus, gen_mode = "synthetic", gen_out, gen_author = "the author";
  std::vector<std::string> gen_tasks = kTaskIds;
  std::uint64_t gen_seed = 0;
  int gen_in_flight = 4;
  ClientOptions gen_client;
  gen_cmd->add_option("--corpus", gen_corpus, "Corpus directory or JSONL manifest")->required();
  gen_cmd->add_option("--mode", gen_mode, "synthetic or live")
      ->check(CLI::IsMember({"synthetic", "live"}));
  gen_cmd->add_option("--tasks", gen_tasks, "Tasks to generate (mcq gqa st)");
  gen_cmd->add_option("--seed", gen_seed, "Generation seed")->required();
  gen_cmd->add_option("--out", gen_out, "Output directory")->required();
  gen_cmd->add_option("--author", gen_author, "Attribution name for prompts");
  gen_cmd->add_option("--model", gen_client.model, "Generation model name (live mode)");
  gen_cmd->add_option("--max-in-flight", gen_in_flight, "Concurrent live requests");
  gen_cmd->add_option("--audit-log", gen_client.audit_log, "Append request/response JSONL");
  gen_cmd->add_option("--replay", gen_client.replay_log, "Serve responses from an audit log");

  // --- pretrain ---
  auto* pre_cmd = app.add_subcommand("pretrain", "Next-token adapter pre-training");
  std::string pre_corpus, pre_apr, pre_model_in, pre_model_out, pre_adapters_out, pre_log,
      pre_ckpt_dir;
  std::uint64_t pre_seed = 0;
  std::size_t pre_max_steps = 0;
  TrainFlags pre_flags;
  std::optional<std::size_t> pre_d_model, pre_n_layers, pre_n_heads, pre_d_ff, pre_max_seq;
  bool pre_adapt_head = false;
  pre_cmd->add_option("--corpus", pre_corpus, "Corpus directory or JSONL manifest")->required();
  pre_cmd->add_option("--apr", pre_apr, "Reframed corpus JSONL (from the apr subcommand)");
  pre_cmd->add_option("--model", pre_model_in, "Continue from an existing model checkpoint");
  pre_cmd->add_option("--seed", pre_seed, "Training and init seed")->required();
  pre_cmd->add_option("--model-out", pre_model_out, "Model checkpoint output")->required();
  pre_cmd->add_option("--adapters-out", pre_adapters_out, "Adapter file output")->required();
  pre_cmd->add_option("--max-steps", pre_max_steps, "Stop after this many steps (0: epochs)");
  pre_cmd->add_option("--log", pre_log, "Run log JSONL");
  pre_cmd->add_option("--checkpoint-dir", pre_ckpt_dir, "Resumable checkpoint directory");
  pre_cmd->add_option("--d-model", pre_d_model, "Model width");
  pre_cmd->add_option("--n-layers", pre_n_layers, "Transformer blocks");
  pre_cmd->add_option("--n-heads", pre_n_heads, "Attention heads");
  pre_cmd->add_option("--d-ff", pre_d_ff, "Feed-forward width");
  pre_cmd->add_option("--max-seq", pre_max_seq, "Context length");
  pre_cmd->add_flag("--adapt-lm-head", pre_adapt_head, "Adapt the output head as well");
  pre_flags.attach(pre_cmd);

  // --- finetune ---
  auto* ft_cmd = app.add_subcommand("finetune", "Task fine-tuning with routed adapters");
  std::string ft_model, ft_pretrained, ft_data, ft_out, ft_log, ft_ckpt_dir;
  std::uint64_t ft_seed = 0;
  std::size_t ft_max_steps = 0;
  TrainFlags ft_flags;
  ft_cmd->add_option("--model", ft_model, "Base model checkpoint")->required();
  ft_cmd->add_option("--pretrained", ft_pretrained, "Pre-trained adapter file")->required();
  ft_cmd->add_option("--data", ft_data, "Dataset directory with <task>.jsonl files")->required();
  ft_cmd->add_option("--out", ft_out, "Fine-tuned adapter output")->required();
  ft_cmd->add_option("--seed", ft_seed, "Training seed")->required();
  ft_cmd->add_option("--max-steps", ft_max_steps, "Stop after this many steps (0: epochs)");
  ft_cmd->add_option("--log", ft_log, "Run log JSONL");
  ft_cmd->add_option("--checkpoint-dir", ft_ckpt_dir, "Resumable checkpoint directory");
  ft_flags.attach(ft_cmd);

  // --- eval ---
  auto* eval_cmd = app.add_subcommand("eval", "Metric suite over held-out task data");
  std::string ev_model, ev_adapters, ev_test, ev_judge = "stub", ev_report, ev_examples;
  std::uint64_t ev_seed = 0;
  std::size_t ev_max_new = 128;
  ClientOptions ev_client;
  eval_cmd->add_option("--model", ev_model, "Model checkpoint")->required();
  eval_cmd->add_option("--adapters", ev_adapters, "Adapter file (optional)");
  eval_cmd->add_option("--test", ev_test, "Test dataset directory")->required();
  eval_cmd->add_option("--judge", ev_judge, "stub or live")
      ->check(CLI::IsMember({"stub", "live"}));
  eval_cmd->add_option("--report", ev_report, "Report JSON output")->required();
  eval_cmd->add_option("--examples-out", ev_examples, "Per-example JSONL output");
  eval_cmd->add_option("--seed", ev_seed, "Evaluation seed")->required();
  eval_cmd->add_option("--max-new", ev_max_new, "Decode budget per example");
  eval_cmd->add_option("--judge-model", ev_client.model, "Judge model name (live)");
  eval_cmd->add_option("--audit-log", ev_client.audit_log, "Append request/response JSONL");
  eval_cmd->add_option("--replay", ev_client.replay_log, "Serve responses from an audit log");

  // --- merge ---
  auto* merge_cmd = app.add_subcommand("merge", "Bake one task's adapters into plain weights");
  std::string mg_model, mg_adapters, mg_task, mg_out;
  merge_cmd->add_option("--model", mg_model, "Model checkpoint")->required();
  merge_cmd->add_option("--adapters", mg_adapters, "Adapter file")->required();
  merge_cmd->add_option("--task", mg_task, "Task to merge (required for banks)");
  merge_cmd->add_option("--out", mg_out, "Merged checkpoint output")->required();

  // --- inspect ---
  auto* ins_cmd = app.add_subcommand("inspect", "Describe adapter files");
  std::vector<std::string> ins_files;
  ins_cmd->add_option("files", ins_files, "Adapter files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  apr_client.offline = gen_client.offline = ev_client.offline = offline;

  if (apr_cmd->parsed()) {
    const Corpus corpus = load_corpus(apr_corpus);
    std::shared_ptr<ChatClient> client;
    if (apr_mode == "live") client = make_live_client(apr_client);
    std::ofstream out = open_out(apr_out);
    for (const Essay& essay : corpus.essays) {
      const AprResult result =
          apr_transform(essay, apr_mode == "live" ? AprMode::Live : AprMode::Fallback, apr_name,
                        client.get(), apr_client.model);
      for (const std::string& w : result.warnings)
        std::cerr << "warning: " << essay.title << ": " << w << "\n";
      out << nlohmann::json({{"source_essay_id", essay.id},
                             {"collection", essay.collection},
                             {"title", essay.title},
                             {"text", result.text}})
                 .dump()
          << "\n";
    }
    return 0;
  }

  if (gen_cmd->parsed()) {
    const Corpus corpus = load_corpus(gen_corpus);
    std::shared_ptr<ChatClient> client;
    if (gen_mode == "live") client = make_live_client(gen_client);
    std::filesystem::create_directories(gen_out);
    for (const std::string& task : gen_tasks) {
      const auto examples = generate_corpus_task_data(
          corpus, task, gen_mode == "live" ? GenMode::Live : GenMode::Synthetic, gen_seed,
          client.get(), gen_author, gen_client.model, gen_in_flight);
      write_examples_jsonl(std::filesystem::path(gen_out) / (task + ".jsonl"), examples);
      std::cerr << task << ": " << examples.size() << " examples\n";
    }
    return 0;
  }

  if (pre_cmd->parsed()) {
    const TrainConfig cfg = pre_flags.resolve(pre_seed);
    const Corpus corpus = load_corpus(pre_corpus);
    std::vector<std::string> apr_texts;
    if (!pre_apr.empty()) apr_texts = load_apr_texts(pre_apr);

    ModelState state;
    if (!pre_model_in.empty()) {
      state = read_checkpoint(pre_model_in);
    } else {
      // Model dimensions always start from the desk profile; the full-scale
      // profile only changes the training configuration.
      LMConfig lm = desk_lm_config(pre_seed);
      if (pre_d_model) lm.d_model = *pre_d_model;
      if (pre_n_layers) lm.n_layers = *pre_n_layers;
      if (pre_n_heads) lm.n_heads = *pre_n_heads;
      if (pre_d_ff) lm.d_ff = *pre_d_ff;
      if (pre_max_seq) lm.max_seq = *pre_max_seq;
      if (pre_adapt_head) {
        lm.adapter_layers = default_adapter_layer_ids(lm);
        lm.adapter_layers.push_back("lm_head");
      }
      state = init_model(lm);
    }

    std::ofstream log;
    if (!pre_log.empty()) log = open_out(pre_log);
    TrainOptions opts;
    opts.max_steps = pre_max_steps;
    opts.callback = log_writer(pre_log.empty() ? nullptr : &log);

    AdamW optimizer(AdamW::Config{.lr = cfg.learning_rate});
    const TrainResult result = pretrain(state, corpus, apr_texts, cfg, optimizer, opts);
    write_checkpoint(pre_model_out, state);
    write_adapter_file(pre_adapters_out, state.pretrain_set());
    if (!pre_ckpt_dir.empty())
      write_training_checkpoint(pre_ckpt_dir, state, optimizer, cfg, result.history.size());
    if (!result.history.empty())
      std::cerr << "pretrain: " << result.history.size() << " steps, first loss "
                << result.history.front().loss << ", final loss " << result.history.back().loss
                << "\n";
    return 0;
  }

  if (ft_cmd->parsed()) {
    const TrainConfig cfg = ft_flags.resolve(ft_seed);
    ModelState state = read_checkpoint(ft_model);
    AdapterStore store = read_adapter_file(ft_pretrained);
    if (auto* set = std::get_if<PretrainAdapterSet>(&store))
      state.adapters = std::move(*set);
    else
      state.adapters = std::move(std::get<TaskAdapterBank>(store));

    const auto datasets = load_datasets(ft_data);

    std::ofstream log;
    if (!ft_log.empty()) log = open_out(ft_log);
    TrainOptions opts;
    opts.max_steps = ft_max_steps;
    opts.callback = log_writer(ft_log.empty() ? nullptr : &log);

    AdamW optimizer(AdamW::Config{.lr = cfg.learning_rate});
    const TrainResult result = finetune(state, datasets, cfg, optimizer, opts);

    if (const auto* bank = std::get_if<TaskAdapterBank>(&state.adapters)) {
      write_adapter_file(ft_out, *bank);
    } else if (const auto* set = std::get_if<PretrainAdapterSet>(&state.adapters)) {
      write_adapter_file(ft_out, *set);
    } else if (const auto* multi = std::get_if<MultiTaskAdapters>(&state.adapters)) {
      const std::filesystem::path base(ft_out);
      for (const std::string& task : multi->task_order) {
        std::filesystem::path p = base;
        p.replace_extension();
        p += "_" + task + ".chla";
        write_adapter_file(p, multi->per_task.at(task));
        std::cerr << "wrote " << p.string() << "\n";
      }
    }
    if (!ft_ckpt_dir.empty())
      write_training_checkpoint(ft_ckpt_dir, state, optimizer, cfg, result.history.size());
    if (!result.history.empty())
      std::cerr << "finetune: " << result.history.size() << " steps, final loss "
                << result.history.back().loss << "\n";
    return 0;
  }

  if (eval_cmd->parsed()) {
    ModelState state = read_checkpoint(ev_model);
    if (!ev_adapters.empty()) {
      AdapterStore store = read_adapter_file(ev_adapters);
      if (auto* set = std::get_if<PretrainAdapterSet>(&store))
        state.adapters = std::move(*set);
      else
        state.adapters = std::move(std::get<TaskAdapterBank>(store));
    }
    const auto datasets = load_datasets(ev_test);

    BuildReportOptions opts;
    opts.judge = ev_judge == "live" ? JudgeMode::Live : JudgeMode::Stub;
    std::shared_ptr<ChatClient> client;
    if (opts.judge == JudgeMode::Live) {
      client = make_live_client(ev_client);
      opts.client = client.get();
      opts.judge_model = ev_client.model;
    }
    opts.seed = ev_seed;
    opts.checkpoint_ref = ev_model + (ev_adapters.empty() ? "" : " + " + ev_adapters);
    opts.max_new_tokens = ev_max_new;
    if (!ev_examples.empty()) opts.per_example_path = ev_examples;

    const EvalReport report = build_report(state, datasets, opts);
    std::ofstream out = open_out(ev_report);
    out << report.to_json().dump(2) << "\n";
    return 0;
  }

  if (merge_cmd->parsed()) {
    ModelState state = read_checkpoint(mg_model);
    AdapterStore store = read_adapter_file(mg_adapters);

    auto merge_layer = [&](const BaseLinear& layer) -> std::optional<Tensor> {
      if (const auto* set = std::get_if<PretrainAdapterSet>(&store)) {
        if (!set->has_layer(layer.layer_id)) return std::nullopt;
        return merge(layer, *set);
      }
      const auto& bank = std::get<TaskAdapterBank>(store);
      if (mg_task.empty())
        throw ValidationError("merge: --task is required for a task adapter bank");
      if (!bank.layers.count(layer.layer_id)) return std::nullopt;
      return merge(layer, bank, mg_task);
    };

    std::size_t merged_count = 0;
    for (BlockWeights& blk : state.blocks)
      for (BaseLinear* lin : {&blk.wq, &blk.wk, &blk.wv, &blk.wo, &blk.fc1, &blk.fc2})
        if (auto w = merge_layer(*lin)) {
          lin->W0.values() = w->values();
          ++merged_count;
        }
    if (auto w = merge_layer(state.lm_head)) {
      state.lm_head.W0.values() = w->values();
      ++merged_count;
    }
    state.adapters = std::monostate{};
    write_checkpoint(mg_out, state);
    std::cerr << "merged " << merged_count << " layers into " << mg_out << "\n";
    return 0;
  }

  if (ins_cmd->parsed()) {
    nlohmann::json out = nlohmann::json::array();
    std::size_t total = 0;
    for (const std::string& f : ins_files) {
      nlohmann::json info = inspect_adapter_file(f);
      total += info.at("trainable_params").get<std::size_t>();
      out.push_back(std::move(info));
    }
    nlohmann::json doc = {{"files", out}, {"total_trainable_params", total}};
    std::cout << doc.dump(2) << "\n";
    return 0;
  }

  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const charbot::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const charbot::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
