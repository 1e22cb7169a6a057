#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "kplora/dataset_builder.hpp"
#include "kplora/error.hpp"
#include "kplora/lora.hpp"
#include "kplora/metrics.hpp"
#include "kplora/toy_lm.hpp"
#include "kplora/toy_task.hpp"
#include "kplora/trainer.hpp"

namespace kplora {

inline constexpr const char* kOutRootEnv = "KPLORA_OUT_ROOT";
inline constexpr const char* kRunConfigFile = "run_config.json";

// Fully resolved settings for one command. Serialized into every output
// directory; reading that file back reproduces the run.
struct RunConfig {
  std::string command;

  std::string annotations;
  std::string out_dir;
  std::string predictions;
  std::string ground_truth;
  std::string checkpoint;
  std::string base_checkpoint;
  std::string model_name = "toy-lm";
  std::string trainable_params = "-";

  LoraConfig lora;
  ModelConfig model;

  std::vector<double> pck_alphas{0.05, 0.10};
  double normalizer = 1.0;
  std::string policy = "recover";
  bool pad_short = false;
  bool skip_unmatched = false;

  std::string mode = "lora";  // lora | frozen
  int epochs = 2;
  std::uint64_t seed = 7;
  int batch_size = 8;
  double lr = 3e-3;
  std::string optimizer = "adam";
  int pretrain_steps = 800;
  double pretrain_lr = 3e-3;
  int train_samples = 2048;
  int test_samples = 100;
  int max_new_tokens = 200;

  std::vector<int> ranks{4, 8, 16};

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace harness_detail {

using ojson = nlohmann::ordered_json;

inline void check_keys(const nlohmann::json& obj, std::initializer_list<std::string_view> allowed,
                       const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown config key '" + where + "." + key + "'");
  }
}

template <class T>
void read_opt(const nlohmann::json& obj, const char* key, T& out, const std::string& where) {
  const auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + where + "." + key + "' has the wrong type");
  }
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::string csv_log(const std::vector<LogEntry>& log) {
  std::string s = "step,loss,lr\n";
  char buf[96];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%ld,%.17g,%.17g\n", e.step, e.loss, e.lr);
    s += buf;
  }
  return s;
}

inline std::string join(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir, ec.message());
}

inline std::vector<LmSequence> encode_all(const std::vector<ToySample>& samples, const Vocab& vocab) {
  std::vector<LmSequence> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(to_lm_sequence(encode_example(s, vocab)));
  return out;
}

}  // namespace harness_detail

// Independent stream for each named purpose, derived from the run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
  return harness_detail::splitmix64(seed ^ harness_detail::fnv1a(purpose));
}

inline nlohmann::ordered_json run_config_to_json(const RunConfig& c) {
  harness_detail::ojson j;
  j["command"] = c.command;
  j["paths"] = {{"annotations", c.annotations},         {"out_dir", c.out_dir},
                {"predictions", c.predictions},         {"ground_truth", c.ground_truth},
                {"checkpoint", c.checkpoint},           {"base_checkpoint", c.base_checkpoint}};
  j["lora"] = {{"rank", c.lora.rank},
               {"alpha", c.lora.alpha},
               {"dropout", c.lora.dropout},
               {"targets", target_names(c.lora.targets)}};
  j["model"] = {{"d_model", c.model.d_model},         {"n_layers", c.model.n_layers},
                {"n_heads", c.model.n_heads},         {"max_seq_len", c.model.max_seq_len},
                {"ffn_mult", c.model.ffn_mult},       {"rope_base", c.model.rope_base}};
  j["metrics"] = {{"pck_alphas", c.pck_alphas},     {"normalizer", c.normalizer},
                  {"policy", c.policy},             {"pad_short", c.pad_short},
                  {"skip_unmatched", c.skip_unmatched}};
  j["training"] = {{"mode", c.mode},
                   {"epochs", c.epochs},
                   {"seed", c.seed},
                   {"batch_size", c.batch_size},
                   {"lr", c.lr},
                   {"optimizer", c.optimizer},
                   {"pretrain_steps", c.pretrain_steps},
                   {"pretrain_lr", c.pretrain_lr},
                   {"train_samples", c.train_samples}};
  j["toy"] = {{"test_samples", c.test_samples}, {"max_new_tokens", c.max_new_tokens}};
  j["report"] = {{"model_name", c.model_name}, {"trainable_params", c.trainable_params}};
  j["ablation"] = {{"ranks", c.ranks}};
  return j;
}

// Overrides the fields present in `j`; unknown keys are rejected.
inline void apply_config_json(RunConfig& c, const nlohmann::json& j) {
  using harness_detail::check_keys;
  using harness_detail::read_opt;
  check_keys(j, {"command", "paths", "lora", "model", "metrics", "training", "toy", "report", "ablation"},
             "config");
  read_opt(j, "command", c.command, "config");
  if (j.contains("paths")) {
    const auto& p = j["paths"];
    check_keys(p, {"annotations", "out_dir", "predictions", "ground_truth", "checkpoint", "base_checkpoint"},
               "paths");
    read_opt(p, "annotations", c.annotations, "paths");
    read_opt(p, "out_dir", c.out_dir, "paths");
    read_opt(p, "predictions", c.predictions, "paths");
    read_opt(p, "ground_truth", c.ground_truth, "paths");
    read_opt(p, "checkpoint", c.checkpoint, "paths");
    read_opt(p, "base_checkpoint", c.base_checkpoint, "paths");
  }
  if (j.contains("lora")) {
    const auto& l = j["lora"];
    check_keys(l, {"rank", "alpha", "dropout", "targets"}, "lora");
    read_opt(l, "rank", c.lora.rank, "lora");
    read_opt(l, "alpha", c.lora.alpha, "lora");
    read_opt(l, "dropout", c.lora.dropout, "lora");
    if (l.contains("targets")) {
      std::vector<std::string> names;
      read_opt(l, "targets", names, "lora");
      unsigned set = 0;
      for (const auto& n : names) set |= static_cast<unsigned>(parse_target(n));
      c.lora.targets = set;
    }
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    check_keys(m, {"d_model", "n_layers", "n_heads", "max_seq_len", "ffn_mult", "rope_base"}, "model");
    read_opt(m, "d_model", c.model.d_model, "model");
    read_opt(m, "n_layers", c.model.n_layers, "model");
    read_opt(m, "n_heads", c.model.n_heads, "model");
    read_opt(m, "max_seq_len", c.model.max_seq_len, "model");
    read_opt(m, "ffn_mult", c.model.ffn_mult, "model");
    read_opt(m, "rope_base", c.model.rope_base, "model");
  }
  if (j.contains("metrics")) {
    const auto& m = j["metrics"];
    check_keys(m, {"pck_alphas", "normalizer", "policy", "pad_short", "skip_unmatched"}, "metrics");
    read_opt(m, "pck_alphas", c.pck_alphas, "metrics");
    read_opt(m, "normalizer", c.normalizer, "metrics");
    read_opt(m, "policy", c.policy, "metrics");
    read_opt(m, "pad_short", c.pad_short, "metrics");
    read_opt(m, "skip_unmatched", c.skip_unmatched, "metrics");
  }
  if (j.contains("training")) {
    const auto& t = j["training"];
    check_keys(t, {"mode", "epochs", "seed", "batch_size", "lr", "optimizer", "pretrain_steps", "pretrain_lr",
                   "train_samples"},
               "training");
    read_opt(t, "mode", c.mode, "training");
    read_opt(t, "epochs", c.epochs, "training");
    read_opt(t, "seed", c.seed, "training");
    read_opt(t, "batch_size", c.batch_size, "training");
    read_opt(t, "lr", c.lr, "training");
    read_opt(t, "optimizer", c.optimizer, "training");
    read_opt(t, "pretrain_steps", c.pretrain_steps, "training");
    read_opt(t, "pretrain_lr", c.pretrain_lr, "training");
    read_opt(t, "train_samples", c.train_samples, "training");
  }
  if (j.contains("toy")) {
    const auto& t = j["toy"];
    check_keys(t, {"test_samples", "max_new_tokens"}, "toy");
    read_opt(t, "test_samples", c.test_samples, "toy");
    read_opt(t, "max_new_tokens", c.max_new_tokens, "toy");
  }
  if (j.contains("report")) {
    const auto& r = j["report"];
    check_keys(r, {"model_name", "trainable_params"}, "report");
    read_opt(r, "model_name", c.model_name, "report");
    read_opt(r, "trainable_params", c.trainable_params, "report");
  }
  if (j.contains("ablation")) {
    const auto& a = j["ablation"];
    check_keys(a, {"ranks"}, "ablation");
    read_opt(a, "ranks", c.ranks, "ablation");
  }
}

inline RunConfig load_run_config(const std::string& path, RunConfig base = {}) {
  const std::string text = read_text_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": " + e.what(), e.byte == 0 ? 0 : e.byte - 1);
  }
  apply_config_json(base, j);
  return base;
}

inline void validate_run_config(const RunConfig& c) {
  c.lora.validate();
  if (c.pck_alphas.empty()) throw ConfigError("at least one PCK threshold is required");
  for (double a : c.pck_alphas) PckConfig{a, c.normalizer}.validate();
  if (c.policy != "strict" && c.policy != "recover") throw ConfigError("policy must be 'strict' or 'recover'");
  if (c.mode != "lora" && c.mode != "frozen") throw ConfigError("mode must be 'lora' or 'frozen'");
  if (c.optimizer != "adam" && c.optimizer != "sgd") throw ConfigError("optimizer must be 'adam' or 'sgd'");
  if (c.epochs < 0) throw ConfigError("epochs must be non-negative");
  if (c.batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(c.lr > 0.0) || !(c.pretrain_lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (c.pretrain_steps < 0 || c.train_samples < 1 || c.test_samples < 1 || c.max_new_tokens < 1)
    throw ConfigError("toy task sizes must be positive");
  if (c.ranks.empty()) throw ConfigError("ablation needs at least one rank");
  for (int r : c.ranks)
    if (r < 1) throw ConfigError("ablation ranks must be positive");
}

// Output directory: explicit value, else $KPLORA_OUT_ROOT/<command>, else
// runs/<command>.
inline std::string resolve_out_dir(const RunConfig& c) {
  if (!c.out_dir.empty()) return c.out_dir;
  const char* root = std::getenv(kOutRootEnv);
  const std::string base = (root && *root) ? root : "runs";
  return harness_detail::join(base, c.command.empty() ? "run" : c.command);
}

inline void write_run_config(const RunConfig& c, const std::string& dir) {
  harness_detail::ensure_dir(dir);
  write_text_file(harness_detail::join(dir, kRunConfigFile), run_config_to_json(c).dump(2) + "\n");
}

// ---------------------------------------------------------------- build-data

inline EmissionStats cmd_build_data(RunConfig c) {
  c.command = "build-data";
  c.out_dir = resolve_out_dir(c);
  validate_run_config(c);
  if (c.annotations.empty()) throw ConfigError("build-data needs --annotations");
  const Dataset ds = load_annotations(c.annotations);
  write_run_config(c, c.out_dir);
  const EmissionStats stats = emit_dataset(ds, harness_detail::join(c.out_dir, "dataset.jsonl"));
  harness_detail::ojson j{{"records", stats.records}, {"instances", stats.instances}};
  write_text_file(harness_detail::join(c.out_dir, "stats.json"), j.dump(2) + "\n");
  return stats;
}

// ----------------------------------------------------------------- train-toy

struct TrainSummary {
  std::string checkpoint;
  std::string base_checkpoint;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  long steps = 0;
  std::size_t trainable_params = 0;
};

inline ModelConfig toy_model_config(const RunConfig& c, const Vocab& vocab) {
  ModelConfig m = c.model;
  m.vocab_size = vocab.size();
  m.validate();
  return m;
}

inline OptimizerConfig optimizer_config(const RunConfig& c, double lr) {
  OptimizerConfig o;
  o.kind = c.optimizer == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
  o.lr = lr;
  return o;
}

inline ToyTaskConfig toy_task_config(ObservationTransform t) {
  ToyTaskConfig cfg;
  cfg.transform = t;
  return cfg;
}

// Trains the base model on the copy task (observation == answer).
inline ToyLM pretrain_base(const RunConfig& c, const Vocab& vocab, std::vector<LogEntry>& log) {
  ToyLM model(toy_model_config(c, vocab), derive_seed(c.seed, "base-init"));
  const auto corpus = make_toy_task(static_cast<std::size_t>(c.pretrain_steps) * c.batch_size,
                                    derive_seed(c.seed, "pretrain-data"),
                                    toy_task_config(ObservationTransform::identity), vocab.classes());
  auto state = make_training_state(model, TrainMode::pretrain, optimizer_config(c, c.pretrain_lr),
                                   derive_seed(c.seed, "pretrain-dropout"));
  log = train_epochs(model, harness_detail::encode_all(corpus, vocab), state, 1,
                     static_cast<std::size_t>(c.batch_size), derive_seed(c.seed, "pretrain-shuffle"));
  return model;
}

inline TrainSummary cmd_train_toy(RunConfig c) {
  using harness_detail::join;
  c.command = "train-toy";
  c.out_dir = resolve_out_dir(c);
  validate_run_config(c);
  const Vocab vocab(default_class_vocab());
  write_run_config(c, c.out_dir);

  TrainSummary summary;
  ToyLM model;
  if (c.base_checkpoint.empty()) {
    std::vector<LogEntry> log;
    model = pretrain_base(c, vocab, log);
    write_text_file(join(c.out_dir, "pretrain_log.csv"), harness_detail::csv_log(log));
    summary.base_checkpoint = join(c.out_dir, "base.ckpt");
    model.save(summary.base_checkpoint, vocab.classes());
  } else {
    auto loaded = ToyLM::load(c.base_checkpoint);
    if (loaded.model.has_adapters()) throw ConfigError(c.base_checkpoint + ": base checkpoint carries adapters");
    if (loaded.classes.names() != vocab.classes().names())
      throw ConfigError(c.base_checkpoint + ": class vocabulary differs from the toy vocabulary");
    model = std::move(loaded.model);
    summary.base_checkpoint = c.base_checkpoint;
  }

  const auto train = make_toy_task(static_cast<std::size_t>(c.train_samples), derive_seed(c.seed, "train-data"),
                                   toy_task_config(ObservationTransform::mirror), vocab.classes());
  const TrainMode mode = c.mode == "lora" ? TrainMode::finetune : TrainMode::frozen;
  if (mode == TrainMode::finetune) model.attach_adapters(c.lora, derive_seed(c.seed, "adapter-init"));
  auto state = make_training_state(model, mode, optimizer_config(c, c.lr), derive_seed(c.seed, "dropout"));
  const auto log = train_epochs(model, harness_detail::encode_all(train, vocab), state, c.epochs,
                                static_cast<std::size_t>(c.batch_size), derive_seed(c.seed, "shuffle"));
  write_text_file(join(c.out_dir, "train_log.csv"), harness_detail::csv_log(log));

  summary.checkpoint = join(c.out_dir, "model.ckpt");
  model.save(summary.checkpoint, vocab.classes());
  if (model.has_adapters()) save_adapters(model.adapters(), join(c.out_dir, "adapters.kpla"));
  summary.steps = state.step;
  summary.trainable_params = model.trainable_adapter_parameters();
  if (!log.empty()) {
    summary.initial_loss = log.front().loss;
    summary.final_loss = log.back().loss;
  }
  harness_detail::ojson j{{"checkpoint", summary.checkpoint},
                          {"base_checkpoint", summary.base_checkpoint},
                          {"mode", c.mode},
                          {"steps", summary.steps},
                          {"initial_loss", report_detail::number_or_null(summary.initial_loss)},
                          {"final_loss", report_detail::number_or_null(summary.final_loss)},
                          {"trainable_params", summary.trainable_params},
                          {"base_params", model.base_parameter_count()}};
  write_text_file(join(c.out_dir, "summary.json"), j.dump(2) + "\n");
  return summary;
}

// --------------------------------------------------------------- predict-toy

struct PredictSummary {
  std::string predictions;
  std::string ground_truth;
  std::size_t samples = 0;
  std::size_t strict_parsed = 0;
  std::size_t exact_matches = 0;
  double token_accuracy = 0.0;  // position-wise agreement with the reference answer tokens

  double strict_parse_rate() const { return samples ? static_cast<double>(strict_parsed) / samples : 0.0; }
};

inline PredictSummary cmd_predict_toy(RunConfig c) {
  using harness_detail::join;
  c.command = "predict-toy";
  c.out_dir = resolve_out_dir(c);
  validate_run_config(c);
  if (c.checkpoint.empty()) throw ConfigError("predict-toy needs --checkpoint");
  auto loaded = ToyLM::load(c.checkpoint);
  if (c.mode == "frozen") loaded.model.detach_adapters();
  const Vocab vocab(loaded.classes);
  write_run_config(c, c.out_dir);

  const ToyTaskConfig task = toy_task_config(ObservationTransform::mirror);
  const auto test = make_toy_task(static_cast<std::size_t>(c.test_samples), derive_seed(c.seed, "test-data"),
                                  task, vocab.classes());
  PredictSummary s;
  std::vector<PredictionRecord> preds;
  std::size_t tokens_right = 0, tokens_total = 0;
  for (const auto& sample : test) {
    const auto ex = encode_example(sample, vocab);
    const auto out = generate(loaded.model, ex.prompt(), static_cast<std::size_t>(c.max_new_tokens));
    std::string text = vocab.detokenize(out);
    const std::vector<int> ref(ex.tokens.begin() + static_cast<std::ptrdiff_t>(ex.answer_start), ex.tokens.end() - 1);
    for (std::size_t i = 0; i < ref.size(); ++i) tokens_right += (i < out.size() && out[i] == ref[i]) ? 1 : 0;
    tokens_total += ref.size();
    if (parse_prediction(text, {ParseMode::strict}).ok()) ++s.strict_parsed;
    if (text == sample.answer) ++s.exact_matches;
    preds.push_back({sample.sample_id, std::move(text)});
    ++s.samples;
  }
  s.token_accuracy = tokens_total ? static_cast<double>(tokens_right) / tokens_total : 0.0;
  s.predictions = join(c.out_dir, "predictions.jsonl");
  s.ground_truth = join(c.out_dir, "ground_truth.json");
  save_predictions(preds, s.predictions);
  save_annotations(toy_ground_truth(test, task, vocab.classes()), s.ground_truth);
  harness_detail::ojson j{{"predictions", s.predictions},
                          {"ground_truth", s.ground_truth},
                          {"samples", s.samples},
                          {"strict_parsed", s.strict_parsed},
                          {"strict_parse_rate", s.strict_parse_rate()},
                          {"exact_matches", s.exact_matches},
                          {"token_accuracy", s.token_accuracy}};
  write_text_file(join(c.out_dir, "summary.json"), j.dump(2) + "\n");
  return s;
}

// ---------------------------------------------------------------------- eval

inline EvalOptions eval_options(const RunConfig& c) {
  EvalOptions o;
  o.pck_alphas = c.pck_alphas;
  o.normalizer = c.normalizer;
  o.parse.mode = c.policy == "strict" ? ParseMode::strict : ParseMode::recover;
  o.parse.pad_short = c.pad_short;
  o.unmatched = c.skip_unmatched ? UnmatchedPolicy::skip : UnmatchedPolicy::penalize;
  return o;
}

struct EvalOutput {
  EvalReport report;
  std::string table;
};

inline EvalOutput cmd_eval(RunConfig c) {
  using harness_detail::join;
  c.command = "eval";
  c.out_dir = resolve_out_dir(c);
  validate_run_config(c);
  if (c.predictions.empty() || c.ground_truth.empty())
    throw ConfigError("eval needs --predictions and --ground-truth");
  const Dataset gt = load_annotations(c.ground_truth);
  const auto preds = load_predictions(c.predictions);
  EvalOptions opts = eval_options(c);
  opts.parse.vocab = ClassVocab(gt.classes);
  write_run_config(c, c.out_dir);

  EvalOutput out;
  out.report = evaluate_dataset(preds, gt, opts);
  out.table = format_model_table({{c.model_name, out.report, c.trainable_params}});
  auto j = report_to_json(out.report);
  j["model"] = c.model_name;
  j["trainable_params"] = c.trainable_params;
  write_text_file(join(c.out_dir, "report.json"), j.dump(2) + "\n");
  write_text_file(join(c.out_dir, "report.txt"), out.table);
  return out;
}

// -------------------------------------------------------------- ablate-rank

struct AblationRun {
  int rank = 0;
  std::string train_dir;
  TrainSummary train;
  PredictSummary predict;
  EvalReport report;
};

struct AblationOutput {
  std::string base_checkpoint;
  std::vector<AblationRun> runs;
  std::string table;
};

// One shared base; per rank: train-toy, predict-toy and eval in
// <out>/rank_<r>/{train,predict,eval}.
inline AblationOutput cmd_ablate_rank(RunConfig c) {
  using harness_detail::join;
  c.command = "ablate-rank";
  c.out_dir = resolve_out_dir(c);
  validate_run_config(c);
  write_run_config(c, c.out_dir);

  AblationOutput out;
  out.base_checkpoint = c.base_checkpoint;
  if (out.base_checkpoint.empty()) {
    RunConfig base = c;
    base.mode = "frozen";
    base.epochs = 0;
    base.out_dir = join(c.out_dir, "base");
    out.base_checkpoint = cmd_train_toy(base).base_checkpoint;
  }

  std::vector<RankRow> rows;
  for (int r : c.ranks) {
    AblationRun run;
    run.rank = r;
    const std::string dir = join(c.out_dir, "rank_" + std::to_string(r));

    RunConfig t = c;
    t.lora.rank = r;
    t.mode = "lora";
    t.base_checkpoint = out.base_checkpoint;
    t.out_dir = join(dir, "train");
    run.train_dir = t.out_dir;
    run.train = cmd_train_toy(t);

    RunConfig p = t;
    p.checkpoint = run.train.checkpoint;
    p.out_dir = join(dir, "predict");
    run.predict = cmd_predict_toy(p);

    RunConfig e = t;
    e.predictions = run.predict.predictions;
    e.ground_truth = run.predict.ground_truth;
    e.model_name = "rank " + std::to_string(r);
    e.trainable_params = std::to_string(run.train.trainable_params);
    e.out_dir = join(dir, "eval");
    run.report = cmd_eval(e).report;

    rows.push_back({r, run.report});
    out.runs.push_back(std::move(run));
  }

  out.table = format_rank_table(rows);
  harness_detail::ojson j;
  j["base_checkpoint"] = out.base_checkpoint;
  j["rows"] = harness_detail::ojson::array();
  for (const auto& run : out.runs) {
    auto row = report_to_json(run.report);
    row["rank"] = run.rank;
    row["trainable_params"] = run.train.trainable_params;
    row["final_loss"] = report_detail::number_or_null(run.train.final_loss);
    row["strict_parse_rate"] = run.predict.strict_parse_rate();
    row["config"] = join(run.train_dir, kRunConfigFile);
    j["rows"].push_back(std::move(row));
  }
  write_text_file(join(c.out_dir, "ablation.json"), j.dump(2) + "\n");
  write_text_file(join(c.out_dir, "ablation.txt"), out.table);
  return out;
}

}  // namespace kplora
