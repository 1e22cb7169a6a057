// kplora command-line entry point.
//
// Exit codes: 0 success, 1 internal error, 2 input validation error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kplora/harness.hpp"

namespace {

using kplora::RunConfig;

// Flags as parsed; unset optionals leave the config-file or default value.
struct Flags {
  std::string config;
  std::optional<std::string> annotations, out, predictions, ground_truth, checkpoint, base;
  std::optional<std::string> model_name, trainable_params, policy, mode, optimizer;
  std::optional<int> rank, epochs, batch_size, pretrain_steps, train_samples, test_samples, max_new_tokens;
  std::optional<double> alpha, dropout, lr, pretrain_lr, normalizer;
  std::optional<std::uint64_t> seed;
  std::vector<double> pck_alphas;
  std::vector<int> ranks;
  std::vector<std::string> targets;
  bool pad_short = false, skip_unmatched = false;
};

template <class T>
void set_if(const std::optional<T>& v, T& dst) {
  if (v) dst = *v;
}

RunConfig resolve(const Flags& f) {
  RunConfig c;
  if (!f.config.empty()) c = kplora::load_run_config(f.config, c);
  set_if(f.annotations, c.annotations);
  set_if(f.out, c.out_dir);
  set_if(f.predictions, c.predictions);
  set_if(f.ground_truth, c.ground_truth);
  set_if(f.checkpoint, c.checkpoint);
  set_if(f.base, c.base_checkpoint);
  set_if(f.model_name, c.model_name);
  set_if(f.trainable_params, c.trainable_params);
  set_if(f.policy, c.policy);
  set_if(f.mode, c.mode);
  set_if(f.optimizer, c.optimizer);
  set_if(f.rank, c.lora.rank);
  set_if(f.alpha, c.lora.alpha);
  set_if(f.dropout, c.lora.dropout);
  set_if(f.epochs, c.epochs);
  set_if(f.seed, c.seed);
  set_if(f.batch_size, c.batch_size);
  set_if(f.lr, c.lr);
  set_if(f.pretrain_lr, c.pretrain_lr);
  set_if(f.pretrain_steps, c.pretrain_steps);
  set_if(f.train_samples, c.train_samples);
  set_if(f.test_samples, c.test_samples);
  set_if(f.max_new_tokens, c.max_new_tokens);
  set_if(f.normalizer, c.normalizer);
  if (!f.pck_alphas.empty()) c.pck_alphas = f.pck_alphas;
  if (!f.ranks.empty()) c.ranks = f.ranks;
  if (!f.targets.empty()) {
    unsigned set = 0;
    for (const auto& t : f.targets) set |= static_cast<unsigned>(kplora::parse_target(t));
    c.lora.targets = set;
  }
  if (f.pad_short) c.pad_short = true;
  if (f.skip_unmatched) c.skip_unmatched = true;
  return c;
}

void add_common(CLI::App& sub, Flags& f) {
  sub.add_option("--config", f.config, "JSON run config; flags override its values");
  sub.add_option("--out", f.out, "Output directory (default $KPLORA_OUT_ROOT/<command>)");
  sub.add_option("--seed", f.seed, "Run seed");
}

void add_model(CLI::App& sub, Flags& f) {
  sub.add_option("--rank", f.rank, "LoRA rank (default 8)");
  sub.add_option("--alpha", f.alpha, "LoRA scaling alpha (default 16)");
  sub.add_option("--dropout", f.dropout, "LoRA dropout (default 0.05)");
  sub.add_option("--targets", f.targets, "LoRA targets: query key value output feed_forward");
  sub.add_option("--epochs", f.epochs, "Fine-tuning epochs (default 2)");
  sub.add_option("--batch-size", f.batch_size, "Batch size (default 8)");
  sub.add_option("--lr", f.lr, "Fine-tuning learning rate (default 3e-3)");
  sub.add_option("--optimizer", f.optimizer, "adam | sgd")->check(CLI::IsMember({"adam", "sgd"}));
  sub.add_option("--pretrain-steps", f.pretrain_steps, "Base pretraining steps");
  sub.add_option("--pretrain-lr", f.pretrain_lr, "Base pretraining learning rate");
  sub.add_option("--train-samples", f.train_samples, "Fine-tuning corpus size");
  sub.add_option("--base", f.base, "Reuse a pretrained base checkpoint");
  sub.add_option("--mode", f.mode, "lora | frozen")->check(CLI::IsMember({"lora", "frozen"}));
}

void add_eval(CLI::App& sub, Flags& f) {
  sub.add_option("--pck-alpha", f.pck_alphas, "PCK threshold; repeatable (default 0.05 0.10)")
      ->allow_extra_args(false);
  sub.add_option("--normalizer", f.normalizer, "Normalization length L (default 1)");
  sub.add_option("--policy", f.policy, "strict | recover")->check(CLI::IsMember({"strict", "recover"}));
  sub.add_flag("--pad-short", f.pad_short, "Pad short instances instead of dropping them");
  sub.add_flag("--skip-unmatched", f.skip_unmatched, "Skip unmatched ground truth instead of penalizing");
  sub.add_option("--model-name", f.model_name, "Row label in the report table");
  sub.add_option("--trainable-params", f.trainable_params, "Trainable Params column value");
}

void print_eval(const kplora::EvalOutput& o) {
  std::cout << o.table;
  if (o.report.parse_failures) std::cout << "parse failures: " << o.report.parse_failures << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kplora: instruction data, toy LoRA training and keypoint evaluation"};
  app.require_subcommand(1);
  Flags f;

  auto* build = app.add_subcommand("build-data", "Convert keypoint annotations to instruction JSONL");
  add_common(*build, f);
  build->add_option("--annotations", f.annotations, "Annotation JSON file")->required();

  auto* train = app.add_subcommand("train-toy", "Pretrain the toy model and fine-tune LoRA adapters");
  add_common(*train, f);
  add_model(*train, f);

  auto* predict = app.add_subcommand("predict-toy", "Generate answers for the held-out toy samples");
  add_common(*predict, f);
  predict->add_option("--checkpoint", f.checkpoint, "Model checkpoint")->required();
  predict->add_option("--test-samples", f.test_samples, "Held-out sample count (default 100)");
  predict->add_option("--max-new-tokens", f.max_new_tokens, "Decoding budget (default 200)");
  predict->add_option("--mode", f.mode, "lora | frozen (frozen drops adapters)")
      ->check(CLI::IsMember({"lora", "frozen"}));

  auto* eval = app.add_subcommand("eval", "Score predictions against ground truth");
  add_common(*eval, f);
  add_eval(*eval, f);
  eval->add_option("--predictions", f.predictions, "Prediction JSONL")->required();
  eval->add_option("--ground-truth", f.ground_truth, "Ground-truth annotation JSON")->required();

  auto* ablate = app.add_subcommand("ablate-rank", "Fine-tune and evaluate one run per LoRA rank");
  add_common(*ablate, f);
  add_model(*ablate, f);
  add_eval(*ablate, f);
  ablate->add_option("--ranks", f.ranks, "Ranks to compare (default 4 8 16)");
  ablate->add_option("--test-samples", f.test_samples, "Held-out sample count (default 100)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    RunConfig c = resolve(f);
    if (build->parsed()) {
      const auto s = kplora::cmd_build_data(c);
      std::cout << "records: " << s.records << " instances: " << s.instances << "\n";
    } else if (train->parsed()) {
      const auto s = kplora::cmd_train_toy(c);
      std::printf("checkpoint: %s\nsteps: %ld initial_loss: %.6f final_loss: %.6f trainable_params: %zu\n",
                  s.checkpoint.c_str(), s.steps, s.initial_loss, s.final_loss, s.trainable_params);
    } else if (predict->parsed()) {
      const auto s = kplora::cmd_predict_toy(c);
      std::printf("predictions: %s\nground_truth: %s\nstrict_parse_rate: %.4f token_accuracy: %.4f\n",
                  s.predictions.c_str(), s.ground_truth.c_str(), s.strict_parse_rate(), s.token_accuracy);
    } else if (eval->parsed()) {
      print_eval(kplora::cmd_eval(c));
    } else if (ablate->parsed()) {
      std::cout << kplora::cmd_ablate_rank(c).table;
    }
  } catch (const kplora::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
