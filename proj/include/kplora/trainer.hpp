#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "kplora/error.hpp"
#include "kplora/matrix.hpp"
#include "kplora/rng.hpp"
#include "kplora/toy_lm.hpp"
#include "kplora/toy_task.hpp"

namespace kplora {

// Negative mean log-likelihood of targets[t] under softmax(logits row t),
// over the positions where mask[t] is set.
inline double clm_loss(const Matrix& logits, const std::vector<int>& targets,
                       const std::vector<char>& mask) {
  require(logits.rows() == targets.size() && targets.size() == mask.size(),
          "clm_loss: logits, targets and mask lengths disagree");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (!mask[t]) continue;
    require(targets[t] >= 0 && static_cast<std::size_t>(targets[t]) < logits.cols(),
            "clm_loss: target id out of range");
    const double* row = logits.row(t);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < logits.cols(); ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < logits.cols(); ++j) z += std::exp(row[j] - mx);
    sum += mx + std::log(z) - row[targets[t]];
    ++count;
  }
  require(count > 0, "clm_loss: empty answer mask");
  return sum / static_cast<double>(count);
}

// Summed token loss over masked positions; writes (softmax - onehot) / denom
// into dlogits at those positions and zero elsewhere.
inline double clm_loss_sum_and_grad(const Matrix& logits, const std::vector<int>& targets,
                                    const std::vector<char>& mask, double denom, Matrix& dlogits) {
  dlogits = Matrix(logits.rows(), logits.cols());
  double sum = 0.0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (!mask[t]) continue;
    const double* row = logits.row(t);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < logits.cols(); ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < logits.cols(); ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    sum += lse - row[targets[t]];
    double* g = dlogits.row(t);
    for (std::size_t j = 0; j < logits.cols(); ++j) g[j] = std::exp(row[j] - lse) / denom;
    g[targets[t]] -= 1.0 / denom;
  }
  return sum;
}

// Input/target/mask triple for next-token prediction over one example: the
// model reads tokens[0..n-2] and is scored on tokens[1..n-1] from the first
// answer token onward.
struct LmSequence {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<char> mask;
};

inline LmSequence to_lm_sequence(const TokenizedExample& ex) {
  require(ex.tokens.size() >= 2 && ex.answer_start >= 1 && ex.answer_start < ex.tokens.size(),
          "to_lm_sequence: example has no answer");
  LmSequence s;
  s.inputs.assign(ex.tokens.begin(), ex.tokens.end() - 1);
  s.targets.assign(ex.tokens.begin() + 1, ex.tokens.end());
  s.mask.assign(s.targets.size(), 0);
  for (std::size_t t = ex.answer_start - 1; t < s.targets.size(); ++t) s.mask[t] = 1;
  return s;
}

enum class TrainMode {
  pretrain,  // every base tensor trains; no adapters
  finetune,  // adapters train; base tensors frozen
  frozen,    // nothing trains; steps only report the loss
};

enum class OptimizerKind { adam, sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainingState {
  TrainMode mode = TrainMode::finetune;
  OptimizerConfig optimizer;
  long step = 0;
  std::uint64_t seed = 0;
  Rng dropout_rng;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::vector<double> loss_history;
};

inline bool is_trainable(const ParamRef& p, TrainMode mode) {
  switch (mode) {
    case TrainMode::pretrain: return !p.is_adapter;
    case TrainMode::finetune: return p.is_adapter;
    case TrainMode::frozen: return false;
  }
  return false;
}

inline TrainingState make_training_state(ToyLM& model, TrainMode mode, const OptimizerConfig& opt,
                                         std::uint64_t seed) {
  if (mode == TrainMode::finetune && !model.has_adapters())
    throw ConfigError("fine-tune mode needs adapters attached");
  if (mode == TrainMode::pretrain && model.has_adapters())
    throw ConfigError("pretrain mode expects a model without adapters");
  if (!(opt.lr > 0.0)) throw ConfigError("learning rate must be positive");
  TrainingState s;
  s.mode = mode;
  s.optimizer = opt;
  s.seed = seed;
  s.dropout_rng = Rng(seed);
  for (auto& p : model.parameters()) {
    if (!is_trainable(p, mode)) continue;
    s.first_moment.emplace_back(p.value->rows(), p.value->cols());
    s.second_moment.emplace_back(p.value->rows(), p.value->cols());
  }
  return s;
}

// Mean token loss over a batch, with gradients left in the model's grad
// buffers for the parameters the mode trains.
inline double batch_loss_and_grads(ToyLM& model, const std::vector<LmSequence>& batch,
                                   Rng* dropout_rng, TrainMode mode) {
  require(!batch.empty(), "empty batch");
  std::size_t denom = 0;
  for (const auto& s : batch) denom += static_cast<std::size_t>(std::count(s.mask.begin(), s.mask.end(), 1));
  require(denom > 0, "batch has no answer tokens");
  model.zero_grad();
  double sum = 0.0;
  const bool base_grads = mode == TrainMode::pretrain;
  const bool adapter_grads = mode == TrainMode::finetune;
  for (const auto& s : batch) {
    if (mode == TrainMode::frozen) {
      const Matrix logits = model.forward(s.inputs);
      Matrix unused;
      sum += clm_loss_sum_and_grad(logits, s.targets, s.mask, static_cast<double>(denom), unused);
      continue;
    }
    ForwardCache cache;
    const Matrix logits = model.forward(s.inputs, dropout_rng, &cache);
    Matrix dlogits;
    sum += clm_loss_sum_and_grad(logits, s.targets, s.mask, static_cast<double>(denom), dlogits);
    model.backward(cache, dlogits, base_grads, adapter_grads);
  }
  return sum / static_cast<double>(denom);
}

// One optimizer step. Base tensors never change outside pretrain mode.
inline double train_step(ToyLM& model, const std::vector<LmSequence>& batch, TrainingState& state) {
  Rng* rng = (state.mode == TrainMode::finetune) ? &state.dropout_rng : nullptr;
  const double loss = batch_loss_and_grads(model, batch, rng, state.mode);
  if (!std::isfinite(loss)) throw DivergenceError(state.step, state.optimizer.lr);

  if (state.mode != TrainMode::frozen) {
    const auto& o = state.optimizer;
    const double t = static_cast<double>(state.step + 1);
    const double c1 = 1.0 - std::pow(o.beta1, t);
    const double c2 = 1.0 - std::pow(o.beta2, t);
    std::size_t slot = 0;
    for (auto& p : model.parameters()) {
      if (!is_trainable(p, state.mode)) continue;
      auto w = p.value->flat();
      auto g = p.grad->flat();
      if (o.kind == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= o.lr * g[i];
      } else {
        auto m = state.first_moment[slot].flat();
        auto v = state.second_moment[slot].flat();
        for (std::size_t i = 0; i < w.size(); ++i) {
          m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
          v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
          w[i] -= o.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + o.eps);
        }
      }
      ++slot;
    }
  }
  ++state.step;
  state.loss_history.push_back(loss);
  return loss;
}

struct LogEntry {
  long step;
  double loss;
  double lr;
};

// Runs `epochs` shuffled passes over `examples` in batches of `batch_size`.
// Shuffling draws from its own generator seeded with `shuffle_seed`.
inline std::vector<LogEntry> train_epochs(ToyLM& model, const std::vector<LmSequence>& examples,
                                          TrainingState& state, int epochs, std::size_t batch_size,
                                          std::uint64_t shuffle_seed,
                                          const std::function<void(const LogEntry&)>& on_step = {}) {
  require(batch_size > 0, "batch size must be positive");
  std::vector<LogEntry> log;
  Rng shuffler(shuffle_seed);
  std::vector<std::size_t> order(examples.size());
  for (int e = 0; e < epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffler.shuffle(order.begin(), order.end());
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
      std::vector<LmSequence> batch;
      for (std::size_t j = i; j < std::min(order.size(), i + batch_size); ++j) batch.push_back(examples[order[j]]);
      const double loss = train_step(model, batch, state);
      log.push_back({state.step, loss, state.optimizer.lr});
      if (on_step) on_step(log.back());
    }
  }
  return log;
}

inline int argmax_row(const Matrix& logits, std::size_t row) {
  const double* r = logits.row(row);
  std::size_t best = 0;
  for (std::size_t j = 1; j < logits.cols(); ++j)
    if (r[j] > r[best]) best = j;
  return static_cast<int>(best);
}

// Greedy decoding. Returns the continuation without the prompt and without
// the terminating <eos>; stops early when the context window is full.
inline std::vector<int> generate(const ToyLM& model, const std::vector<int>& prompt, std::size_t max_new,
                                 int eos = Vocab::kEos) {
  require(!prompt.empty(), "generate: empty prompt");
  require(prompt.size() <= static_cast<std::size_t>(model.config().max_seq_len),
          "generate: prompt longer than the context window");
  std::vector<int> out;
  if (max_new == 0) return out;
  auto state = model.start_decoding();
  Matrix logits;
  for (int id : prompt) logits = model.step(state, id);
  while (out.size() < max_new) {
    const int next = argmax_row(logits, 0);
    if (next == eos) break;
    out.push_back(next);
    if (state.length >= static_cast<std::size_t>(model.config().max_seq_len)) break;
    logits = model.step(state, next);
  }
  return out;
}

}  // namespace kplora
