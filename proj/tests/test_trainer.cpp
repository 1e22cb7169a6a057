#include <cmath>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "kplora/toy_task.hpp"
#include "kplora/trainer.hpp"
#include "test_support.hpp"

using namespace kplora;
using namespace kplora::testing;

namespace {

ModelConfig config(int d, int layers = 2, int heads = 2) {
  ModelConfig c;
  c.vocab_size = Vocab().size();
  c.d_model = d;
  c.n_layers = layers;
  c.n_heads = heads;
  c.max_seq_len = 256;
  return c;
}

std::vector<LmSequence> toy_batch(std::size_t n, std::uint64_t seed) {
  const Vocab v;
  std::vector<LmSequence> out;
  for (const auto& s : make_toy_task(n, seed)) out.push_back(to_lm_sequence(encode_example(s, v)));
  return out;
}

std::vector<Matrix> snapshot_values(ToyLM& m) {
  std::vector<Matrix> out;
  for (auto& p : m.parameters()) out.push_back(*p.value);
  return out;
}

}  // namespace

TEST(ClmLoss, UniformLogitsGiveLogVocab) {
  const Matrix logits(5, 16, 0.7);
  const std::vector<int> targets{0, 3, 15, 7, 9};
  EXPECT_NEAR(clm_loss(logits, targets, {1, 1, 1, 1, 1}), std::log(16.0), 1e-10);
  EXPECT_NEAR(clm_loss(logits, targets, {0, 0, 1, 0, 0}), std::log(16.0), 1e-10);
}

TEST(ClmLoss, CertainTargetsGiveZero) {
  Matrix logits(3, 4, -1000.0);
  logits(0, 2) = logits(1, 0) = logits(2, 3) = 1000.0;
  EXPECT_EQ(clm_loss(logits, {2, 0, 3}, {1, 1, 1}), 0.0);
}

TEST(ClmLoss, ThreeTokenHandOracle) {
  Matrix logits(3, 3);
  const double vals[3][3] = {{2.0, -1.0, 0.5}, {0.0, 0.3, -0.2}, {1.5, 1.5, -3.0}};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) logits(i, j) = vals[i][j];
  const std::vector<int> targets{0, 2, 1};
  double expected = 0.0;
  for (int i = 1; i < 3; ++i) {
    double z = 0.0;
    for (int j = 0; j < 3; ++j) z += std::exp(vals[i][j]);
    expected -= std::log(std::exp(vals[i][targets[i]]) / z);
  }
  expected /= 2.0;
  EXPECT_NEAR(clm_loss(logits, targets, {0, 1, 1}), expected, 1e-10);

  Matrix dlogits;
  const double sum = clm_loss_sum_and_grad(logits, targets, {0, 1, 1}, 2.0, dlogits);
  EXPECT_NEAR(sum / 2.0, expected, 1e-10);
  for (int j = 0; j < 3; ++j) EXPECT_EQ(dlogits(0, j), 0.0);
  double row = 0.0;
  for (int j = 0; j < 3; ++j) row += dlogits(1, j);
  EXPECT_NEAR(row, 0.0, 1e-15);
}

TEST(ClmLoss, EmptyMaskAndBadShapesAreContractErrors) {
  const Matrix logits(2, 4);
  EXPECT_THROW(clm_loss(logits, {1, 2}, {0, 0}), ContractError);
  EXPECT_THROW(clm_loss(logits, {1}, {1}), ContractError);
  EXPECT_THROW(clm_loss(logits, {1, 9}, {1, 1}), ContractError);
}

TEST(LmSequence, MaskCoversAnswerAndEos) {
  const Vocab v;
  const auto s = make_toy_task(1, 1)[0];
  const auto ex = encode_example(s, v);
  const auto seq = to_lm_sequence(ex);
  ASSERT_EQ(seq.targets.size(), ex.tokens.size() - 1);
  std::size_t masked = 0;
  for (std::size_t t = 0; t < seq.mask.size(); ++t) {
    if (!seq.mask[t]) continue;
    ++masked;
    EXPECT_GE(t + 1, ex.answer_start);
  }
  EXPECT_EQ(masked, ex.tokens.size() - ex.answer_start);
  EXPECT_EQ(seq.targets.back(), Vocab::kEos);
}

TEST(GradientCheck, FullModelBaseParameters) {
  ToyLM m(config(16), 21);
  Rng rng(22);
  const std::vector<LmSequence> batch{random_sequence(rng, 34, 9), random_sequence(rng, 34, 6)};
  EXPECT_LT(model_gradient_check(m, batch, TrainMode::pretrain), 1e-3);
}

TEST(GradientCheck, FullModelAdapterParameters) {
  ToyLM m(config(16), 23);
  m.attach_adapters(LoraConfig{4, 16, 0.05, kAllTargets}, 24);
  Rng rng(25);
  for (auto& p : m.parameters())
    if (p.is_adapter)
      for (auto& v : p.value->flat()) v += rng.normal(0.0, 0.2);
  const std::vector<LmSequence> batch{random_sequence(rng, 34, 9), random_sequence(rng, 34, 7)};
  EXPECT_LT(model_gradient_check(m, batch, TrainMode::finetune), 1e-3);
}

TEST(TrainStep, ModeRequirements) {
  ToyLM m(config(16), 1);
  EXPECT_THROW(make_training_state(m, TrainMode::finetune, {}, 1), ConfigError);
  EXPECT_THROW(make_training_state(m, TrainMode::pretrain, {OptimizerKind::adam, 0.0}, 1), ConfigError);
  m.attach_adapters(LoraConfig{4, 16, 0.05}, 2);
  EXPECT_THROW(make_training_state(m, TrainMode::pretrain, {}, 1), ConfigError);
}

TEST(TrainStep, FrozenModeLeavesEverythingBitIdentical) {
  ToyLM m(config(16), 2);
  const auto batch = toy_batch(2, 3);
  const auto before = snapshot_values(m);
  auto state = make_training_state(m, TrainMode::frozen, {}, 4);
  for (int i = 0; i < 5; ++i) EXPECT_TRUE(std::isfinite(train_step(m, batch, state)));
  EXPECT_EQ(snapshot_values(m), before);
  EXPECT_EQ(state.step, 5);
}

TEST(TrainStep, FinetuneLeavesBaseBitIdenticalAndMovesAdapters) {
  ToyLM m(config(16), 5);
  m.attach_adapters(LoraConfig{4, 16, 0.05}, 6);
  const auto batch = toy_batch(2, 7);
  std::vector<Matrix> base_before, adapters_before;
  for (auto& p : m.parameters()) (p.is_adapter ? adapters_before : base_before).push_back(*p.value);
  auto state = make_training_state(m, TrainMode::finetune, {}, 8);
  for (int i = 0; i < 5; ++i) train_step(m, batch, state);
  std::vector<Matrix> base_after, adapters_after;
  for (auto& p : m.parameters()) (p.is_adapter ? adapters_after : base_after).push_back(*p.value);
  EXPECT_EQ(base_after, base_before);
  EXPECT_NE(adapters_after, adapters_before);
  EXPECT_EQ(state.first_moment.size(), adapters_before.size());
}

TEST(TrainStep, SgdMatchesManualUpdate) {
  ToyLM m(config(16), 9);
  ToyLM ref = m;
  const auto batch = toy_batch(1, 10);
  auto state = make_training_state(m, TrainMode::pretrain, {OptimizerKind::sgd, 0.1}, 11);
  train_step(m, batch, state);
  batch_loss_and_grads(ref, batch, nullptr, TrainMode::pretrain);
  auto mp = m.parameters();
  auto rp = ref.parameters();
  for (std::size_t i = 0; i < mp.size(); ++i) {
    Matrix expected = *rp[i].value;
    axpy(expected, *rp[i].grad, -0.1);
    EXPECT_EQ(*mp[i].value, expected) << mp[i].name;
  }
}

TEST(TrainStep, HugeLearningRateDiverges) {
  ToyLM m(config(16), 12);
  const auto batch = toy_batch(1, 13);
  auto state = make_training_state(m, TrainMode::pretrain, {OptimizerKind::sgd, 1e300}, 14);
  try {
    for (int i = 0; i < 10; ++i) train_step(m, batch, state);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step"), std::string::npos) << msg;
    EXPECT_NE(msg.find("1e+300"), std::string::npos) << msg;
  }
}

TEST(TrainEpochs, DeterministicCurvesAndWeights) {
  const auto data = toy_batch(6, 15);
  auto run = [&] {
    ToyLM m(config(16), 16);
    m.attach_adapters(LoraConfig{4, 16, 0.05}, 17);
    auto state = make_training_state(m, TrainMode::finetune, {}, 18);
    const auto log = train_epochs(m, data, state, 2, 4, 19);
    std::vector<double> losses;
    for (const auto& e : log) losses.push_back(e.loss);
    return std::pair{losses, snapshot_values(m)};
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first.size(), 4u);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

// Overfits one example with full-parameter training, then decodes it back.
TEST(TrainEpochs, OverfitSingleExampleThenEcho) {
  const Vocab v;
  ToySample s = make_toy_task(1, 20, ToyTaskConfig{100, 100, 10, 89, ObservationTransform::identity})[0];
  const auto ex = encode_example(s, v);
  const std::vector<LmSequence> batch{to_lm_sequence(ex)};
  ToyLM m(config(32, 2, 4), 21);
  auto state = make_training_state(m, TrainMode::pretrain, {OptimizerKind::adam, 3e-3}, 23);
  double loss = train_step(m, batch, state);
  while (loss >= 0.01 && state.step < 1000) loss = train_step(m, batch, state);
  EXPECT_LT(loss, 0.01) << "after " << state.step << " steps";

  const auto out = generate(m, ex.prompt(), 200);
  EXPECT_EQ(v.detokenize(out), s.answer);
}

TEST(TrainEpochs, AdaptersAloneReduceLoss) {
  const std::vector<LmSequence> batch = toy_batch(1, 24);
  ToyLM m(config(32, 2, 4), 25);
  m.attach_adapters(LoraConfig{8, 16, 0.05, kAllTargets}, 26);
  auto state = make_training_state(m, TrainMode::finetune, {OptimizerKind::adam, 3e-3}, 27);
  const double first = train_step(m, batch, state);
  double loss = first;
  while (state.step < 200) loss = train_step(m, batch, state);
  EXPECT_LT(loss, 0.5 * first);
}

TEST(Generate, ZeroBudgetAndDeterminism) {
  const ToyLM m(config(16), 30);
  const std::vector<int> prompt{1, 20, 18, 8, 3};
  EXPECT_TRUE(generate(m, prompt, 0).empty());
  const auto a = generate(m, prompt, 40), b = generate(m, prompt, 40);
  EXPECT_EQ(a, b);
  EXPECT_LE(a.size(), 40u);
  for (int id : a) EXPECT_NE(id, Vocab::kEos);
}

TEST(Generate, StopsAtContextLimit) {
  auto c = config(16);
  c.max_seq_len = 12;
  const ToyLM m(c, 31);
  const std::vector<int> prompt(10, 5);
  const auto out = generate(m, prompt, 100, -1);
  EXPECT_EQ(out.size(), 3u);
  EXPECT_THROW(generate(m, std::vector<int>(13, 5), 1), ContractError);
}

TEST(Generate, ArgmaxTieTakesLowestIndex) {
  Matrix logits(1, 5, 0.0);
  logits(0, 1) = logits(0, 3) = 2.0;
  EXPECT_EQ(argmax_row(logits, 0), 1);
}
