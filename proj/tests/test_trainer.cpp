// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numbers>

#include "idpo/data.hpp"
#include "idpo/log.hpp"
#include "idpo/trainer.hpp"
#include "idpo/vocab.hpp"
#include "test_support.hpp"

using namespace idpo;
using namespace idpo::testing;

namespace {

SyntheticTask toy_task() {
  SyntheticTask task;
  task.alphabet = "abcdefgh";
  task.min_len = 3;
  task.max_len = 5;
  task.seed = 1;
  return task;
}

ModelConfig toy_model() {
  ModelConfig mc = tiny_config(2);
  mc.d_model = 32;
  mc.d_ff = 64;
  mc.max_seq_len = 16;
  return mc;
}

LoraConfig toy_lora() {
  LoraConfig lc;
  lc.rank = 8;
  return lc;
}

TrainConfig dpo_train_config(int steps) {
  TrainConfig tc;
  tc.learning_rate = 2e-3;
  tc.batch_size = 8;
  tc.steps = steps;
  tc.seed = 6;
  return tc;
}

std::vector<std::vector<double>> snapshot(const std::vector<NamedTensor>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& np : params) out.push_back(to_vector(np.tensor));
  return out;
}

// SFT model shared by the DPO tests; trained once per process.
const TransformerModel& toy_sft() {
  static const TransformerModel model = [] {
    const auto pairs = generate_pairs(toy_task(), 600);
    TrainConfig st;
    st.learning_rate = 3e-3;
    st.batch_size = 16;
    st.steps = 600;
    st.seed = 3;
    const Split split = split_by_test_count(pairs, 100, 2);
    return train_sft(init_model(toy_model(), 4), sft_sequences(split.train, 0.3, 5), st);
  }();
  return model;
}

Split toy_split() { return split_by_test_count(generate_pairs(toy_task(), 600), 100, 2); }

}  // namespace

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.learning_rate = 0.0;
  EXPECT_NO_THROW(c.validate());
  c.learning_rate = -1e-3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(AdamW, FirstStepHandExample) {
  Tensor w = Tensor::from_data({2}, {1.0, -2.0}, true);
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  AdamW opt({w}, cfg, 0.01);
  auto g = w.mutable_grad();
  g[0] = 0.5;
  g[1] = -3.0;
  opt.step();
  // Bias-corrected moments equal g and g^2, so the update is g / (|g| + eps).
  const double u0 = 0.5 / (0.5 + 1e-8), u1 = -3.0 / (3.0 + 1e-8);
  EXPECT_NEAR(w.at(0), 1.0 - 0.01 * (u0 + 0.1 * 1.0), 1e-15);
  EXPECT_NEAR(w.at(1), -2.0 - 0.01 * (u1 + 0.1 * -2.0), 1e-15);
  EXPECT_EQ(opt.step_count(), 1);
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  Tensor a = Tensor::from_data({1}, {0.0}, true), b = Tensor::from_data({1}, {0.0}, true);
  a.mutable_grad()[0] = 3.0;
  b.mutable_grad()[0] = 4.0;
  std::vector<Tensor> params{a, b};
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 1.0), 5.0);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(b.grad()[0], 0.8, 1e-15);
  EXPECT_NEAR(clip_grad_norm(params, 0.0), 1.0, 1e-15);
  EXPECT_NEAR(a.grad()[0], 0.6, 1e-15);
}

TEST(BatchSampler, EpochsCoverEveryItemAndStateRoundTrips) {
  BatchSampler s(10, 7);
  std::vector<int> seen(10, 0);
  for (int i = 0; i < 5; ++i)
    for (std::size_t j : s.next(4)) ++seen[j];
  for (int c : seen) EXPECT_EQ(c, 2);
  const auto state = s.state();
  const auto expected = s.next(7);
  BatchSampler t(10, 999);
  t.set_state(state);
  EXPECT_EQ(t.next(7), expected);
  BatchSampler wrong(11, 1);
  EXPECT_THROW(wrong.set_state(state), CheckpointError);
}

TEST(Sft, ZeroLearningRateLeavesParameters) {
  const ModelConfig mc = tiny_config(2);
  const TransformerModel init = init_model(mc, 1);
  const auto corpus = sft_sequences(generate_pairs(SyntheticTask{}, 20), 0.0, 1);
  TrainConfig tc;
  tc.learning_rate = 0.0;
  tc.steps = 5;
  const TransformerModel out = train_sft(init, corpus, tc);
  EXPECT_EQ(snapshot(out.named_parameters()), snapshot(init.named_parameters()));
}

TEST(Sft, EmptyCorpusAndBadSequences) {
  const TransformerModel m = init_model(tiny_config(2), 1);
  EXPECT_THROW(train_sft(m, {}, TrainConfig{}), std::invalid_argument);
  EXPECT_THROW(train_sft(m, {{kBosId, 70}}, TrainConfig{}), std::out_of_range);
  EXPECT_THROW(train_sft(m, {std::vector<int>(40, 5)}, TrainConfig{}), std::out_of_range);
}

TEST(Sft, DeterministicLossCurve) {
  const auto corpus = sft_sequences(generate_pairs(SyntheticTask{}, 40), 0.2, 1);
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.steps = 8;
  const auto run = [&] {
    SftTrainer t(init_model(tiny_config(2), 2), corpus, tc);
    t.run();
    std::vector<double> losses;
    for (const auto& r : t.history()) losses.push_back(r.loss);
    return losses;
  };
  const auto a = run();
  EXPECT_EQ(a.size(), 8u);
  EXPECT_EQ(a, run());
}

TEST(Sft, MemorizesFiftySequences) {
  // Fifty random 64-token rows: the irreducible first-token entropy is
  // ln(50) / 63 nats per position, below the target.
  ModelConfig mc;
  mc.n_layers = 4;
  mc.d_model = 64;
  mc.n_heads = 4;
  mc.d_ff = 128;
  mc.max_seq_len = 64;
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> tok(kFirstSymbolId, mc.vocab_size - 1);
  std::vector<std::vector<int>> corpus(50);
  for (auto& s : corpus) {
    s.push_back(kBosId);
    while (s.size() < 64) s.push_back(tok(rng));
  }
  TrainConfig tc;
  tc.learning_rate = 3e-3;
  tc.batch_size = 16;
  tc.steps = 2000;
  tc.seed = 1;
  SftTrainer t(init_model(mc, 1), corpus, tc);
  const TokenBatch full = TokenBatch::from_rows(corpus, kPadId);
  double loss = INFINITY;
  while (t.steps_done() < 2000) {
    t.step();
    if (t.steps_done() % 100 == 0) {
      NoGradGuard guard;
      loss = next_token_loss(t.model(), full).item();
      if (loss < 0.1) break;
    }
  }
  EXPECT_LT(loss, 0.1) << "after " << t.steps_done() << " steps";
}

TEST(Sft, ResumeIsBitwise) {
  const auto corpus = sft_sequences(generate_pairs(SyntheticTask{}, 40), 0.2, 1);
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.steps = 6;
  const auto dir = temp_dir("sft_resume");
  SftTrainer full(init_model(tiny_config(2), 3), corpus, tc);
  for (int i = 0; i < 3; ++i) full.step();
  full.save_checkpoint(dir / "s3.ckpt");
  for (int i = 0; i < 3; ++i) full.step();

  SftTrainer resumed(init_model(tiny_config(2), 3), corpus, tc);
  resumed.load_checkpoint(dir / "s3.ckpt");
  EXPECT_EQ(resumed.steps_done(), 3);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(resumed.step().loss, full.history()[3 + i].loss);
  EXPECT_EQ(snapshot(resumed.model().named_parameters()), snapshot(full.model().named_parameters()));
}

TEST(Dpo, StepZeroIsLn2) {
  const Split split = toy_split();
  DpoConfig d;
  d.layers = {1};
  DpoTrainer t(toy_sft(), split.train, d, toy_lora(), dpo_train_config(1));
  const DpoStepRecord r = t.step();
  EXPECT_EQ(r.step, 0);
  EXPECT_NEAR(r.losses.lambda_dpo, std::numbers::ln2, 1e-9);
  EXPECT_NEAR(r.losses.lambda_intermediate, std::numbers::ln2, 1e-9);
  EXPECT_NEAR(r.losses.lambda_total, std::numbers::ln2, 1e-9);
  EXPECT_GT(r.grad_norm, 0.0);
}

TEST(Dpo, ZeroLearningRateLeavesAdapters) {
  const Split split = toy_split();
  DpoConfig d;
  d.layers = {1};
  TrainConfig tc = dpo_train_config(4);
  tc.learning_rate = 0.0;
  DpoTrainer t(toy_sft(), split.train, d, toy_lora(), tc);
  const auto before = snapshot(t.policy().trainable_parameters());
  t.run();
  EXPECT_EQ(snapshot(t.policy().trainable_parameters()), before);
  for (const auto& r : t.history()) EXPECT_NEAR(r.losses.lambda_total, std::numbers::ln2, 1e-9);
}

TEST(Dpo, OnlyAdaptersTrainAndReferenceIsImmutable) {
  const Split split = toy_split();
  DpoConfig d;
  d.layers = {1};
  DpoTrainer t(toy_sft(), split.train, d, toy_lora(), dpo_train_config(5));
  const std::uint64_t ref_hash = model_fingerprint(t.reference());
  const std::uint64_t base_hash = model_fingerprint(t.policy().base());
  EXPECT_EQ(ref_hash, model_fingerprint(toy_sft()));
  const auto adapters = snapshot(t.policy().trainable_parameters());

  DpoLossBreakdown probe = dpo_batch_loss(t.policy(), t.reference(), std::span(split.train).subspan(0, 4), d);
  backward(probe.total);
  for (const auto& np : t.policy().base().named_parameters()) EXPECT_FALSE(np.tensor.has_grad()) << np.name;
  for (const auto& np : t.reference().named_parameters()) EXPECT_FALSE(np.tensor.has_grad()) << np.name;
  Tape::active().reset();
  for (auto& np : t.policy().trainable_parameters()) Tensor(np.tensor).clear_grad();

  t.run();
  EXPECT_EQ(model_fingerprint(t.reference()), ref_hash);
  EXPECT_EQ(model_fingerprint(t.policy().base()), base_hash);
  EXPECT_NE(snapshot(t.policy().trainable_parameters()), adapters);
}

TEST(Dpo, GammaOneMatchesVanillaLog) {
  const Split split = toy_split();
  DpoConfig vanilla;
  vanilla.gamma = 1.0;
  DpoConfig tapped = vanilla;
  tapped.layers = {1};
  DpoTrainer a(toy_sft(), split.train, vanilla, toy_lora(), dpo_train_config(6));
  DpoTrainer b(toy_sft(), split.train, tapped, toy_lora(), dpo_train_config(6));
  a.run();
  b.run();
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(a.history()[i].losses.lambda_total, b.history()[i].losses.lambda_total, 1e-12) << i;
    EXPECT_NEAR(a.history()[i].losses.lambda_dpo, b.history()[i].losses.lambda_dpo, 1e-12) << i;
  }
}

TEST(Dpo, FinalLayerIntermediateEqualsDpo) {
  const Split split = toy_split();
  DpoConfig d;
  d.layers = {2};
  DpoTrainer t(toy_sft(), split.train, d, toy_lora(), dpo_train_config(6));
  t.run();
  for (const auto& r : t.history()) EXPECT_NEAR(r.losses.lambda_intermediate, r.losses.lambda_dpo, 1e-12);
}

TEST(Dpo, ScaledPaperLayersOnDeskDepthRunFinite) {
  ModelConfig mc = toy_model();
  mc.n_layers = 8;
  const auto pairs = generate_pairs(toy_task(), 40);
  DpoConfig d;
  d.layers = {static_cast<int>(std::lround(11.0 * 8 / 32)), static_cast<int>(std::lround(22.0 * 8 / 32))};
  EXPECT_EQ(d.layers, (std::vector<int>{3, 6}));
  DpoTrainer t(init_model(mc, 1), pairs, d, toy_lora(), dpo_train_config(3));
  t.run();
  for (const auto& r : t.history()) {
    EXPECT_TRUE(std::isfinite(r.losses.lambda_total));
    EXPECT_EQ(r.losses.per_layer.size(), 2u);
  }
}

TEST(Dpo, RejectsBadLayersAndSkipsLongPairs) {
  const Split split = toy_split();
  DpoConfig d;
  d.layers = {3};
  EXPECT_THROW(DpoTrainer(toy_sft(), split.train, d, toy_lora(), dpo_train_config(1)), std::out_of_range);
  d.layers = {1};
  std::vector<PreferencePair> data(split.train.begin(), split.train.begin() + 10);
  data.push_back({std::vector<int>(20, 5), {5, kEosId}, {6, kEosId}});
  const std::size_t warnings = logging::warning_count();
  DpoTrainer t(toy_sft(), data, d, toy_lora(), dpo_train_config(1));
  EXPECT_EQ(t.skipped_pairs(), 1u);
  EXPECT_GT(logging::warning_count(), warnings);
  std::vector<PreferencePair> only_long{data.back()};
  EXPECT_THROW(DpoTrainer(toy_sft(), only_long, d, toy_lora(), dpo_train_config(1)), std::invalid_argument);
}

TEST(Dpo, ResumeIsBitwiseAndLogged) {
  const Split split = toy_split();
  DpoConfig d;
  d.layers = {1};
  const auto dir = temp_dir("dpo_resume");
  DpoTrainer full(toy_sft(), split.train, d, toy_lora(), dpo_train_config(8));
  full.set_log_path(dir / "full.jsonl");
  for (int i = 0; i < 4; ++i) full.step();
  full.save_checkpoint(dir / "d4.ckpt");
  for (int i = 0; i < 4; ++i) full.step();

  DpoTrainer resumed(toy_sft(), split.train, d, toy_lora(), dpo_train_config(8));
  resumed.load_checkpoint(dir / "d4.ckpt");
  EXPECT_EQ(resumed.steps_done(), 4);
  for (int i = 0; i < 4; ++i) {
    const DpoStepRecord r = resumed.step();
    EXPECT_EQ(r.losses.lambda_total, full.history()[4 + i].losses.lambda_total);
    EXPECT_EQ(r.grad_norm, full.history()[4 + i].grad_norm);
  }
  EXPECT_EQ(snapshot(resumed.policy().trainable_parameters()), snapshot(full.policy().trainable_parameters()));

  std::ifstream log(dir / "full.jsonl");
  std::string line;
  std::size_t n = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("step").get<std::int64_t>(), static_cast<std::int64_t>(n));
    EXPECT_TRUE(j.contains("lambda_total") && j.contains("lambda_dpo") && j.contains("lambda_intermediate"));
    ++n;
  }
  EXPECT_EQ(n, 8u);

  DpoConfig other = d;
  other.beta = 0.2;
  DpoTrainer mismatched(toy_sft(), split.train, other, toy_lora(), dpo_train_config(8));
  EXPECT_THROW(mismatched.load_checkpoint(dir / "d4.ckpt"), CheckpointError);
}

TEST(Dpo, LossTrendOverFirstTwoHundredSteps) {
  const Split split = toy_split();
  DpoConfig d;
  d.layers = {1};
  d.beta = 0.5;
  TrainConfig tc = dpo_train_config(200);
  tc.batch_size = 32;
  DpoTrainer t(toy_sft(), split.train, d, toy_lora(), tc);
  t.run();
  const auto moving = [&](std::size_t end) {
    double a = 0.0;
    for (std::size_t i = end - 50; i < end; ++i) a += t.history()[i].losses.lambda_total;
    return a / 50.0;
  };
  EXPECT_LE(moving(200), 0.9 * moving(50));
  NoGradGuard guard;
  DpoConfig vanilla;
  vanilla.gamma = 1.0;
  vanilla.beta = d.beta;
  EXPECT_GT(dpo_batch_loss(t.policy(), t.reference(), split.test, vanilla).margin, 0.0);
}
