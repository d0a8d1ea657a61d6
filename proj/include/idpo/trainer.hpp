// SPDX-License-Identifier: Apache-2.0
//
// Supervised pretraining (to manufacture the SFT starting point) and
// preference fine-tuning with LoRA against a frozen reference copy.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <map>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "idpo/checkpoint.hpp"
#include "idpo/losses.hpp"
#include "idpo/lora.hpp"
#include "idpo/transformer.hpp"

namespace idpo {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  bool operator==(const AdamWConfig&) const = default;
};

struct TrainConfig {
  double learning_rate = 5e-4;
  int batch_size = 8;
  int steps = 100;
  std::uint64_t seed = 0;
  AdamWConfig adamw;
  double grad_clip = 1.0;       // global L2 norm; <= 0 disables
  int checkpoint_interval = 0;  // steps; 0 disables periodic checkpoints

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamWConfig config, double learning_rate);

  // Decoupled weight decay, bias-corrected moments.
  void step();
  std::int64_t step_count() const { return t_; }

  void save(Archive& archive, const std::string& prefix) const;
  void restore(const Archive& archive, const std::string& prefix);

 private:
  std::vector<Tensor> params_;
  AdamWConfig config_;
  double lr_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

// Rescales grads so their global L2 norm is at most max_norm (when > 0).
// Returns the norm before clipping.
double clip_grad_norm(std::span<Tensor> params, double max_norm);

// Seeded epoch-shuffled index stream; batches may straddle epochs.
class BatchSampler {
 public:
  BatchSampler(std::size_t n_items, std::uint64_t seed);
  std::vector<std::size_t> next(std::size_t batch_size);

  nlohmann::json state() const;
  void set_state(const nlohmann::json& state);

 private:
  void reshuffle();

  std::size_t n_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::int64_t epoch_ = 0;
};

struct SftStepRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

struct DpoStepRecord {
  std::int64_t step = 0;
  DpoLossBreakdown losses;
  double grad_norm = 0.0;
};

nlohmann::json to_json_record(const SftStepRecord& r);
nlohmann::json to_json_record(const DpoStepRecord& r);

// Mean next-token cross-entropy over every real (non-pad) target position.
Tensor next_token_loss(const CausalLm& model, const TokenBatch& batch);

class SftTrainer {
 public:
  SftTrainer(TransformerModel model, std::vector<std::vector<int>> corpus, TrainConfig config);

  SftStepRecord step();
  // Runs until config.steps steps have been taken in total.
  void run();

  void set_log_path(const std::filesystem::path& path);
  void set_checkpoint_dir(const std::filesystem::path& dir) { checkpoint_dir_ = dir; }

  const TransformerModel& model() const { return model_; }
  TransformerModel release_model();
  const std::vector<SftStepRecord>& history() const { return history_; }
  std::int64_t steps_done() const { return step_; }

  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

 private:
  TransformerModel model_;
  std::vector<std::vector<int>> corpus_;
  TrainConfig config_;
  std::vector<Tensor> params_;
  AdamW optimizer_;
  BatchSampler sampler_;
  std::int64_t step_ = 0;
  std::vector<SftStepRecord> history_;
  std::unique_ptr<std::ofstream> log_;
  std::optional<std::filesystem::path> checkpoint_dir_;
};

TransformerModel train_sft(const TransformerModel& model, std::vector<std::vector<int>> corpus,
                           const TrainConfig& config);

class DpoTrainer {
 public:
  // Pairs that do not fit max_seq_len are skipped with a counted warning.
  DpoTrainer(const TransformerModel& sft, std::vector<PreferencePair> data, DpoConfig dpo_config,
             LoraConfig lora_config, TrainConfig config);

  DpoStepRecord step();
  void run();

  void set_log_path(const std::filesystem::path& path);
  void set_checkpoint_dir(const std::filesystem::path& dir) { checkpoint_dir_ = dir; }

  const AdaptedModel& policy() const { return policy_; }
  AdaptedModel& policy() { return policy_; }
  AdaptedModel release_policy();
  const TransformerModel& reference() const { return reference_; }
  const std::vector<DpoStepRecord>& history() const { return history_; }
  std::int64_t steps_done() const { return step_; }
  std::size_t skipped_pairs() const { return skipped_; }
  const DpoConfig& dpo_config() const { return dpo_config_; }

  // Base weights, adapters, optimizer moments and sampler/dropout RNG state.
  void save_checkpoint(const std::filesystem::path& path) const;
  // Restores into a trainer built from the same SFT model, data and configs.
  void load_checkpoint(const std::filesystem::path& path);

 private:
  std::size_t skipped_ = 0;
  TransformerModel reference_;
  std::vector<PreferencePair> data_;
  DpoConfig dpo_config_;
  TrainConfig config_;
  AdaptedModel policy_;
  std::vector<Tensor> params_;
  AdamW optimizer_;
  BatchSampler sampler_;
  std::set<int> reference_layers_;
  // Per pair: reference completion log-probs at each needed layer.
  std::vector<std::map<int, std::pair<double, double>>> reference_cache_;
  std::int64_t step_ = 0;
  std::vector<DpoStepRecord> history_;
  std::unique_ptr<std::ofstream> log_;
  std::optional<std::filesystem::path> checkpoint_dir_;
};

AdaptedModel train_dpo(const TransformerModel& sft, std::vector<PreferencePair> data, const DpoConfig& dpo_config,
                       const LoraConfig& lora_config, const TrainConfig& config);

// A checkpoint holding either a plain model or a base plus adapters.
std::unique_ptr<CausalLm> load_any_model(const std::filesystem::path& path);

// FNV-1a over all parameter bytes, in named_parameters() order.
std::uint64_t model_fingerprint(const TransformerModel& model);

}  // namespace idpo
