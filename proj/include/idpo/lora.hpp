// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adapters on the named block projections. The wrapped base model
// is frozen; only the A/B factors are trainable.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "idpo/transformer.hpp"

namespace idpo {

struct LoraConfig {
  std::vector<std::string> targets = {"k_proj", "q_proj", "v_proj", "o_proj", "gate_proj", "down_proj", "up_proj"};
  int rank = 16;
  double alpha = 16.0;
  double dropout = 0.05;

  double scaling() const { return alpha / static_cast<double>(rank); }
  // Checks targets against the projection vocabulary and rank against every
  // targeted matrix of `model`.
  void validate(const ModelConfig& model) const;
  bool operator==(const LoraConfig&) const = default;
};

struct LoraAdapter {
  Tensor a;  // [rank, d_in], gaussian init
  Tensor b;  // [d_out, rank], zero init
};

class AdaptedModel : public CausalLm, private ProjectionAdapter {
 public:
  // Takes ownership of `base` and freezes it.
  AdaptedModel(TransformerModel base, LoraConfig config, std::uint64_t seed);

  AdaptedModel(AdaptedModel&&) noexcept = default;
  AdaptedModel& operator=(AdaptedModel&&) noexcept = default;

  const ModelConfig& config() const override { return base_.config(); }
  TapOutput forward_with_taps(const TokenBatch& batch, const std::set<int>& taps) const override;

  // Dropout is active only in training mode.
  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  const TransformerModel& base() const { return base_; }
  const LoraConfig& lora_config() const { return config_; }
  double scaling() const { return config_.scaling(); }

  // Names are "layers.<l>.<projection>.lora_A" / ".lora_B".
  std::vector<NamedTensor> trainable_parameters() const;
  const LoraAdapter* adapter(int layer, Projection p) const;
  LoraAdapter* adapter(int layer, Projection p);

  std::string dropout_rng_state() const;
  void set_dropout_rng_state(const std::string& state);

 private:
  Tensor adapt(int layer, Projection p, const Tensor& input, Tensor base_output) const override;

  TransformerModel base_;
  LoraConfig config_;
  std::map<std::pair<int, Projection>, LoraAdapter> adapters_;
  bool training_ = false;
  mutable std::mt19937_64 dropout_rng_;
};

AdaptedModel attach(const TransformerModel& model, const LoraConfig& config, std::uint64_t seed);

// W' = W + scaling * B * A for every adapted projection.
TransformerModel merge(const AdaptedModel& adapted);

// Adapter-only checkpoint; loading requires a base with the same ModelConfig.
void save_adapter(const std::filesystem::path& path, const AdaptedModel& adapted);
AdaptedModel load_adapter(const std::filesystem::path& path, const TransformerModel& base);

}  // namespace idpo
