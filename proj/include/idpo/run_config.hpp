// SPDX-License-Identifier: Apache-2.0
//
// One versioned document holding every experiment setting, plus the shared
// pipeline steps (dataset, SFT model) the commands build from it.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "idpo/data.hpp"
#include "idpo/eval.hpp"
#include "idpo/losses.hpp"
#include "idpo/lora.hpp"
#include "idpo/trainer.hpp"
#include "idpo/transformer.hpp"

namespace idpo {

inline constexpr int kRunConfigVersion = 1;

struct RunConfig {
  int version = kRunConfigVersion;
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  ModelConfig model;
  LoraConfig lora;
  DpoConfig dpo{.beta = 0.1, .gamma = 0.9, .layers = {2, 5}, .reference_tap = ReferenceTap::same_layer};
  TrainConfig sft_train{.learning_rate = 1e-3, .batch_size = 16, .steps = 300, .seed = 0, .adamw = {}};
  TrainConfig dpo_train{.learning_rate = 5e-4, .batch_size = 8, .steps = 1000, .seed = 0, .adamw = {}};
  SamplerConfig sampler;
  SyntheticTask task;

  std::size_t n_pairs = 2400;
  std::size_t test_size = 240;
  // Share of SFT sequences that use the rejected completion.
  double sft_rejected_fraction = 0.3;
  std::size_t profile_pairs = kDefaultProfilePairs;
  bool sweep_vs_vanilla = false;

  void validate() const;
  // Copies the master seed into every component seed.
  void derive_seeds();
  bool operator==(const RunConfig&) const = default;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& config);

// Seeded generation plus the held-out split.
Split build_dataset(const RunConfig& config);
TransformerModel initial_model(const RunConfig& config);
// Random init followed by supervised training on the training pairs.
TransformerModel build_sft(const RunConfig& config, std::span<const PreferencePair> train);

std::vector<std::vector<int>> prompts_of(std::span<const PreferencePair> pairs);

struct GradcheckReport {
  double lambda_dpo = 0.0;
  double lambda_intermediate = 0.0;  // only when the layer set is nonempty
  double lambda_total = 0.0;
  std::size_t coordinates = 0;       // per component
};

// Finite-difference check of every loss component with respect to the LoRA
// factors, on a freshly initialized model with randomized adapters (so no
// factor sits at its zero-gradient start) and a few generated pairs.
GradcheckReport run_gradcheck(const RunConfig& config, double h, std::size_t max_coords_per_tensor,
                              std::size_t n_pairs = 2);

}  // namespace idpo
