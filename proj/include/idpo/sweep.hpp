// SPDX-License-Identifier: Apache-2.0
//
// Trains one intermediate-preference model per candidate layer set from a
// shared SFT model and compares each against SFT (and optionally against a
// final-layer-only run).

#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "idpo/data.hpp"
#include "idpo/eval.hpp"
#include "idpo/losses.hpp"
#include "idpo/lora.hpp"
#include "idpo/trainer.hpp"

namespace idpo {

struct SweepSettings {
  DpoConfig dpo;  // layers are replaced per row
  LoraConfig lora;
  TrainConfig train;
  SamplerConfig sampler;
  SyntheticTask task;
  bool compare_with_vanilla = false;
};

struct SweepRow {
  std::string exp_id;
  std::vector<int> layers;
  MatchReport vs_sft;
  std::optional<MatchReport> vs_vanilla;
};

struct SweepTable {
  std::vector<SweepRow> rows;
};

// "2;5;2,5" -> {{2}, {5}, {2, 5}}.
std::vector<std::vector<int>> parse_k_sets(std::string_view text);

SweepTable layer_sweep(const TransformerModel& sft, std::span<const PreferencePair> train_pairs,
                       std::span<const std::vector<int>> eval_prompts,
                       std::span<const std::vector<int>> candidate_layer_sets, const SweepSettings& settings);

nlohmann::json sweep_json(const SweepTable& table);
// Fixed-width "Exp ID | K | Win rate | Lose rate | Tie" table in percent.
std::string sweep_text(const SweepTable& table);
std::string sweep_csv(const SweepTable& table);

}  // namespace idpo
