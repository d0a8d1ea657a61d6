// SPDX-License-Identifier: Apache-2.0
//
// Sampling, rule-based judging, head-to-head match reports and the
// per-layer preference likelihood profile.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "idpo/data.hpp"
#include "idpo/losses.hpp"
#include "idpo/transformer.hpp"

namespace idpo {

struct SamplerConfig {
  double temperature = 0.3;
  double repetition_penalty = 1.1;
  int max_new_tokens = 16;
  std::uint64_t seed = 0;
  // Penalize tokens of the prompt as well as generated ones.
  bool penalize_prompt = true;

  void validate() const;
  bool operator==(const SamplerConfig&) const = default;
};

// Below this temperature sampling degenerates to argmax.
inline constexpr double kGreedyTemperature = 1e-6;

// For every distinct token in `seen`: positive logits are divided by the
// penalty, negative ones multiplied.
void apply_repetition_penalty(std::span<double> logits, std::span<const int> seen, double penalty);

// Next-token probabilities after penalty and temperature for the given
// context and already generated tokens. Greedy temperatures give a one-hot.
std::vector<double> next_token_distribution(const CausalLm& model, std::span<const int> context,
                                            std::span<const int> generated, const SamplerConfig& cfg);

// Autoregressive sampling from `context` (BOS + prompt). Returns only the new
// tokens; stops after EOS, max_new_tokens, or the model's max_seq_len.
std::vector<int> sample(const CausalLm& model, std::span<const int> context, const SamplerConfig& cfg);

enum class Verdict { pass, fail };

Verdict judge(const SyntheticTask& task, std::span<const int> prompt, std::span<const int> completion);
// Token edit distance to the rule answer; lower is better.
std::size_t task_score(const SyntheticTask& task, std::span<const int> prompt, std::span<const int> completion);
std::size_t edit_distance(std::span<const int> a, std::span<const int> b);

enum class Outcome { win, loss, tie };
std::string_view outcome_name(Outcome o);

struct PromptVerdict {
  std::vector<int> prompt;
  std::vector<int> completion_a;
  std::vector<int> completion_b;
  Verdict verdict_a = Verdict::fail;
  Verdict verdict_b = Verdict::fail;
  std::size_t score_a = 0;
  std::size_t score_b = 0;
  Outcome outcome = Outcome::tie;  // from model A's side
};

struct MatchReport {
  std::string model_a;
  std::string model_b;
  std::size_t n_prompts = 0;
  std::size_t wins = 0;
  std::size_t losses = 0;
  std::size_t ties = 0;
  std::vector<PromptVerdict> per_prompt;

  static MatchReport from_counts(std::size_t wins, std::size_t losses, std::size_t ties);
  double win_rate() const;
  double lose_rate() const;
  double tie_rate() const;
  // Rates as percentages, as printed in report tables.
  double win_percent() const;
  double lose_percent() const;
  double tie_percent() const;
};

// Outcome for A given both verdicts and scores.
Outcome decide(Verdict a, std::size_t score_a, Verdict b, std::size_t score_b);

// Per prompt both models sample with the same derived seed, so a model
// played against itself ties everywhere.
MatchReport head_to_head(const CausalLm& model_a, const CausalLm& model_b,
                         std::span<const std::vector<int>> prompts, const SyntheticTask& task,
                         const SamplerConfig& cfg, std::string name_a = "a", std::string name_b = "b");

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

struct LayerLikelihoodProfile {
  std::map<int, double> values;  // layer -> mean log sigmoid(beta * (dw_k - dl_k))
  std::size_t n_pairs = 0;
  double beta = 0.0;
};

inline constexpr std::size_t kDefaultProfilePairs = 30;

LayerLikelihoodProfile layer_likelihood_profile(const CausalLm& policy, const CausalLm& reference,
                                                std::span<const PreferencePair> pairs, double beta);

nlohmann::json report_json(const MatchReport& report, const ToyTokenizer& tokenizer);
nlohmann::json profile_json(const LayerLikelihoodProfile& profile);
std::string profile_csv(const LayerLikelihoodProfile& profile);

}  // namespace idpo
