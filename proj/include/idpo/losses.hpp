// SPDX-License-Identifier: Apache-2.0
//
// Completion log-probabilities and the preference losses built on them:
// final-layer DPO, its average over tapped layers, and their weighted blend.

#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "idpo/tensor.hpp"
#include "idpo/transformer.hpp"

namespace idpo {

struct PreferencePair {
  std::vector<int> prompt;
  std::vector<int> chosen;
  std::vector<int> rejected;

  bool operator==(const PreferencePair&) const = default;
};

enum class ReferenceTap {
  same_layer,   // layer-k policy logits are compared with layer-k reference logits
  final_layer,  // every layer is compared with the reference's final logits
};

struct DpoConfig {
  double beta = 0.1;
  double gamma = 0.9;
  std::vector<int> layers;  // K, 1-based
  ReferenceTap reference_tap = ReferenceTap::same_layer;

  void validate(int n_layers) const;
  bool operator==(const DpoConfig&) const = default;
};

struct DpoLossBreakdown {
  double lambda_dpo = 0.0;
  std::map<int, double> per_layer;  // detached, k in K
  double lambda_intermediate = 0.0;
  double lambda_total = 0.0;
  double margin = 0.0;           // batch mean of beta * (dw - dl) at the final layer
  double reward_accuracy = 0.0;  // fraction of pairs with dw > dl at the final layer
  Tensor total;                  // differentiable lambda_total
};

// Rows [0, n) hold prompt+chosen, rows [n, 2n) prompt+rejected, each led by BOS.
struct PreferenceBatch {
  TokenBatch tokens;
  std::vector<std::uint8_t> completion_mask;  // [2n * T]
  std::size_t n_pairs = 0;
};

// BOS + prompt + completion.
std::vector<int> sequence_tokens(std::span<const int> prompt, std::span<const int> completion);
PreferenceBatch make_preference_batch(std::span<const PreferencePair> pairs);

// Per-row sum of log p(token_t | tokens_<t) over masked positions t, read
// from logits[t - 1]. Rows with an empty mask give 0 and raise a warning.
Tensor sequence_logprob(const Tensor& logits, const TokenBatch& batch, std::span<const std::uint8_t> completion_mask);

double dpo_loss(double delta_chosen, double delta_rejected, double beta);
// Elementwise over pairs; returns a tensor shaped like the inputs.
Tensor dpo_loss(const Tensor& delta_chosen, const Tensor& delta_rejected, double beta);

double intermediate_dpo_loss(const std::map<int, double>& per_layer, std::span<const int> layers);
Tensor intermediate_dpo_loss(const std::map<int, Tensor>& per_layer, std::span<const int> layers);

double combined_loss(double lambda_dpo, double lambda_intermediate, double gamma);
Tensor combined_loss(const Tensor& lambda_dpo, const Tensor& lambda_intermediate, double gamma);

// Reference completion log-probs per layer, indexed by pair.
struct ReferenceLogprobs {
  std::map<int, std::vector<double>> chosen;
  std::map<int, std::vector<double>> rejected;
};

// Layers required by a config on a model of depth n_layers: K plus the final
// layer plus whatever the reference convention needs.
std::set<int> policy_layers(const DpoConfig& cfg, int n_layers);
std::set<int> reference_layers(const DpoConfig& cfg, int n_layers);

ReferenceLogprobs reference_logprobs(const CausalLm& reference, const PreferenceBatch& batch,
                                     const std::set<int>& layers);

DpoLossBreakdown dpo_batch_loss(const CausalLm& policy, const ReferenceLogprobs& reference,
                                const PreferenceBatch& batch, const DpoConfig& cfg);
DpoLossBreakdown dpo_batch_loss(const CausalLm& policy, const CausalLm& reference,
                                std::span<const PreferencePair> pairs, const DpoConfig& cfg);

}  // namespace idpo
