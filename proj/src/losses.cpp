// SPDX-License-Identifier: Apache-2.0

#include "idpo/losses.hpp"

#include <cmath>
#include <fmt/format.h>
#include <stdexcept>

#include "idpo/log.hpp"
#include "idpo/vocab.hpp"

namespace idpo {

void DpoConfig::validate(int n_layers) const {
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw std::invalid_argument(fmt::format("DpoConfig.beta {} < 0", beta));
  if (!(gamma >= 0.0 && gamma <= 1.0)) {
    throw std::invalid_argument(fmt::format("DpoConfig.gamma {} outside [0, 1]", gamma));
  }
  if (layers.empty() && gamma < 1.0) {
    throw std::invalid_argument("DpoConfig: intermediate layer set K is empty but gamma < 1");
  }
  std::set<int> seen;
  for (int k : layers) {
    if (k < 1 || k > n_layers) throw std::out_of_range(fmt::format("DpoConfig: layer {} outside 1..{}", k, n_layers));
    if (!seen.insert(k).second) throw std::invalid_argument(fmt::format("DpoConfig: duplicate layer {}", k));
  }
}

std::vector<int> sequence_tokens(std::span<const int> prompt, std::span<const int> completion) {
  std::vector<int> out;
  out.reserve(1 + prompt.size() + completion.size());
  out.push_back(kBosId);
  out.insert(out.end(), prompt.begin(), prompt.end());
  out.insert(out.end(), completion.begin(), completion.end());
  return out;
}

PreferenceBatch make_preference_batch(std::span<const PreferencePair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("preference batch is empty");
  std::vector<std::vector<int>> rows;
  rows.reserve(2 * pairs.size());
  for (const auto& p : pairs) {
    if (p.chosen.empty() || p.rejected.empty()) throw std::invalid_argument("preference pair with empty completion");
    rows.push_back(sequence_tokens(p.prompt, p.chosen));
  }
  for (const auto& p : pairs) rows.push_back(sequence_tokens(p.prompt, p.rejected));

  PreferenceBatch out;
  out.n_pairs = pairs.size();
  out.tokens = TokenBatch::from_rows(rows, kPadId);
  out.completion_mask.assign(out.tokens.tokens.size(), 0);
  const std::size_t T = out.tokens.seq_len;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const PreferencePair& p = pairs[r % pairs.size()];
    const std::size_t completion = r < pairs.size() ? p.chosen.size() : p.rejected.size();
    const std::size_t start = 1 + p.prompt.size();
    for (std::size_t t = start; t < start + completion; ++t) out.completion_mask[r * T + t] = 1;
  }
  return out;
}

Tensor sequence_logprob(const Tensor& logits, const TokenBatch& batch, std::span<const std::uint8_t> completion_mask) {
  const std::size_t B = batch.batch, T = batch.seq_len;
  if (logits.rank() != 3 || logits.dim(0) != B || logits.dim(1) != T) {
    throw DimensionError(fmt::format("sequence_logprob: logits {} do not match token batch [{},{}]",
                                     shape_to_string(logits.shape()), B, T));
  }
  if (completion_mask.size() != B * T) throw DimensionError("sequence_logprob: mask size does not match [B,T]");
  const std::size_t V = logits.dim(2);

  std::vector<std::size_t> indices, segments;
  for (std::size_t b = 0; b < B; ++b) {
    if (completion_mask[b * T]) {
      throw std::invalid_argument(
          fmt::format("sequence_logprob: row {} masks position 0, which has no preceding context", b));
    }
    bool any = false;
    for (std::size_t t = 1; t < T; ++t) {
      if (!completion_mask[b * T + t]) continue;
      const int target = batch.at(b, t);
      if (target < 0 || static_cast<std::size_t>(target) >= V) {
        throw std::out_of_range(fmt::format("sequence_logprob: target id {} outside vocabulary of {}", target, V));
      }
      indices.push_back(((b * T) + t - 1) * V + static_cast<std::size_t>(target));
      segments.push_back(b);
      any = true;
    }
    if (!any) logging::warn(fmt::format("sequence_logprob: row {} has an empty completion mask; log-prob is 0", b));
  }
  if (indices.empty()) return Tensor::zeros({B});
  return segment_sum(gather(log_softmax(logits), indices), segments, B);
}

double dpo_loss(double delta_chosen, double delta_rejected, double beta) {
  const double x = beta * (delta_chosen - delta_rejected);
  // -log(sigmoid(x)) = softplus(-x)
  return std::max(-x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

Tensor dpo_loss(const Tensor& delta_chosen, const Tensor& delta_rejected, double beta) {
  return neg(log_sigmoid(scale(sub(delta_chosen, delta_rejected), beta)));
}

double intermediate_dpo_loss(const std::map<int, double>& per_layer, std::span<const int> layers) {
  if (layers.empty()) throw std::invalid_argument("intermediate_dpo_loss: empty layer set");
  double total = 0.0;
  for (int k : layers) {
    const auto it = per_layer.find(k);
    if (it == per_layer.end()) throw std::invalid_argument(fmt::format("intermediate_dpo_loss: no loss for layer {}", k));
    total += it->second;
  }
  return total / static_cast<double>(layers.size());
}

Tensor intermediate_dpo_loss(const std::map<int, Tensor>& per_layer, std::span<const int> layers) {
  if (layers.empty()) throw std::invalid_argument("intermediate_dpo_loss: empty layer set");
  Tensor total;
  for (int k : layers) {
    const auto it = per_layer.find(k);
    if (it == per_layer.end()) throw std::invalid_argument(fmt::format("intermediate_dpo_loss: no loss for layer {}", k));
    total = total.defined() ? add(total, it->second) : it->second;
  }
  return scale(total, 1.0 / static_cast<double>(layers.size()));
}

namespace {
void check_gamma(double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument(fmt::format("gamma {} outside [0, 1]", gamma));
}
}  // namespace

double combined_loss(double lambda_dpo, double lambda_intermediate, double gamma) {
  check_gamma(gamma);
  return gamma * lambda_dpo + (1.0 - gamma) * lambda_intermediate;
}

Tensor combined_loss(const Tensor& lambda_dpo, const Tensor& lambda_intermediate, double gamma) {
  check_gamma(gamma);
  return add(scale(lambda_dpo, gamma), scale(lambda_intermediate, 1.0 - gamma));
}

std::set<int> policy_layers(const DpoConfig& cfg, int n_layers) {
  std::set<int> out(cfg.layers.begin(), cfg.layers.end());
  out.insert(n_layers);
  return out;
}

std::set<int> reference_layers(const DpoConfig& cfg, int n_layers) {
  if (cfg.reference_tap == ReferenceTap::final_layer) return {n_layers};
  return policy_layers(cfg, n_layers);
}

ReferenceLogprobs reference_logprobs(const CausalLm& reference, const PreferenceBatch& batch,
                                     const std::set<int>& layers) {
  NoGradGuard no_grad;
  const TapOutput out = reference.forward_with_taps(batch.tokens, layers);
  ReferenceLogprobs ref;
  const std::size_t n = batch.n_pairs;
  for (int k : layers) {
    const Tensor lp = sequence_logprob(out.tapped_logits.at(k), batch.tokens, batch.completion_mask);
    const auto v = lp.data();
    ref.chosen[k].assign(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n));
    ref.rejected[k].assign(v.begin() + static_cast<std::ptrdiff_t>(n), v.end());
  }
  return ref;
}

DpoLossBreakdown dpo_batch_loss(const CausalLm& policy, const ReferenceLogprobs& reference,
                                const PreferenceBatch& batch, const DpoConfig& cfg) {
  const int n_layers = policy.config().n_layers;
  cfg.validate(n_layers);
  const std::size_t n = batch.n_pairs;
  const std::set<int> layers = policy_layers(cfg, n_layers);
  const TapOutput out = policy.forward_with_taps(batch.tokens, layers);

  DpoLossBreakdown result;
  std::map<int, Tensor> losses;
  for (int k : layers) {
    const int ref_layer = cfg.reference_tap == ReferenceTap::same_layer ? k : n_layers;
    const auto& ref_w = reference.chosen.at(ref_layer);
    const auto& ref_l = reference.rejected.at(ref_layer);
    if (ref_w.size() != n || ref_l.size() != n) throw DimensionError("dpo_batch_loss: reference size mismatch");

    const Tensor lp = sequence_logprob(out.tapped_logits.at(k), batch.tokens, batch.completion_mask);
    const Tensor delta_w = sub(slice(lp, 0, n), Tensor::from_data({n}, ref_w));
    const Tensor delta_l = sub(slice(lp, n, 2 * n), Tensor::from_data({n}, ref_l));
    losses[k] = mean(dpo_loss(delta_w, delta_l, cfg.beta));

    if (k == n_layers) {
      double margin = 0.0, correct = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double dw = delta_w.at(i), dl = delta_l.at(i);
        margin += cfg.beta * (dw - dl);
        correct += dw > dl ? 1.0 : 0.0;
      }
      result.margin = margin / static_cast<double>(n);
      result.reward_accuracy = correct / static_cast<double>(n);
    }
  }

  const Tensor& lambda_dpo = losses.at(n_layers);
  const Tensor lambda_int = cfg.layers.empty() ? lambda_dpo : intermediate_dpo_loss(losses, cfg.layers);
  result.total = combined_loss(lambda_dpo, lambda_int, cfg.gamma);
  result.lambda_dpo = lambda_dpo.item();
  result.lambda_intermediate = lambda_int.item();
  result.lambda_total = result.total.item();
  for (int k : cfg.layers) result.per_layer[k] = losses.at(k).item();
  return result;
}

DpoLossBreakdown dpo_batch_loss(const CausalLm& policy, const CausalLm& reference,
                                std::span<const PreferencePair> pairs, const DpoConfig& cfg) {
  const PreferenceBatch batch = make_preference_batch(pairs);
  const ReferenceLogprobs ref = reference_logprobs(reference, batch, reference_layers(cfg, policy.config().n_layers));
  return dpo_batch_loss(policy, ref, batch, cfg);
}

}  // namespace idpo
