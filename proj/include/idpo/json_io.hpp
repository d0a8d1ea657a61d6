// SPDX-License-Identifier: Apache-2.0
//
// JSON bindings for every configuration struct. Missing keys keep their
// defaults.

#pragma once

#include <json.hpp>

#include "idpo/data.hpp"
#include "idpo/eval.hpp"
#include "idpo/losses.hpp"
#include "idpo/lora.hpp"
#include "idpo/trainer.hpp"
#include "idpo/transformer.hpp"

namespace idpo {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, n_layers, d_model, n_heads, d_ff, vocab_size,
                                                max_seq_len, tie_unembedding, apply_final_norm_to_taps, rope_theta,
                                                norm_eps)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LoraConfig, targets, rank, alpha, dropout)

NLOHMANN_JSON_SERIALIZE_ENUM(ReferenceTap, {{ReferenceTap::same_layer, "same_layer"},
                                            {ReferenceTap::final_layer, "final_layer"}})

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DpoConfig, beta, gamma, layers, reference_tap)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AdamWConfig, beta1, beta2, eps, weight_decay)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, learning_rate, batch_size, steps, seed, adamw,
                                                grad_clip, checkpoint_interval)

NLOHMANN_JSON_SERIALIZE_ENUM(TaskKind, {{TaskKind::sort_copy, "sort-copy"},
                                        {TaskKind::pattern_complete, "pattern-complete"}})

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SyntheticTask, kind, alphabet, min_len, max_len, motif_min,
                                                motif_max, max_repeats, neighbor_substitution, seed,
                                                token_budget)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SamplerConfig, temperature, repetition_penalty, max_new_tokens,
                                                seed, penalize_prompt)

}  // namespace idpo
