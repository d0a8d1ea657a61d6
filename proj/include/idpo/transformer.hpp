// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer (pre-norm, RMS-norm, rotary attention, SiLU-gated
// feed-forward) that can read logits off any block through one shared
// unembedding head.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "idpo/tensor.hpp"

namespace idpo {

struct ModelConfig {
  int n_layers = 8;
  int d_model = 128;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 64;
  int max_seq_len = 32;
  bool tie_unembedding = true;
  // Intermediate hidden states go through the final RMS-norm before the
  // shared head (logit-lens convention).
  bool apply_final_norm_to_taps = true;
  double rope_theta = 10000.0;
  double norm_eps = 1e-6;

  void validate() const;
  int head_dim() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

enum class Projection { q_proj, k_proj, v_proj, o_proj, gate_proj, up_proj, down_proj };

inline constexpr std::array<Projection, 7> kAllProjections = {
    Projection::q_proj,    Projection::k_proj,  Projection::v_proj,   Projection::o_proj,
    Projection::gate_proj, Projection::up_proj, Projection::down_proj};

std::string_view projection_name(Projection p);
// Throws std::invalid_argument on names outside the projection vocabulary.
Projection parse_projection(std::string_view name);

// Right-padded token rows. key_valid marks real tokens (1) versus padding (0).
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<int> tokens;
  std::vector<std::uint8_t> key_valid;

  static TokenBatch from_rows(const std::vector<std::vector<int>>& rows, int pad_id);
  int at(std::size_t b, std::size_t t) const { return tokens[b * seq_len + t]; }
};

struct TapOutput {
  Tensor final_logits;                 // [B, T, V]
  std::vector<Tensor> hidden_states;   // one [B, T, d_model] per block, post-residual
  std::map<int, Tensor> tapped_logits; // 1-based layer -> [B, T, V]
};

// Hook that lets an adapter rewrite a projection's output.
class ProjectionAdapter {
 public:
  virtual ~ProjectionAdapter() = default;
  virtual Tensor adapt(int layer, Projection p, const Tensor& input, Tensor base_output) const = 0;
};

// Anything that can be run as a causal language model with layer taps.
class CausalLm {
 public:
  virtual ~CausalLm() = default;
  virtual const ModelConfig& config() const = 0;
  virtual TapOutput forward_with_taps(const TokenBatch& batch, const std::set<int>& taps) const = 0;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class TransformerModel : public CausalLm {
 public:
  struct Block {
    Tensor attn_norm;
    Tensor q_proj, k_proj, v_proj, o_proj;
    Tensor ffn_norm;
    Tensor gate_proj, up_proj, down_proj;

    Tensor& projection(Projection p);
    const Tensor& projection(Projection p) const;
  };

  // Zero-valued weights (norm gains at 1); see init_model for random init.
  explicit TransformerModel(ModelConfig config);

  TransformerModel(TransformerModel&&) noexcept = default;
  TransformerModel& operator=(TransformerModel&&) noexcept = default;
  TransformerModel(const TransformerModel&) = delete;
  TransformerModel& operator=(const TransformerModel&) = delete;

  const ModelConfig& config() const override { return config_; }
  TapOutput forward_with_taps(const TokenBatch& batch, const std::set<int>& taps) const override;
  TapOutput forward_with_taps(const TokenBatch& batch, const std::set<int>& taps,
                              const ProjectionAdapter* adapter) const;

  // Stable order: embedding, blocks in depth order, final norm, head (untied only).
  std::vector<NamedTensor> named_parameters() const;
  Tensor parameter(std::string_view name) const;

  Block& block(int layer) { return blocks_.at(static_cast<std::size_t>(layer - 1)); }
  const Block& block(int layer) const { return blocks_.at(static_cast<std::size_t>(layer - 1)); }
  const Tensor& embedding() const { return embed_; }
  const Tensor& final_norm() const { return final_norm_; }
  // The single matrix that maps hidden vectors to logits at every layer.
  const Tensor& unembedding() const { return config_.tie_unembedding ? embed_ : lm_head_; }

  void set_requires_grad(bool value);
  // Deep copy of all weights; requires_grad flags are preserved.
  TransformerModel clone() const;

 private:
  ModelConfig config_;
  Tensor embed_;
  std::vector<Block> blocks_;
  Tensor final_norm_;
  Tensor lm_head_;
};

TransformerModel init_model(const ModelConfig& config, std::uint64_t seed);
// Deep copy with requires_grad = false on every tensor.
TransformerModel clone_frozen(const TransformerModel& model);

// Logit-lens readout of one hidden state through the model's shared head.
Tensor project_to_logits(const TransformerModel& model, const Tensor& hidden);

void save_model(const std::filesystem::path& path, const TransformerModel& model);
TransformerModel load_model(const std::filesystem::path& path);
// Throws CheckpointError when the stored config differs from `expected`.
TransformerModel load_model(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace idpo
