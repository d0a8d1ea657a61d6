// SPDX-License-Identifier: Apache-2.0

#include "idpo/transformer.hpp"

#include <cmath>
#include <fmt/format.h>
#include <random>
#include <stdexcept>

#include "idpo/checkpoint.hpp"
#include "idpo/json_io.hpp"

namespace idpo {

void ModelConfig::validate() const {
  const auto positive = [](int v, const char* field) {
    if (v < 1) throw std::invalid_argument(fmt::format("ModelConfig.{} must be >= 1, got {}", field, v));
  };
  positive(n_layers, "n_layers");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (d_model % n_heads != 0) {
    throw std::invalid_argument(fmt::format("ModelConfig: d_model {} not divisible by n_heads {}", d_model, n_heads));
  }
  if (head_dim() % 2 != 0) {
    throw std::invalid_argument(fmt::format("ModelConfig: head dim {} must be even for rotary encoding", head_dim()));
  }
  if (!(rope_theta > 0.0) || !(norm_eps > 0.0)) {
    throw std::invalid_argument("ModelConfig: rope_theta and norm_eps must be positive");
  }
}

std::string_view projection_name(Projection p) {
  switch (p) {
    case Projection::q_proj: return "q_proj";
    case Projection::k_proj: return "k_proj";
    case Projection::v_proj: return "v_proj";
    case Projection::o_proj: return "o_proj";
    case Projection::gate_proj: return "gate_proj";
    case Projection::up_proj: return "up_proj";
    case Projection::down_proj: return "down_proj";
  }
  throw std::logic_error("unknown projection");
}

Projection parse_projection(std::string_view name) {
  for (Projection p : kAllProjections) {
    if (projection_name(p) == name) return p;
  }
  throw std::invalid_argument(fmt::format("unknown projection name '{}'", name));
}

TokenBatch TokenBatch::from_rows(const std::vector<std::vector<int>>& rows, int pad_id) {
  if (rows.empty()) throw std::invalid_argument("TokenBatch: no rows");
  TokenBatch out;
  out.batch = rows.size();
  for (const auto& r : rows) {
    if (r.empty()) throw std::invalid_argument("TokenBatch: empty row");
    out.seq_len = std::max(out.seq_len, r.size());
  }
  out.tokens.assign(out.batch * out.seq_len, pad_id);
  out.key_valid.assign(out.batch * out.seq_len, 0);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    for (std::size_t t = 0; t < rows[b].size(); ++t) {
      out.tokens[b * out.seq_len + t] = rows[b][t];
      out.key_valid[b * out.seq_len + t] = 1;
    }
  }
  return out;
}

Tensor& TransformerModel::Block::projection(Projection p) {
  switch (p) {
    case Projection::q_proj: return q_proj;
    case Projection::k_proj: return k_proj;
    case Projection::v_proj: return v_proj;
    case Projection::o_proj: return o_proj;
    case Projection::gate_proj: return gate_proj;
    case Projection::up_proj: return up_proj;
    case Projection::down_proj: return down_proj;
  }
  throw std::logic_error("unknown projection");
}

const Tensor& TransformerModel::Block::projection(Projection p) const {
  return const_cast<Block*>(this)->projection(p);
}

TransformerModel::TransformerModel(ModelConfig config) : config_(config) {
  config_.validate();
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto ff = static_cast<std::size_t>(config_.d_ff);
  const auto vocab = static_cast<std::size_t>(config_.vocab_size);
  embed_ = Tensor::zeros({vocab, d});
  for (int l = 0; l < config_.n_layers; ++l) {
    Block b;
    b.attn_norm = Tensor::full({d}, 1.0);
    b.q_proj = Tensor::zeros({d, d});
    b.k_proj = Tensor::zeros({d, d});
    b.v_proj = Tensor::zeros({d, d});
    b.o_proj = Tensor::zeros({d, d});
    b.ffn_norm = Tensor::full({d}, 1.0);
    b.gate_proj = Tensor::zeros({ff, d});
    b.up_proj = Tensor::zeros({ff, d});
    b.down_proj = Tensor::zeros({d, ff});
    blocks_.push_back(std::move(b));
  }
  final_norm_ = Tensor::full({d}, 1.0);
  if (!config_.tie_unembedding) lm_head_ = Tensor::zeros({vocab, d});
}

std::vector<NamedTensor> TransformerModel::named_parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"embed", embed_});
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    const std::string prefix = fmt::format("layers.{}.", l + 1);
    out.push_back({prefix + "attn_norm", b.attn_norm});
    for (Projection p : {Projection::q_proj, Projection::k_proj, Projection::v_proj, Projection::o_proj}) {
      out.push_back({prefix + std::string(projection_name(p)), b.projection(p)});
    }
    out.push_back({prefix + "ffn_norm", b.ffn_norm});
    for (Projection p : {Projection::gate_proj, Projection::up_proj, Projection::down_proj}) {
      out.push_back({prefix + std::string(projection_name(p)), b.projection(p)});
    }
  }
  out.push_back({"final_norm", final_norm_});
  if (!config_.tie_unembedding) out.push_back({"lm_head", lm_head_});
  return out;
}

Tensor TransformerModel::parameter(std::string_view name) const {
  for (auto& np : named_parameters()) {
    if (np.name == name) return np.tensor;
  }
  throw std::invalid_argument(fmt::format("model has no parameter '{}'", name));
}

void TransformerModel::set_requires_grad(bool value) {
  for (auto& np : named_parameters()) np.tensor.set_requires_grad(value);
}

TransformerModel TransformerModel::clone() const {
  TransformerModel copy(config_);
  auto src = named_parameters();
  auto dst = copy.named_parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto values = dst[i].tensor.mutable_data();
    std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), values.begin());
    dst[i].tensor.set_requires_grad(src[i].tensor.requires_grad());
  }
  return copy;
}

Tensor project_to_logits(const TransformerModel& model, const Tensor& hidden) {
  const Tensor normed =
      model.config().apply_final_norm_to_taps ? rms_norm(hidden, model.final_norm(), model.config().norm_eps) : hidden;
  return linear(normed, model.unembedding());
}

TapOutput TransformerModel::forward_with_taps(const TokenBatch& batch, const std::set<int>& taps) const {
  return forward_with_taps(batch, taps, nullptr);
}

TapOutput TransformerModel::forward_with_taps(const TokenBatch& batch, const std::set<int>& taps,
                                              const ProjectionAdapter* adapter) const {
  const ModelConfig& cfg = config_;
  for (int k : taps) {
    if (k < 1 || k > cfg.n_layers) {
      throw std::out_of_range(fmt::format("tap layer {} outside 1..{}", k, cfg.n_layers));
    }
  }
  if (batch.batch == 0 || batch.seq_len == 0 || batch.tokens.size() != batch.batch * batch.seq_len) {
    throw DimensionError("forward: malformed token batch");
  }
  if (batch.seq_len > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw std::out_of_range(fmt::format("sequence length {} exceeds max_seq_len {}", batch.seq_len, cfg.max_seq_len));
  }
  for (int id : batch.tokens) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw std::out_of_range(fmt::format("token id {} outside vocabulary of {}", id, cfg.vocab_size));
    }
  }

  const std::size_t B = batch.batch, T = batch.seq_len;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto H = static_cast<std::size_t>(cfg.n_heads);
  const auto dh = static_cast<std::size_t>(cfg.head_dim());
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  const auto project = [&](int layer, Projection p, const Tensor& x) {
    Tensor base = linear(x, block(layer).projection(p));
    return adapter ? adapter->adapt(layer, p, x, std::move(base)) : base;
  };

  TapOutput out;
  Tensor x = idpo::embedding(embed_, batch.tokens, {B, T});
  for (int layer = 1; layer <= cfg.n_layers; ++layer) {
    const Block& blk = block(layer);

    const Tensor h = rms_norm(x, blk.attn_norm, cfg.norm_eps);
    const Tensor q = transpose(rope(reshape(project(layer, Projection::q_proj, h), {B, T, H, dh}), cfg.rope_theta), 1, 2);
    const Tensor k = transpose(rope(reshape(project(layer, Projection::k_proj, h), {B, T, H, dh}), cfg.rope_theta), 1, 2);
    const Tensor v = transpose(reshape(project(layer, Projection::v_proj, h), {B, T, H, dh}), 1, 2);
    const Tensor scores = scale(matmul(q, transpose(k, 2, 3)), attn_scale);
    const Tensor probs = causal_softmax(scores, batch.key_valid);
    const Tensor attn = reshape(transpose(matmul(probs, v), 1, 2), {B, T, d});
    x = add(x, project(layer, Projection::o_proj, attn));

    const Tensor h2 = rms_norm(x, blk.ffn_norm, cfg.norm_eps);
    const Tensor gated =
        mul(silu(project(layer, Projection::gate_proj, h2)), project(layer, Projection::up_proj, h2));
    x = add(x, project(layer, Projection::down_proj, gated));
    out.hidden_states.push_back(x);
  }

  for (int k : taps) {
    if (k == cfg.n_layers) continue;
    out.tapped_logits[k] = project_to_logits(*this, out.hidden_states[static_cast<std::size_t>(k - 1)]);
  }
  // The last block's readout is the model output under either tap convention.
  out.final_logits = linear(rms_norm(x, final_norm_, cfg.norm_eps), unembedding());
  if (taps.contains(cfg.n_layers)) out.tapped_logits[cfg.n_layers] = out.final_logits;
  return out;
}

TransformerModel init_model(const ModelConfig& config, std::uint64_t seed) {
  TransformerModel model(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  const double residual_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
  for (auto& np : model.named_parameters()) {
    if (np.name.ends_with("norm")) continue;
    const bool residual_out = np.name.ends_with("o_proj") || np.name.ends_with("down_proj");
    for (double& v : np.tensor.mutable_data()) {
      v = normal(rng);
      if (residual_out) v *= residual_scale;
    }
  }
  return model;
}

TransformerModel clone_frozen(const TransformerModel& model) {
  TransformerModel copy = model.clone();
  copy.set_requires_grad(false);
  return copy;
}

void save_model(const std::filesystem::path& path, const TransformerModel& model) {
  Archive archive;
  archive.meta["kind"] = "model";
  archive.meta["model_config"] = model.config();
  for (const auto& np : model.named_parameters()) archive.add("model/" + np.name, np.tensor);
  write_archive(path, archive);
}

namespace {

TransformerModel model_from_archive(const Archive& archive, const std::filesystem::path& path) {
  if (!archive.meta.contains("model_config")) {
    throw CheckpointError(fmt::format("{}: no model section", path.string()));
  }
  TransformerModel model(archive.meta.at("model_config").get<ModelConfig>());
  for (auto& np : model.named_parameters()) archive.restore("model/" + np.name, np.tensor);
  return model;
}

}  // namespace

TransformerModel load_model(const std::filesystem::path& path) { return model_from_archive(read_archive(path), path); }

TransformerModel load_model(const std::filesystem::path& path, const ModelConfig& expected) {
  const Archive archive = read_archive(path);
  if (!archive.meta.contains("model_config") || archive.meta.at("model_config").get<ModelConfig>() != expected) {
    throw CheckpointError(fmt::format("{}: stored ModelConfig does not match the requested config", path.string()));
  }
  return model_from_archive(archive, path);
}

}  // namespace idpo
