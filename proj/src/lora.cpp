// SPDX-License-Identifier: Apache-2.0

#include "idpo/lora.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <sstream>

#include "idpo/checkpoint.hpp"
#include "idpo/json_io.hpp"

namespace idpo {

namespace {

std::pair<std::size_t, std::size_t> projection_dims(const ModelConfig& m, Projection p) {
  const auto d = static_cast<std::size_t>(m.d_model), ff = static_cast<std::size_t>(m.d_ff);
  switch (p) {
    case Projection::gate_proj:
    case Projection::up_proj: return {d, ff};
    case Projection::down_proj: return {ff, d};
    default: return {d, d};
  }
}

std::string adapter_name(int layer, Projection p) { return fmt::format("layers.{}.{}", layer, projection_name(p)); }

}  // namespace

void LoraConfig::validate(const ModelConfig& model) const {
  if (rank < 1) throw std::invalid_argument(fmt::format("LoraConfig.rank must be >= 1, got {}", rank));
  if (!(alpha > 0.0)) throw std::invalid_argument("LoraConfig.alpha must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw std::invalid_argument(fmt::format("LoraConfig.dropout must lie in [0, 1), got {}", dropout));
  }
  for (const auto& name : targets) {
    const Projection p = parse_projection(name);
    const auto [in, out] = projection_dims(model, p);
    if (static_cast<std::size_t>(rank) > std::min(in, out)) {
      throw std::invalid_argument(
          fmt::format("LoRA rank {} exceeds min(d_in, d_out) = {} of {}", rank, std::min(in, out), name));
    }
  }
}

AdaptedModel::AdaptedModel(TransformerModel base, LoraConfig config, std::uint64_t seed)
    : base_(std::move(base)), config_(std::move(config)), dropout_rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
  config_.validate(base_.config());
  base_.set_requires_grad(false);
  std::mt19937_64 init_rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(config_.rank)));
  const auto r = static_cast<std::size_t>(config_.rank);
  for (int layer = 1; layer <= base_.config().n_layers; ++layer) {
    for (Projection p : kAllProjections) {
      if (std::find(config_.targets.begin(), config_.targets.end(), projection_name(p)) == config_.targets.end()) {
        continue;
      }
      const auto [in, out] = projection_dims(base_.config(), p);
      LoraAdapter ad;
      ad.a = Tensor::zeros({r, in}, true);
      for (double& v : ad.a.mutable_data()) v = normal(init_rng);
      ad.b = Tensor::zeros({out, r}, true);
      adapters_.emplace(std::make_pair(layer, p), std::move(ad));
    }
  }
}

TapOutput AdaptedModel::forward_with_taps(const TokenBatch& batch, const std::set<int>& taps) const {
  return base_.forward_with_taps(batch, taps, this);
}

Tensor AdaptedModel::adapt(int layer, Projection p, const Tensor& input, Tensor base_output) const {
  const auto it = adapters_.find({layer, p});
  if (it == adapters_.end()) return base_output;
  Tensor x = input;
  if (training_ && config_.dropout > 0.0) {
    const double keep = 1.0 - config_.dropout;
    std::vector<double> mask(input.numel());
    for (double& m : mask) {
      const double u = static_cast<double>(dropout_rng_() >> 11) * 0x1.0p-53;
      m = u < keep ? 1.0 / keep : 0.0;
    }
    x = mul(input, Tensor::from_data(input.shape(), std::move(mask)));
  }
  const Tensor delta = linear(linear(x, it->second.a), it->second.b);
  return add(base_output, scale(delta, config_.scaling()));
}

std::vector<NamedTensor> AdaptedModel::trainable_parameters() const {
  std::vector<NamedTensor> out;
  for (const auto& [key, ad] : adapters_) {
    const std::string name = adapter_name(key.first, key.second);
    out.push_back({name + ".lora_A", ad.a});
    out.push_back({name + ".lora_B", ad.b});
  }
  return out;
}

const LoraAdapter* AdaptedModel::adapter(int layer, Projection p) const {
  const auto it = adapters_.find({layer, p});
  return it == adapters_.end() ? nullptr : &it->second;
}

LoraAdapter* AdaptedModel::adapter(int layer, Projection p) {
  const auto it = adapters_.find({layer, p});
  return it == adapters_.end() ? nullptr : &it->second;
}

std::string AdaptedModel::dropout_rng_state() const {
  std::ostringstream os;
  os << dropout_rng_;
  return os.str();
}

void AdaptedModel::set_dropout_rng_state(const std::string& state) {
  std::istringstream is(state);
  is >> dropout_rng_;
  if (!is) throw std::invalid_argument("malformed dropout RNG state");
}

AdaptedModel attach(const TransformerModel& model, const LoraConfig& config, std::uint64_t seed) {
  return AdaptedModel(model.clone(), config, seed);
}

TransformerModel merge(const AdaptedModel& adapted) {
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  TransformerModel merged = clone_frozen(adapted.base());
  const auto r = static_cast<Eigen::Index>(adapted.lora_config().rank);
  for (int layer = 1; layer <= merged.config().n_layers; ++layer) {
    for (Projection p : kAllProjections) {
      const LoraAdapter* ad = adapted.adapter(layer, p);
      if (!ad) continue;
      Tensor& w = merged.block(layer).projection(p);
      const auto out = static_cast<Eigen::Index>(w.dim(0)), in = static_cast<Eigen::Index>(w.dim(1));
      Eigen::Map<RowMat> wm(w.mutable_data().data(), out, in);
      wm.noalias() += adapted.scaling() * (Eigen::Map<const RowMat>(ad->b.data().data(), out, r) *
                                           Eigen::Map<const RowMat>(ad->a.data().data(), r, in));
    }
  }
  return merged;
}

void save_adapter(const std::filesystem::path& path, const AdaptedModel& adapted) {
  Archive archive;
  archive.meta["kind"] = "adapter";
  archive.meta["model_config"] = adapted.config();
  archive.meta["lora_config"] = adapted.lora_config();
  for (const auto& np : adapted.trainable_parameters()) archive.add("lora/" + np.name, np.tensor);
  write_archive(path, archive);
}

AdaptedModel load_adapter(const std::filesystem::path& path, const TransformerModel& base) {
  const Archive archive = read_archive(path);
  if (!archive.meta.contains("lora_config") || !archive.meta.contains("model_config")) {
    throw CheckpointError(fmt::format("{}: no adapter section", path.string()));
  }
  if (archive.meta.at("model_config").get<ModelConfig>() != base.config()) {
    throw CheckpointError(fmt::format("{}: adapter was trained on a different ModelConfig", path.string()));
  }
  AdaptedModel adapted(base.clone(), archive.meta.at("lora_config").get<LoraConfig>(), 0);
  for (auto& np : adapted.trainable_parameters()) archive.restore("lora/" + np.name, np.tensor);
  return adapted;
}

}  // namespace idpo
