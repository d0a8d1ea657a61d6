// SPDX-License-Identifier: Apache-2.0

#include "idpo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fmt/format.h>
#include <numeric>
#include <sstream>

#include "idpo/json_io.hpp"
#include "idpo/log.hpp"
#include "idpo/vocab.hpp"

namespace idpo {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument(fmt::format("TrainConfig.learning_rate must be >= 0, got {}", learning_rate));
  }
  if (batch_size < 1) throw std::invalid_argument(fmt::format("TrainConfig.batch_size must be >= 1, got {}", batch_size));
  if (steps < 0) throw std::invalid_argument("TrainConfig.steps must be >= 0");
  if (checkpoint_interval < 0) throw std::invalid_argument("TrainConfig.checkpoint_interval must be >= 0");
  if (!(adamw.beta1 >= 0.0 && adamw.beta1 < 1.0) || !(adamw.beta2 >= 0.0 && adamw.beta2 < 1.0) || !(adamw.eps > 0.0)) {
    throw std::invalid_argument("TrainConfig.adamw: need 0 <= beta1, beta2 < 1 and eps > 0");
  }
}

// ---------------------------------------------------------------------------
// Optimizer

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig config, double learning_rate)
    : params_(std::move(params)), config_(config), lr_(learning_rate) {
  for (const Tensor& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    const auto g = p.mutable_grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config_.eps);
      w[j] -= lr_ * (update + config_.weight_decay * w[j]);
    }
  }
}

void AdamW::save(Archive& archive, const std::string& prefix) const {
  archive.meta[prefix + "step"] = t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    archive.add(fmt::format("{}m/{}", prefix, i), params_[i].shape(), m_[i]);
    archive.add(fmt::format("{}v/{}", prefix, i), params_[i].shape(), v_[i]);
  }
}

void AdamW::restore(const Archive& archive, const std::string& prefix) {
  t_ = archive.meta.at(prefix + "step").get<std::int64_t>();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& m = archive.get(fmt::format("{}m/{}", prefix, i));
    const auto& v = archive.get(fmt::format("{}v/{}", prefix, i));
    if (m.values.size() != m_[i].size() || v.values.size() != v_[i].size()) {
      throw CheckpointError(fmt::format("optimizer moment {} has the wrong size", i));
    }
    m_[i] = m.values;
    v_[i] = v.values;
  }
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const Tensor& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.node()->grad) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (Tensor& p : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Batching

BatchSampler::BatchSampler(std::size_t n_items, std::uint64_t seed) : n_(n_items), rng_(seed) {
  if (n_ == 0) throw std::invalid_argument("BatchSampler: no items");
  reshuffle();
}

void BatchSampler::reshuffle() {
  order_.resize(n_);
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::shuffle(order_.begin(), order_.end(), rng_);
  cursor_ = 0;
}

std::vector<std::size_t> BatchSampler::next(std::size_t batch_size) {
  std::vector<std::size_t> out;
  out.reserve(batch_size);
  while (out.size() < batch_size) {
    if (cursor_ == n_) {
      ++epoch_;
      reshuffle();
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

nlohmann::json BatchSampler::state() const {
  std::ostringstream os;
  os << rng_;
  return {{"rng", os.str()}, {"order", order_}, {"cursor", cursor_}, {"epoch", epoch_}};
}

void BatchSampler::set_state(const nlohmann::json& state) {
  std::istringstream is(state.at("rng").get<std::string>());
  is >> rng_;
  if (!is) throw CheckpointError("malformed sampler RNG state");
  auto order = state.at("order").get<std::vector<std::size_t>>();
  if (order.size() != n_) throw CheckpointError("sampler state was saved for a different dataset size");
  order_ = std::move(order);
  cursor_ = state.at("cursor").get<std::size_t>();
  epoch_ = state.at("epoch").get<std::int64_t>();
}

// ---------------------------------------------------------------------------
// Logs

nlohmann::json to_json_record(const SftStepRecord& r) {
  return {{"step", r.step}, {"loss", r.loss}, {"grad_norm", r.grad_norm}};
}

nlohmann::json to_json_record(const DpoStepRecord& r) {
  nlohmann::json per_layer = nlohmann::json::object();
  for (const auto& [k, v] : r.losses.per_layer) per_layer[std::to_string(k)] = v;
  return {{"step", r.step},
          {"lambda_dpo", r.losses.lambda_dpo},
          {"lambda_intermediate", r.losses.lambda_intermediate},
          {"lambda_total", r.losses.lambda_total},
          {"margin", r.losses.margin},
          {"reward_accuracy", r.losses.reward_accuracy},
          {"per_layer", per_layer},
          {"grad_norm", r.grad_norm}};
}

namespace {

std::unique_ptr<std::ofstream> open_log(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto out = std::make_unique<std::ofstream>(path, std::ios::trunc);
  if (!*out) throw std::runtime_error(fmt::format("cannot open log {}", path.string()));
  return out;
}

std::vector<Tensor> tensors_of(const std::vector<NamedTensor>& named) {
  std::vector<Tensor> out;
  for (const auto& np : named) out.push_back(np.tensor);
  return out;
}

}  // namespace

Tensor next_token_loss(const CausalLm& model, const TokenBatch& batch) {
  std::vector<std::uint8_t> mask(batch.tokens.size(), 0);
  double count = 0.0;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 1; t < batch.seq_len; ++t) {
      const std::size_t i = b * batch.seq_len + t;
      if (batch.key_valid.empty() || batch.key_valid[i]) {
        mask[i] = 1;
        count += 1.0;
      }
    }
  }
  if (count == 0.0) throw std::invalid_argument("next_token_loss: batch has no target positions");
  const TapOutput out = model.forward_with_taps(batch, {});
  return scale(sum(sequence_logprob(out.final_logits, batch, mask)), -1.0 / count);
}

// ---------------------------------------------------------------------------
// SFT

SftTrainer::SftTrainer(TransformerModel model, std::vector<std::vector<int>> corpus, TrainConfig config)
    : model_(std::move(model)),
      corpus_(std::move(corpus)),
      config_(config),
      params_((model_.set_requires_grad(true), tensors_of(model_.named_parameters()))),
      optimizer_(params_, config_.adamw, config_.learning_rate),
      sampler_(corpus_.empty() ? 1 : corpus_.size(), config_.seed) {
  config_.validate();
  if (corpus_.empty()) throw std::invalid_argument("train_sft: empty corpus");
  for (const auto& seq : corpus_) {
    if (seq.size() < 2) throw std::invalid_argument("train_sft: corpus sequence shorter than two tokens");
    if (seq.size() > static_cast<std::size_t>(model_.config().max_seq_len)) {
      throw std::out_of_range(fmt::format("train_sft: sequence of {} tokens exceeds max_seq_len {}", seq.size(),
                                          model_.config().max_seq_len));
    }
    for (int id : seq) {
      if (id < 0 || id >= model_.config().vocab_size) {
        throw std::out_of_range(fmt::format("train_sft: token id {} not in model vocabulary", id));
      }
    }
  }
}

void SftTrainer::set_log_path(const std::filesystem::path& path) { log_ = open_log(path); }

SftStepRecord SftTrainer::step() {
  const auto idx = sampler_.next(static_cast<std::size_t>(config_.batch_size));
  std::vector<std::vector<int>> rows;
  for (std::size_t i : idx) rows.push_back(corpus_[i]);
  const TokenBatch batch = TokenBatch::from_rows(rows, kPadId);

  Tape& tape = Tape::active();
  tape.reset();
  for (Tensor& p : params_) p.zero_grad();
  const Tensor loss = next_token_loss(model_, batch);
  tape.backward(loss);
  SftStepRecord rec{step_, loss.item(), clip_grad_norm(params_, config_.grad_clip)};
  optimizer_.step();
  tape.reset();

  history_.push_back(rec);
  if (log_) *log_ << to_json_record(rec).dump() << '\n' << std::flush;
  ++step_;
  if (checkpoint_dir_ && config_.checkpoint_interval > 0 && step_ % config_.checkpoint_interval == 0) {
    save_checkpoint(*checkpoint_dir_ / fmt::format("sft_step{}.ckpt", step_));
  }
  return rec;
}

void SftTrainer::run() {
  while (step_ < config_.steps) step();
}

TransformerModel SftTrainer::release_model() {
  model_.set_requires_grad(false);
  return std::move(model_);
}

void SftTrainer::save_checkpoint(const std::filesystem::path& path) const {
  Archive archive;
  archive.meta["kind"] = "sft_trainer";
  archive.meta["model_config"] = model_.config();
  archive.meta["train_config"] = config_;
  archive.meta["trainer_step"] = step_;
  archive.meta["sampler"] = sampler_.state();
  for (const auto& np : model_.named_parameters()) archive.add("model/" + np.name, np.tensor);
  optimizer_.save(archive, "adam/");
  write_archive(path, archive);
}

void SftTrainer::load_checkpoint(const std::filesystem::path& path) {
  const Archive archive = read_archive(path);
  if (archive.meta.value("kind", "") != "sft_trainer") {
    throw CheckpointError(fmt::format("{}: not an SFT trainer checkpoint", path.string()));
  }
  if (archive.meta.at("model_config").get<ModelConfig>() != model_.config()) {
    throw CheckpointError(fmt::format("{}: ModelConfig mismatch", path.string()));
  }
  if (archive.meta.at("train_config").get<TrainConfig>() != config_) {
    throw CheckpointError(fmt::format("{}: TrainConfig mismatch", path.string()));
  }
  for (auto& np : model_.named_parameters()) archive.restore("model/" + np.name, np.tensor);
  optimizer_.restore(archive, "adam/");
  sampler_.set_state(archive.meta.at("sampler"));
  step_ = archive.meta.at("trainer_step").get<std::int64_t>();
}

TransformerModel train_sft(const TransformerModel& model, std::vector<std::vector<int>> corpus,
                           const TrainConfig& config) {
  SftTrainer trainer(model.clone(), std::move(corpus), config);
  trainer.run();
  return trainer.release_model();
}

// ---------------------------------------------------------------------------
// DPO

namespace {

std::vector<PreferencePair> fitting_pairs(std::vector<PreferencePair> data, int max_seq_len, std::size_t& skipped) {
  std::vector<PreferencePair> out;
  for (auto& p : data) {
    const std::size_t longest = 1 + p.prompt.size() + std::max(p.chosen.size(), p.rejected.size());
    if (longest > static_cast<std::size_t>(max_seq_len)) {
      ++skipped;
      continue;
    }
    out.push_back(std::move(p));
  }
  if (skipped > 0) logging::warn(fmt::format("train_dpo: skipped {} pairs longer than max_seq_len {}", skipped, max_seq_len));
  if (out.empty()) throw std::invalid_argument("train_dpo: no usable preference pairs");
  return out;
}

constexpr std::size_t kReferenceChunk = 16;

}  // namespace

DpoTrainer::DpoTrainer(const TransformerModel& sft, std::vector<PreferencePair> data, DpoConfig dpo_config,
                       LoraConfig lora_config, TrainConfig config)
    : reference_(clone_frozen(sft)),
      data_(fitting_pairs(std::move(data), sft.config().max_seq_len, skipped_)),
      dpo_config_(std::move(dpo_config)),
      config_(config),
      policy_(attach(sft, lora_config, config.seed)),
      params_(tensors_of(policy_.trainable_parameters())),
      optimizer_(params_, config_.adamw, config_.learning_rate),
      sampler_(data_.size(), config_.seed + 1) {
  config_.validate();
  dpo_config_.validate(sft.config().n_layers);
  reference_layers_ = reference_layers(dpo_config_, sft.config().n_layers);

  // Fixed chunking in dataset order, so the cached values do not depend on
  // the batch order (and a resumed run sees the same numbers).
  reference_cache_.resize(data_.size());
  for (std::size_t start = 0; start < data_.size(); start += kReferenceChunk) {
    const std::size_t end = std::min(data_.size(), start + kReferenceChunk);
    const std::span<const PreferencePair> chunk(data_.data() + start, end - start);
    const ReferenceLogprobs ref = reference_logprobs(reference_, make_preference_batch(chunk), reference_layers_);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      for (int k : reference_layers_) reference_cache_[start + i][k] = {ref.chosen.at(k)[i], ref.rejected.at(k)[i]};
    }
  }
}

void DpoTrainer::set_log_path(const std::filesystem::path& path) { log_ = open_log(path); }

DpoStepRecord DpoTrainer::step() {
  const auto idx = sampler_.next(static_cast<std::size_t>(config_.batch_size));
  std::vector<PreferencePair> pairs;
  ReferenceLogprobs ref;
  for (std::size_t i : idx) {
    pairs.push_back(data_[i]);
    for (int k : reference_layers_) {
      ref.chosen[k].push_back(reference_cache_[i].at(k).first);
      ref.rejected[k].push_back(reference_cache_[i].at(k).second);
    }
  }
  const PreferenceBatch batch = make_preference_batch(pairs);

  Tape& tape = Tape::active();
  tape.reset();
  for (Tensor& p : params_) p.zero_grad();
  policy_.set_training(true);
  DpoLossBreakdown losses;
  try {
    losses = dpo_batch_loss(policy_, ref, batch, dpo_config_);
  } catch (...) {
    policy_.set_training(false);
    throw;
  }
  policy_.set_training(false);
  tape.backward(losses.total);
  const double grad_norm = clip_grad_norm(params_, config_.grad_clip);
  optimizer_.step();
  losses.total = Tensor();
  tape.reset();

  DpoStepRecord rec{step_, std::move(losses), grad_norm};
  history_.push_back(rec);
  if (log_) *log_ << to_json_record(rec).dump() << '\n' << std::flush;
  ++step_;
  if (checkpoint_dir_ && config_.checkpoint_interval > 0 && step_ % config_.checkpoint_interval == 0) {
    save_checkpoint(*checkpoint_dir_ / fmt::format("dpo_step{}.ckpt", step_));
  }
  return rec;
}

void DpoTrainer::run() {
  while (step_ < config_.steps) step();
}

AdaptedModel DpoTrainer::release_policy() {
  policy_.set_training(false);
  return std::move(policy_);
}

void DpoTrainer::save_checkpoint(const std::filesystem::path& path) const {
  Archive archive;
  archive.meta["kind"] = "dpo_trainer";
  archive.meta["model_config"] = policy_.config();
  archive.meta["lora_config"] = policy_.lora_config();
  archive.meta["dpo_config"] = dpo_config_;
  archive.meta["train_config"] = config_;
  archive.meta["trainer_step"] = step_;
  archive.meta["n_pairs"] = data_.size();
  archive.meta["sampler"] = sampler_.state();
  archive.meta["dropout_rng"] = policy_.dropout_rng_state();
  for (const auto& np : policy_.base().named_parameters()) archive.add("model/" + np.name, np.tensor);
  for (const auto& np : policy_.trainable_parameters()) archive.add("lora/" + np.name, np.tensor);
  optimizer_.save(archive, "adam/");
  write_archive(path, archive);
}

void DpoTrainer::load_checkpoint(const std::filesystem::path& path) {
  const Archive archive = read_archive(path);
  if (archive.meta.value("kind", "") != "dpo_trainer") {
    throw CheckpointError(fmt::format("{}: not a DPO trainer checkpoint", path.string()));
  }
  if (archive.meta.at("model_config").get<ModelConfig>() != policy_.config() ||
      archive.meta.at("lora_config").get<LoraConfig>() != policy_.lora_config() ||
      archive.meta.at("dpo_config").get<DpoConfig>() != dpo_config_ ||
      archive.meta.at("train_config").get<TrainConfig>() != config_ ||
      archive.meta.at("n_pairs").get<std::size_t>() != data_.size()) {
    throw CheckpointError(fmt::format("{}: checkpoint configuration does not match this trainer", path.string()));
  }
  for (const auto& np : reference_.named_parameters()) {
    const auto& stored = archive.get("model/" + np.name);
    if (!std::equal(stored.values.begin(), stored.values.end(), np.tensor.data().begin())) {
      throw CheckpointError(fmt::format("{}: base weights differ from this trainer's SFT model", path.string()));
    }
  }
  for (auto& np : policy_.trainable_parameters()) archive.restore("lora/" + np.name, np.tensor);
  optimizer_.restore(archive, "adam/");
  sampler_.set_state(archive.meta.at("sampler"));
  policy_.set_dropout_rng_state(archive.meta.at("dropout_rng").get<std::string>());
  step_ = archive.meta.at("trainer_step").get<std::int64_t>();
}

AdaptedModel train_dpo(const TransformerModel& sft, std::vector<PreferencePair> data, const DpoConfig& dpo_config,
                       const LoraConfig& lora_config, const TrainConfig& config) {
  DpoTrainer trainer(sft, std::move(data), dpo_config, lora_config, config);
  trainer.run();
  return trainer.release_policy();
}

std::unique_ptr<CausalLm> load_any_model(const std::filesystem::path& path) {
  const Archive archive = read_archive(path);
  if (!archive.meta.contains("model_config")) throw CheckpointError(fmt::format("{}: no model section", path.string()));
  TransformerModel base(archive.meta.at("model_config").get<ModelConfig>());
  for (auto& np : base.named_parameters()) archive.restore("model/" + np.name, np.tensor);
  if (!archive.meta.contains("lora_config")) {
    base.set_requires_grad(false);
    return std::make_unique<TransformerModel>(std::move(base));
  }
  auto adapted = std::make_unique<AdaptedModel>(std::move(base), archive.meta.at("lora_config").get<LoraConfig>(), 0);
  for (auto& np : adapted->trainable_parameters()) archive.restore("lora/" + np.name, np.tensor);
  return adapted;
}

std::uint64_t model_fingerprint(const TransformerModel& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& np : model.named_parameters()) {
    for (double v : np.tensor.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

}  // namespace idpo
