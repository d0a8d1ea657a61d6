// SPDX-License-Identifier: Apache-2.0

#include "idpo/run_config.hpp"

#include <fmt/format.h>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>

#include "idpo/json_io.hpp"

namespace idpo {

namespace {

enum SeedStream : std::uint64_t { kTaskStream = 1, kSplitStream, kInitStream, kSftStream, kDpoStream, kSamplerStream };

std::uint64_t stream_seed(std::uint64_t master, SeedStream s) { return derive_seed(master, s); }

}  // namespace

void RunConfig::validate() const {
  if (version != kRunConfigVersion) {
    throw std::invalid_argument(fmt::format("RunConfig.version {} is not supported (expected {})", version,
                                            kRunConfigVersion));
  }
  model.validate();
  lora.validate(model);
  dpo.validate(model.n_layers);
  sft_train.validate();
  dpo_train.validate();
  sampler.validate();
  task.validate();
  if (n_pairs < 2) throw std::invalid_argument("RunConfig.n_pairs must be >= 2");
  if (test_size == 0 || test_size >= n_pairs) {
    throw std::invalid_argument(fmt::format("RunConfig.test_size must be in [1, n_pairs), got {}", test_size));
  }
  if (!(sft_rejected_fraction >= 0.0 && sft_rejected_fraction <= 1.0)) {
    throw std::invalid_argument("RunConfig.sft_rejected_fraction must be in [0, 1]");
  }
  if (profile_pairs == 0) throw std::invalid_argument("RunConfig.profile_pairs must be >= 1");
}

void RunConfig::derive_seeds() {
  task.seed = stream_seed(seed, kTaskStream);
  sft_train.seed = stream_seed(seed, kSftStream);
  dpo_train.seed = stream_seed(seed, kDpoStream);
  sampler.seed = stream_seed(seed, kSamplerStream);
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"version", c.version},
       {"seed", c.seed},
       {"out_dir", c.out_dir},
       {"model", c.model},
       {"lora", c.lora},
       {"dpo", c.dpo},
       {"sft_train", c.sft_train},
       {"dpo_train", c.dpo_train},
       {"sampler", c.sampler},
       {"task", c.task},
       {"n_pairs", c.n_pairs},
       {"test_size", c.test_size},
       {"sft_rejected_fraction", c.sft_rejected_fraction},
       {"profile_pairs", c.profile_pairs},
       {"sweep_vs_vanilla", c.sweep_vs_vanilla}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  static const std::set<std::string> known = {"version",  "seed",      "out_dir",   "model",
                                              "lora",     "dpo",       "sft_train", "dpo_train",
                                              "sampler",  "task",      "n_pairs",   "test_size",
                                              "sft_rejected_fraction", "profile_pairs", "sweep_vs_vanilla"};
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw std::invalid_argument(fmt::format("config: unknown key '{}'", key));
  }
  const RunConfig defaults;
  c.version = j.value("version", defaults.version);
  c.seed = j.value("seed", defaults.seed);
  c.out_dir = j.value("out_dir", defaults.out_dir);
  c.model = j.value("model", defaults.model);
  c.lora = j.value("lora", defaults.lora);
  c.dpo = j.value("dpo", defaults.dpo);
  c.sft_train = j.value("sft_train", defaults.sft_train);
  c.dpo_train = j.value("dpo_train", defaults.dpo_train);
  c.sampler = j.value("sampler", defaults.sampler);
  c.task = j.value("task", defaults.task);
  c.n_pairs = j.value("n_pairs", defaults.n_pairs);
  c.test_size = j.value("test_size", defaults.test_size);
  c.sft_rejected_fraction = j.value("sft_rejected_fraction", defaults.sft_rejected_fraction);
  c.profile_pairs = j.value("profile_pairs", defaults.profile_pairs);
  c.sweep_vs_vanilla = j.value("sweep_vs_vanilla", defaults.sweep_vs_vanilla);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(fmt::format("cannot open config {}", path.string()));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return j.get<RunConfig>();
}

void save_run_config(const std::filesystem::path& path, const RunConfig& config) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out << nlohmann::json(config).dump(2) << '\n';
}

Split build_dataset(const RunConfig& config) {
  const auto pairs = generate_pairs(config.task, config.n_pairs);
  return split_by_test_count(pairs, config.test_size, stream_seed(config.seed, kSplitStream));
}

TransformerModel initial_model(const RunConfig& config) {
  return init_model(config.model, stream_seed(config.seed, kInitStream));
}

TransformerModel build_sft(const RunConfig& config, std::span<const PreferencePair> train) {
  return train_sft(initial_model(config), sft_sequences(train, config.sft_rejected_fraction, config.sft_train.seed), config.sft_train);
}

std::vector<std::vector<int>> prompts_of(std::span<const PreferencePair> pairs) {
  std::vector<std::vector<int>> out;
  for (const auto& p : pairs) out.push_back(p.prompt);
  return out;
}

GradcheckReport run_gradcheck(const RunConfig& config, double h, std::size_t max_coords_per_tensor,
                              std::size_t n_pairs) {
  config.validate();
  const TransformerModel base = initial_model(config);
  const TransformerModel reference = clone_frozen(base);
  LoraConfig lora = config.lora;
  lora.dropout = 0.0;
  AdaptedModel policy = attach(base, lora, config.dpo_train.seed);
  std::mt19937_64 rng(config.dpo_train.seed);
  std::normal_distribution<double> normal(0.0, 0.05);
  std::vector<Tensor> params;
  for (auto& np : policy.trainable_parameters()) {
    for (double& v : np.tensor.mutable_data()) v += normal(rng);
    params.push_back(np.tensor);
  }
  const auto pairs = generate_pairs(config.task, n_pairs);

  const auto check = [&](const DpoConfig& cfg) {
    return grad_check_params([&] { return dpo_batch_loss(policy, reference, pairs, cfg).total; }, params, h,
                             max_coords_per_tensor);
  };
  GradcheckReport report;
  DpoConfig cfg = config.dpo;
  const GradCheckResult total = check(cfg);
  report.lambda_total = total.max_rel_error;
  report.coordinates = total.coordinates;
  cfg.gamma = 1.0;
  report.lambda_dpo = check(cfg).max_rel_error;
  if (!config.dpo.layers.empty()) {
    cfg.gamma = 0.0;
    report.lambda_intermediate = check(cfg).max_rel_error;
  }
  return report;
}

}  // namespace idpo
