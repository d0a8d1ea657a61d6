// SPDX-License-Identifier: Apache-2.0
//
// idpo: data generation, SFT and preference training, evaluation, layer
// analysis and sweeps. Settings come from a JSON RunConfig; command-line
// flags override it. Every command writes under --out:
//
//   config.json   resolved RunConfig, written before any computation
//   run.json      command name and arguments
//   data/         generated datasets
//   logs/         per-step JSONL training logs
//   checkpoints/  model and trainer checkpoints
//   reports/      JSON/CSV/text reports
//   error.json    only when a command fails after starting

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fmt/format.h>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "idpo/json_io.hpp"
#include "idpo/log.hpp"
#include "idpo/run_config.hpp"
#include "idpo/sweep.hpp"

namespace fs = std::filesystem;
using namespace idpo;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
};

struct RunDirs {
  fs::path root, data, logs, checkpoints, reports;
};

std::string one_line(std::string text) {
  for (char& c : text) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return text;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out << text;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

RunConfig resolve_config(const Common& common) {
  RunConfig cfg;
  if (!common.config_path.empty()) {
    if (!fs::exists(common.config_path)) throw UsageError(fmt::format("config file {} not found", common.config_path));
    try {
      cfg = load_run_config(common.config_path);
    } catch (const std::exception& e) {
      throw UsageError(fmt::format("invalid config {}: {}", common.config_path, e.what()));
    }
  }
  if (common.seed) cfg.seed = *common.seed;
  cfg.out_dir = common.out;
  return cfg;
}

// Validates, derives component seeds and writes the snapshot.
RunDirs start_run(RunConfig& cfg, const std::string& command, const std::vector<std::string>& args) {
  cfg.derive_seeds();
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  RunDirs dirs{cfg.out_dir, fs::path(cfg.out_dir) / "data", fs::path(cfg.out_dir) / "logs",
               fs::path(cfg.out_dir) / "checkpoints", fs::path(cfg.out_dir) / "reports"};
  for (const auto& d : {dirs.root, dirs.data, dirs.logs, dirs.checkpoints, dirs.reports}) fs::create_directories(d);
  fs::remove(dirs.root / "error.json");
  save_run_config(dirs.root / "config.json", cfg);
  write_json(dirs.root / "run.json", {{"command", command}, {"args", args}});
  return dirs;
}

void require_file(const std::string& path, const std::string& flag) {
  if (path.empty()) throw UsageError(fmt::format("{} is required", flag));
  if (!fs::exists(path)) throw UsageError(fmt::format("{} {}: file not found", flag, path));
}

std::vector<int> parse_layers(const std::string& text) {
  if (text.empty() || text == "none") return {};
  const auto sets = parse_k_sets(text);
  if (sets.size() != 1) throw UsageError(fmt::format("--layers takes one comma-separated set, got '{}'", text));
  return sets.front();
}

struct Datasets {
  std::vector<PreferencePair> train;
  std::vector<PreferencePair> test;
};

Datasets load_datasets(const RunConfig& cfg, const std::string& train_path, const std::string& test_path) {
  Datasets d;
  if (train_path.empty() || test_path.empty()) {
    Split split = build_dataset(cfg);
    d.train = std::move(split.train);
    d.test = std::move(split.test);
  }
  const ToyTokenizer tok;
  if (!train_path.empty()) d.train = load_preference_jsonl(train_path, tok, cfg.model.max_seq_len);
  if (!test_path.empty()) d.test = load_preference_jsonl(test_path, tok, cfg.model.max_seq_len);
  return d;
}

nlohmann::json heldout_summary(const CausalLm& policy, const CausalLm& reference, std::span<const PreferencePair> test,
                               double beta) {
  DpoConfig cfg;
  cfg.beta = beta;
  cfg.gamma = 1.0;
  NoGradGuard no_grad;
  double correct = 0.0, margin = 0.0, loss = 0.0;
  for (std::size_t start = 0; start < test.size(); start += 16) {
    const auto chunk = test.subspan(start, std::min<std::size_t>(16, test.size() - start));
    const DpoLossBreakdown b = dpo_batch_loss(policy, reference, chunk, cfg);
    const auto n = static_cast<double>(chunk.size());
    correct += b.reward_accuracy * n;
    margin += b.margin * n;
    loss += b.lambda_dpo * n;
  }
  const auto n = static_cast<double>(test.size());
  return {{"n_pairs", test.size()},
          {"chosen_preference_accuracy", correct / n},
          {"mean_margin", margin / n},
          {"lambda_dpo", loss / n}};
}

std::string match_csv(const MatchReport& r, const ToyTokenizer& tok) {
  std::string out = "index,prompt,completion_a,completion_b,verdict_a,verdict_b,score_a,score_b,outcome\n";
  const auto verdict = [](Verdict v) { return v == Verdict::pass ? "pass" : "fail"; };
  for (std::size_t i = 0; i < r.per_prompt.size(); ++i) {
    const auto& pv = r.per_prompt[i];
    out += fmt::format("{},{},{},{},{},{},{},{},{}\n", i, tok.decode(pv.prompt), tok.decode(pv.completion_a),
                       tok.decode(pv.completion_b), verdict(pv.verdict_a), verdict(pv.verdict_b), pv.score_a,
                       pv.score_b, outcome_name(pv.outcome));
  }
  return out;
}

// --- commands --------------------------------------------------------------

void cmd_gen_data(RunConfig cfg, const std::vector<std::string>& args, const std::string& task,
                  std::optional<std::size_t> n) {
  if (!task.empty()) {
    try {
      cfg.task.kind = parse_task_kind(task);
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
  }
  if (n) cfg.n_pairs = *n;
  if (cfg.test_size >= cfg.n_pairs) cfg.test_size = std::min(kDefaultTestSize, cfg.n_pairs / 2);
  const RunDirs dirs = start_run(cfg, "gen-data", args);
  const ToyTokenizer tok;
  const auto pairs = generate_pairs(cfg.task, cfg.n_pairs);
  save_preference_jsonl(dirs.data / "pairs.jsonl", pairs, tok);
  const Split split = build_dataset(cfg);
  save_preference_jsonl(dirs.data / "train.jsonl", split.train, tok);
  save_preference_jsonl(dirs.data / "test.jsonl", split.test, tok);
  fmt::print("{}\n", nlohmann::json({{"pairs", pairs.size()}, {"train", split.train.size()}, {"test", split.test.size()},
                                     {"dir", dirs.data.string()}})
                         .dump());
}

void cmd_train_sft(RunConfig cfg, const std::vector<std::string>& args, const std::string& train_path) {
  if (!train_path.empty()) require_file(train_path, "--train-data");
  const RunDirs dirs = start_run(cfg, "train-sft", args);
  const ToyTokenizer tok;
  const std::vector<PreferencePair> train =
      train_path.empty() ? build_dataset(cfg).train : load_preference_jsonl(train_path, tok, cfg.model.max_seq_len);
  SftTrainer trainer(initial_model(cfg), sft_sequences(train, cfg.sft_rejected_fraction, cfg.sft_train.seed), cfg.sft_train);
  trainer.set_log_path(dirs.logs / "sft.jsonl");
  trainer.set_checkpoint_dir(dirs.checkpoints);
  trainer.run();
  save_model(dirs.checkpoints / "sft.ckpt", trainer.model());
  const double final_loss = trainer.history().empty() ? 0.0 : trainer.history().back().loss;
  write_json(dirs.reports / "sft_summary.json", {{"steps", trainer.steps_done()}, {"final_loss", final_loss}});
  fmt::print("{}\n", nlohmann::json({{"checkpoint", (dirs.checkpoints / "sft.ckpt").string()}, {"final_loss", final_loss}})
                         .dump());
}

void cmd_train_dpo(RunConfig cfg, const std::vector<std::string>& args, const std::string& sft_path,
                   const std::optional<std::string>& layers, std::optional<double> gamma, std::optional<double> beta,
                   const std::string& train_path, const std::string& test_path, const std::string& resume) {
  require_file(sft_path, "--sft-checkpoint");
  if (!train_path.empty()) require_file(train_path, "--train-data");
  if (!test_path.empty()) require_file(test_path, "--test-data");
  if (!resume.empty()) require_file(resume, "--resume");
  if (layers) cfg.dpo.layers = parse_layers(*layers);
  if (gamma) cfg.dpo.gamma = *gamma;
  if (beta) cfg.dpo.beta = *beta;
  const RunDirs dirs = start_run(cfg, "train-dpo", args);

  const TransformerModel sft = load_model(sft_path, cfg.model);
  const Datasets data = load_datasets(cfg, train_path, test_path);
  DpoTrainer trainer(sft, data.train, cfg.dpo, cfg.lora, cfg.dpo_train);
  if (!resume.empty()) trainer.load_checkpoint(resume);
  trainer.set_log_path(dirs.logs / "dpo.jsonl");
  trainer.set_checkpoint_dir(dirs.checkpoints);
  trainer.run();
  trainer.save_checkpoint(dirs.checkpoints / "dpo.ckpt");

  nlohmann::json summary = heldout_summary(trainer.policy(), trainer.reference(), data.test, cfg.dpo.beta);
  summary["steps"] = trainer.steps_done();
  summary["skipped_pairs"] = trainer.skipped_pairs();
  summary["layers"] = cfg.dpo.layers;
  summary["gamma"] = cfg.dpo.gamma;
  summary["beta"] = cfg.dpo.beta;
  write_json(dirs.reports / "heldout.json", summary);
  fmt::print("{}\n", summary.dump());
}

void cmd_evaluate(RunConfig cfg, const std::vector<std::string>& args, const std::string& a, const std::string& b,
                  const std::string& prompts_path, const std::string& name_a, const std::string& name_b) {
  require_file(a, "--a");
  require_file(b, "--b");
  require_file(prompts_path, "--prompts");
  const RunDirs dirs = start_run(cfg, "evaluate", args);
  const ToyTokenizer tok;
  const auto model_a = load_any_model(a);
  const auto model_b = load_any_model(b);
  const auto pairs = load_preference_jsonl(prompts_path, tok, model_a->config().max_seq_len);
  if (pairs.empty()) throw std::invalid_argument(fmt::format("{}: no prompts", prompts_path));
  const auto prompts = prompts_of(pairs);
  const MatchReport report =
      head_to_head(*model_a, *model_b, prompts, cfg.task, cfg.sampler, name_a.empty() ? fs::path(a).stem().string() : name_a,
                   name_b.empty() ? fs::path(b).stem().string() : name_b);
  write_json(dirs.reports / "match.json", report_json(report, tok));
  write_text(dirs.reports / "match.csv", match_csv(report, tok));
  fmt::print("{}\n", nlohmann::json({{"wins", report.wins}, {"losses", report.losses}, {"ties", report.ties},
                                     {"n_prompts", report.n_prompts}})
                         .dump());
}

void cmd_analyze_layers(RunConfig cfg, const std::vector<std::string>& args, const std::string& policy_path,
                        const std::string& reference_path, const std::string& pairs_path, std::optional<double> beta,
                        std::optional<std::size_t> n_pairs) {
  require_file(policy_path, "--policy");
  require_file(reference_path, "--reference");
  require_file(pairs_path, "--pairs");
  if (beta) cfg.dpo.beta = *beta;
  if (n_pairs) cfg.profile_pairs = *n_pairs;
  const RunDirs dirs = start_run(cfg, "analyze-layers", args);
  const ToyTokenizer tok;
  const auto policy = load_any_model(policy_path);
  const auto reference = load_any_model(reference_path);
  auto pairs = load_preference_jsonl(pairs_path, tok, policy->config().max_seq_len);
  if (pairs.empty()) throw std::invalid_argument(fmt::format("{}: no pairs", pairs_path));
  if (pairs.size() > cfg.profile_pairs) pairs.resize(cfg.profile_pairs);
  const LayerLikelihoodProfile profile = layer_likelihood_profile(*policy, *reference, pairs, cfg.dpo.beta);
  write_json(dirs.reports / "profile.json", profile_json(profile));
  write_text(dirs.reports / "profile.csv", profile_csv(profile));
  fmt::print("{}\n", profile_json(profile).dump());
}

void cmd_layer_sweep(RunConfig cfg, const std::vector<std::string>& args, const std::string& k_sets_text,
                     const std::string& sft_path, bool vs_vanilla) {
  std::vector<std::vector<int>> k_sets;
  try {
    k_sets = parse_k_sets(k_sets_text);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  if (!sft_path.empty()) require_file(sft_path, "--sft-checkpoint");
  if (vs_vanilla) cfg.sweep_vs_vanilla = true;
  for (const auto& k : k_sets) {
    DpoConfig d = cfg.dpo;
    d.layers = k;
    try {
      d.validate(cfg.model.n_layers);
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
  }
  const RunDirs dirs = start_run(cfg, "layer-sweep", args);
  const Split split = build_dataset(cfg);
  TransformerModel sft = sft_path.empty() ? build_sft(cfg, split.train) : load_model(sft_path, cfg.model);
  if (sft_path.empty()) save_model(dirs.checkpoints / "sft.ckpt", sft);
  const SweepSettings settings{cfg.dpo, cfg.lora, cfg.dpo_train, cfg.sampler, cfg.task, cfg.sweep_vs_vanilla};
  const SweepTable table = layer_sweep(sft, split.train, prompts_of(split.test), k_sets, settings);
  write_json(dirs.reports / "sweep.json", sweep_json(table));
  write_text(dirs.reports / "sweep.csv", sweep_csv(table));
  write_text(dirs.reports / "sweep.txt", sweep_text(table));
  fmt::print("{}", sweep_text(table));
}

void cmd_gradcheck(RunConfig cfg, const std::vector<std::string>& args, double h, std::size_t coords) {
  const RunDirs dirs = start_run(cfg, "gradcheck", args);
  const GradcheckReport r = run_gradcheck(cfg, h, coords);
  nlohmann::json j{{"h", h},
                   {"coordinates_per_component", r.coordinates},
                   {"lambda_dpo", r.lambda_dpo},
                   {"lambda_total", r.lambda_total}};
  if (!cfg.dpo.layers.empty()) j["lambda_intermediate"] = r.lambda_intermediate;
  j["max_relative_error"] = std::max({r.lambda_dpo, r.lambda_intermediate, r.lambda_total});
  write_json(dirs.reports / "gradcheck.json", j);
  fmt::print("{}\n", j.dump());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Intermediate-layer preference optimization toolkit"};
  app.require_subcommand(1);
  std::vector<std::string> raw_args(argv + 1, argv + argc);

  Common common;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "RunConfig JSON file");
    sub->add_option("--out", common.out, "output directory")->capture_default_str();
    sub->add_option("--seed", common.seed, "master seed (overrides the config)");
  };

  std::string task;
  std::optional<std::size_t> n;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic preference dataset");
  add_common(gen);
  gen->add_option("--task", task, "sort-copy | pattern-complete");
  gen->add_option("--n", n, "number of pairs");

  std::string train_data, test_data;
  auto* sft = app.add_subcommand("train-sft", "train the supervised starting model");
  add_common(sft);
  sft->add_option("--train-data", train_data, "preference JSONL to train on instead of generated data");

  std::string sft_ckpt, resume;
  std::optional<std::string> layers;
  std::optional<double> gamma, beta;
  auto* dpo = app.add_subcommand("train-dpo", "preference fine-tuning with LoRA");
  add_common(dpo);
  dpo->add_option("--sft-checkpoint", sft_ckpt, "SFT model checkpoint");
  dpo->add_option("--layers", layers, "intermediate layer set K, e.g. 2,5 (\"none\" for empty)");
  dpo->add_option("--gamma", gamma, "final-layer weight");
  dpo->add_option("--beta", beta, "inverse temperature");
  dpo->add_option("--train-data", train_data, "training pairs JSONL");
  dpo->add_option("--test-data", test_data, "held-out pairs JSONL");
  dpo->add_option("--resume", resume, "trainer checkpoint to resume from");

  std::string model_a, model_b, prompts, name_a, name_b;
  auto* eval = app.add_subcommand("evaluate", "head-to-head comparison of two models");
  add_common(eval);
  eval->add_option("--a", model_a, "checkpoint of model A");
  eval->add_option("--b", model_b, "checkpoint of model B");
  eval->add_option("--prompts", prompts, "preference JSONL whose prompts are used");
  eval->add_option("--name-a", name_a, "report name of model A");
  eval->add_option("--name-b", name_b, "report name of model B");

  std::string policy, reference, pairs;
  std::optional<double> profile_beta;
  std::optional<std::size_t> profile_pairs;
  auto* analyze = app.add_subcommand("analyze-layers", "per-layer preference likelihood profile");
  add_common(analyze);
  analyze->add_option("--policy", policy, "policy checkpoint");
  analyze->add_option("--reference", reference, "reference checkpoint");
  analyze->add_option("--pairs", pairs, "preference JSONL");
  analyze->add_option("--beta", profile_beta, "inverse temperature");
  analyze->add_option("--n-pairs", profile_pairs, "number of pairs used (default 30)");

  std::string k_sets;
  bool vs_vanilla = false;
  auto* sweep = app.add_subcommand("layer-sweep", "train and compare one model per layer set");
  add_common(sweep);
  sweep->add_option("--k-sets", k_sets, "layer sets separated by ';', e.g. \"2;5;2,5\"")->required();
  sweep->add_option("--sft-checkpoint", sft_ckpt, "reuse an SFT checkpoint instead of training one");
  sweep->add_flag("--vs-dpo", vs_vanilla, "also compare each row with a final-layer-only model");

  double h = 1e-4;
  std::size_t coords = 2;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the loss gradients");
  add_common(grad);
  grad->add_option("--fd-step", h, "central difference step")->capture_default_str();
  grad->add_option("--coords", coords, "probed coordinates per tensor (0 = all)")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fmt::print(stderr, "error: usage: {}\n", one_line(e.what()));
    return 2;
  }

  std::string command = app.get_subcommands().front()->get_name();
  RunConfig cfg;
  try {
    cfg = resolve_config(common);
  } catch (const UsageError& e) {
    fmt::print(stderr, "error: usage: {}\n", one_line(e.what()));
    return 2;
  }

  bool started = false;
  try {
    started = true;
    if (gen->parsed()) cmd_gen_data(cfg, raw_args, task, n);
    if (sft->parsed()) cmd_train_sft(cfg, raw_args, train_data);
    if (dpo->parsed()) cmd_train_dpo(cfg, raw_args, sft_ckpt, layers, gamma, beta, train_data, test_data, resume);
    if (eval->parsed()) cmd_evaluate(cfg, raw_args, model_a, model_b, prompts, name_a, name_b);
    if (analyze->parsed()) cmd_analyze_layers(cfg, raw_args, policy, reference, pairs, profile_beta, profile_pairs);
    if (sweep->parsed()) cmd_layer_sweep(cfg, raw_args, k_sets, sft_ckpt, vs_vanilla);
    if (grad->parsed()) cmd_gradcheck(cfg, raw_args, h, coords);
  } catch (const UsageError& e) {
    fmt::print(stderr, "error: usage: {}\n", one_line(e.what()));
    return 2;
  } catch (const std::exception& e) {
    const std::string message = one_line(e.what());
    if (started && fs::exists(fs::path(common.out) / "config.json")) {
      std::vector<std::string> outputs;
      for (const auto& entry : fs::recursive_directory_iterator(common.out)) {
        if (entry.is_regular_file()) outputs.push_back(fs::relative(entry.path(), common.out).string());
      }
      std::sort(outputs.begin(), outputs.end());
      try {
        write_json(fs::path(common.out) / "error.json",
                   {{"command", command}, {"error", message}, {"partial_outputs", outputs}});
      } catch (...) {
      }
    }
    fmt::print(stderr, "error: {}: {}\n", command, message);
    return 1;
  }
  return 0;
}
