// SPDX-License-Identifier: Apache-2.0

#include "idpo/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <limits>
#include <random>
#include <set>
#include <stdexcept>

#include "idpo/vocab.hpp"

namespace idpo {

void SamplerConfig::validate() const {
  if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument(fmt::format("SamplerConfig.temperature must be >= 0, got {}", temperature));
  }
  if (!(repetition_penalty >= 1.0) || !std::isfinite(repetition_penalty)) {
    throw std::invalid_argument(
        fmt::format("SamplerConfig.repetition_penalty must be >= 1, got {}", repetition_penalty));
  }
  if (max_new_tokens < 1) throw std::invalid_argument("SamplerConfig.max_new_tokens must be >= 1");
}

void apply_repetition_penalty(std::span<double> logits, std::span<const int> seen, double penalty) {
  const std::set<int> distinct(seen.begin(), seen.end());
  for (int id : distinct) {
    if (id < 0 || static_cast<std::size_t>(id) >= logits.size()) {
      throw std::out_of_range(fmt::format("apply_repetition_penalty: token {} outside vocabulary", id));
    }
    double& l = logits[static_cast<std::size_t>(id)];
    l = l > 0.0 ? l / penalty : l * penalty;
  }
}

std::vector<double> next_token_distribution(const CausalLm& model, std::span<const int> context,
                                            std::span<const int> generated, const SamplerConfig& cfg) {
  std::vector<int> row(context.begin(), context.end());
  row.insert(row.end(), generated.begin(), generated.end());
  if (row.empty()) throw std::invalid_argument("next_token_distribution: empty context");

  NoGradGuard no_grad;
  const TokenBatch batch = TokenBatch::from_rows({row}, kPadId);
  const Tensor logits = model.forward_with_taps(batch, {}).final_logits;
  const std::size_t vocab = static_cast<std::size_t>(model.config().vocab_size);
  const auto all = logits.data();
  std::vector<double> last(all.end() - static_cast<std::ptrdiff_t>(vocab), all.end());

  if (cfg.repetition_penalty != 1.0) {
    std::vector<int> seen(generated.begin(), generated.end());
    if (cfg.penalize_prompt) seen.insert(seen.end(), context.begin(), context.end());
    apply_repetition_penalty(last, seen, cfg.repetition_penalty);
  }

  std::vector<double> probs(vocab, 0.0);
  if (cfg.temperature < kGreedyTemperature) {
    probs[static_cast<std::size_t>(std::max_element(last.begin(), last.end()) - last.begin())] = 1.0;
    return probs;
  }
  const double peak = *std::max_element(last.begin(), last.end());
  double total = 0.0;
  for (std::size_t v = 0; v < vocab; ++v) {
    probs[v] = std::exp((last[v] - peak) / cfg.temperature);
    total += probs[v];
  }
  for (double& p : probs) p /= total;
  return probs;
}

std::vector<int> sample(const CausalLm& model, std::span<const int> context, const SamplerConfig& cfg) {
  cfg.validate();
  const auto max_len = static_cast<std::size_t>(model.config().max_seq_len);
  if (context.empty()) throw std::invalid_argument("sample: empty context");
  if (context.size() > max_len) {
    throw std::out_of_range(fmt::format("sample: context of {} tokens exceeds max_seq_len {}", context.size(), max_len));
  }
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<int> generated;
  while (generated.size() < static_cast<std::size_t>(cfg.max_new_tokens) && context.size() + generated.size() < max_len) {
    const std::vector<double> probs = next_token_distribution(model, context, generated, cfg);
    const double u = uniform(rng);
    double acc = 0.0;
    int token = static_cast<int>(probs.size()) - 1;
    for (std::size_t v = 0; v < probs.size(); ++v) {
      acc += probs[v];
      if (u < acc) {
        token = static_cast<int>(v);
        break;
      }
    }
    generated.push_back(token);
    if (token == kEosId) break;
  }
  return generated;
}

Verdict judge(const SyntheticTask& task, std::span<const int> prompt, std::span<const int> completion) {
  const auto answer = rule_answer(task, prompt);
  if (!answer) return Verdict::fail;
  return std::equal(answer->begin(), answer->end(), completion.begin(), completion.end()) ? Verdict::pass
                                                                                         : Verdict::fail;
}

std::size_t edit_distance(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

std::size_t task_score(const SyntheticTask& task, std::span<const int> prompt, std::span<const int> completion) {
  const auto answer = rule_answer(task, prompt);
  if (!answer) return std::numeric_limits<std::size_t>::max();
  return edit_distance(*answer, completion);
}

std::string_view outcome_name(Outcome o) {
  switch (o) {
    case Outcome::win: return "win";
    case Outcome::loss: return "loss";
    case Outcome::tie: return "tie";
  }
  return "tie";
}

MatchReport MatchReport::from_counts(std::size_t wins, std::size_t losses, std::size_t ties) {
  MatchReport r;
  r.wins = wins;
  r.losses = losses;
  r.ties = ties;
  r.n_prompts = wins + losses + ties;
  return r;
}

namespace {

double ratio(std::size_t count, std::size_t n) {
  return n == 0 ? 0.0 : static_cast<double>(count) / static_cast<double>(n);
}

double percent(std::size_t count, std::size_t n) {
  return n == 0 ? 0.0 : 100.0 * static_cast<double>(count) / static_cast<double>(n);
}

}  // namespace

double MatchReport::win_rate() const { return ratio(wins, n_prompts); }
double MatchReport::lose_rate() const { return ratio(losses, n_prompts); }
double MatchReport::tie_rate() const { return ratio(ties, n_prompts); }
double MatchReport::win_percent() const { return percent(wins, n_prompts); }
double MatchReport::lose_percent() const { return percent(losses, n_prompts); }
double MatchReport::tie_percent() const { return percent(ties, n_prompts); }

Outcome decide(Verdict a, std::size_t score_a, Verdict b, std::size_t score_b) {
  if (a != b) return a == Verdict::pass ? Outcome::win : Outcome::loss;
  if (score_a < score_b) return Outcome::win;
  if (score_b < score_a) return Outcome::loss;
  return Outcome::tie;
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  // splitmix64 finalizer over the combined words.
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

MatchReport head_to_head(const CausalLm& model_a, const CausalLm& model_b, std::span<const std::vector<int>> prompts,
                         const SyntheticTask& task, const SamplerConfig& cfg, std::string name_a, std::string name_b) {
  if (prompts.empty()) throw std::invalid_argument("head_to_head: no prompts");
  cfg.validate();
  MatchReport report;
  report.model_a = std::move(name_a);
  report.model_b = std::move(name_b);
  report.n_prompts = prompts.size();
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& prompt = prompts[i];
    std::vector<int> context{kBosId};
    context.insert(context.end(), prompt.begin(), prompt.end());
    SamplerConfig local = cfg;
    local.seed = derive_seed(cfg.seed, i);

    PromptVerdict pv;
    pv.prompt = prompt;
    pv.completion_a = sample(model_a, context, local);
    pv.completion_b = sample(model_b, context, local);
    pv.verdict_a = judge(task, prompt, pv.completion_a);
    pv.verdict_b = judge(task, prompt, pv.completion_b);
    pv.score_a = task_score(task, prompt, pv.completion_a);
    pv.score_b = task_score(task, prompt, pv.completion_b);
    pv.outcome = decide(pv.verdict_a, pv.score_a, pv.verdict_b, pv.score_b);
    switch (pv.outcome) {
      case Outcome::win: ++report.wins; break;
      case Outcome::loss: ++report.losses; break;
      case Outcome::tie: ++report.ties; break;
    }
    report.per_prompt.push_back(std::move(pv));
  }
  return report;
}

LayerLikelihoodProfile layer_likelihood_profile(const CausalLm& policy, const CausalLm& reference,
                                                std::span<const PreferencePair> pairs, double beta) {
  if (pairs.empty()) throw std::invalid_argument("layer_likelihood_profile: no pairs");
  if (!(policy.config() == reference.config())) {
    throw std::invalid_argument("layer_likelihood_profile: policy and reference configs differ");
  }
  const int n_layers = policy.config().n_layers;
  std::set<int> layers;
  for (int k = 1; k <= n_layers; ++k) layers.insert(k);

  LayerLikelihoodProfile profile;
  profile.n_pairs = pairs.size();
  profile.beta = beta;
  std::map<int, double> sums;

  NoGradGuard no_grad;
  constexpr std::size_t kChunk = 16;
  for (std::size_t start = 0; start < pairs.size(); start += kChunk) {
    const auto chunk = pairs.subspan(start, std::min(kChunk, pairs.size() - start));
    const PreferenceBatch batch = make_preference_batch(chunk);
    const std::size_t n = batch.n_pairs;
    const TapOutput out_p = policy.forward_with_taps(batch.tokens, layers);
    const TapOutput out_r = reference.forward_with_taps(batch.tokens, layers);
    for (int k : layers) {
      const Tensor lp = sequence_logprob(out_p.tapped_logits.at(k), batch.tokens, batch.completion_mask);
      const Tensor lr = sequence_logprob(out_r.tapped_logits.at(k), batch.tokens, batch.completion_mask);
      for (std::size_t i = 0; i < n; ++i) {
        const double dw = lp.at(i) - lr.at(i);
        const double dl = lp.at(n + i) - lr.at(n + i);
        sums[k] += -dpo_loss(dw, dl, beta);
      }
    }
  }
  for (const auto& [k, s] : sums) profile.values[k] = s / static_cast<double>(pairs.size());
  return profile;
}

nlohmann::json report_json(const MatchReport& report, const ToyTokenizer& tokenizer) {
  nlohmann::json per_prompt = nlohmann::json::array();
  for (const auto& pv : report.per_prompt) {
    per_prompt.push_back({{"prompt", tokenizer.decode(pv.prompt)},
                          {"completion_a", tokenizer.decode(pv.completion_a)},
                          {"completion_b", tokenizer.decode(pv.completion_b)},
                          {"verdict_a", pv.verdict_a == Verdict::pass ? "pass" : "fail"},
                          {"verdict_b", pv.verdict_b == Verdict::pass ? "pass" : "fail"},
                          {"score_a", pv.score_a},
                          {"score_b", pv.score_b},
                          {"outcome", outcome_name(pv.outcome)}});
  }
  return {{"model_a", report.model_a},
          {"model_b", report.model_b},
          {"n_prompts", report.n_prompts},
          {"wins", report.wins},
          {"losses", report.losses},
          {"ties", report.ties},
          {"win_rate", report.win_rate()},
          {"lose_rate", report.lose_rate()},
          {"tie_rate", report.tie_rate()},
          {"per_prompt", per_prompt}};
}

nlohmann::json profile_json(const LayerLikelihoodProfile& profile) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& [k, v] : profile.values) layers.push_back({{"layer", k}, {"value", v}});
  return {{"n_pairs", profile.n_pairs}, {"beta", profile.beta}, {"layers", layers}};
}

std::string profile_csv(const LayerLikelihoodProfile& profile) {
  std::string out = "layer,value\n";
  for (const auto& [k, v] : profile.values) out += fmt::format("{},{:.17g}\n", k, v);
  return out;
}

}  // namespace idpo
