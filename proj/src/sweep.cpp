// SPDX-License-Identifier: Apache-2.0

#include "idpo/sweep.hpp"

#include <charconv>
#include <fmt/format.h>
#include <fmt/ranges.h>
#include <stdexcept>

namespace idpo {

std::vector<std::vector<int>> parse_k_sets(std::string_view text) {
  std::vector<std::vector<int>> sets;
  auto parse_set = [](std::string_view part) {
    std::vector<int> set;
    std::size_t pos = 0;
    while (pos <= part.size()) {
      const std::size_t comma = std::min(part.find(',', pos), part.size());
      std::string_view item = part.substr(pos, comma - pos);
      while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
      while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
      int value = 0;
      const auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), value);
      if (item.empty() || ec != std::errc{} || end != item.data() + item.size()) {
        throw std::invalid_argument(fmt::format("bad layer index '{}' in layer set '{}'", item, part));
      }
      set.push_back(value);
      pos = comma + 1;
    }
    return set;
  };
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t semi = std::min(text.find(';', pos), text.size());
    const std::string_view part = text.substr(pos, semi - pos);
    if (part.empty()) throw std::invalid_argument(fmt::format("empty layer set in '{}'", text));
    sets.push_back(parse_set(part));
    pos = semi + 1;
  }
  if (sets.empty()) throw std::invalid_argument("no layer sets given");
  return sets;
}

SweepTable layer_sweep(const TransformerModel& sft, std::span<const PreferencePair> train_pairs,
                       std::span<const std::vector<int>> eval_prompts,
                       std::span<const std::vector<int>> candidate_layer_sets, const SweepSettings& settings) {
  const int n_layers = sft.config().n_layers;
  for (const auto& layers : candidate_layer_sets) {
    DpoConfig cfg = settings.dpo;
    cfg.layers = layers;
    cfg.validate(n_layers);
  }
  const std::vector<PreferencePair> data(train_pairs.begin(), train_pairs.end());

  std::optional<AdaptedModel> vanilla;
  if (settings.compare_with_vanilla) {
    DpoConfig cfg = settings.dpo;
    cfg.layers.clear();
    cfg.gamma = 1.0;
    vanilla = train_dpo(sft, data, cfg, settings.lora, settings.train);
  }

  SweepTable table;
  for (std::size_t i = 0; i < candidate_layer_sets.size(); ++i) {
    DpoConfig cfg = settings.dpo;
    cfg.layers = candidate_layer_sets[i];
    const AdaptedModel model = train_dpo(sft, data, cfg, settings.lora, settings.train);
    SweepRow row;
    row.exp_id = fmt::format("id{}", i + 1);
    row.layers = cfg.layers;
    row.vs_sft = head_to_head(model, sft, eval_prompts, settings.task, settings.sampler, row.exp_id, "sft");
    if (vanilla) {
      row.vs_vanilla = head_to_head(model, *vanilla, eval_prompts, settings.task, settings.sampler, row.exp_id, "dpo");
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

namespace {

nlohmann::json summary(const MatchReport& r) {
  return {{"opponent", r.model_b}, {"n_prompts", r.n_prompts}, {"wins", r.wins},
          {"losses", r.losses},    {"ties", r.ties},           {"win_rate", r.win_rate()},
          {"lose_rate", r.lose_rate()}, {"tie_rate", r.tie_rate()}};
}

}  // namespace

nlohmann::json sweep_json(const SweepTable& table) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : table.rows) {
    nlohmann::json j{{"exp_id", row.exp_id}, {"layers", row.layers}, {"vs_sft", summary(row.vs_sft)}};
    if (row.vs_vanilla) j["vs_dpo"] = summary(*row.vs_vanilla);
    rows.push_back(std::move(j));
  }
  return {{"rows", rows}};
}

std::string sweep_text(const SweepTable& table) {
  std::string out = fmt::format("{:<8} {:<12} {:>9} {:>10} {:>6}\n", "Exp ID", "K", "Win rate", "Lose rate", "Tie");
  for (const auto& row : table.rows) {
    out += fmt::format("{:<8} {:<12} {:>9.1f} {:>10.1f} {:>6.1f}\n", row.exp_id, fmt::format("{}", fmt::join(row.layers, ",")),
                       row.vs_sft.win_percent(), row.vs_sft.lose_percent(), row.vs_sft.tie_percent());
  }
  return out;
}

std::string sweep_csv(const SweepTable& table) {
  std::string out = "exp_id,layers,opponent,wins,losses,ties,win_rate,lose_rate,tie_rate\n";
  auto line = [&](const SweepRow& row, const MatchReport& r) {
    out += fmt::format("{},\"{}\",{},{},{},{},{:.17g},{:.17g},{:.17g}\n", row.exp_id, fmt::join(row.layers, ","),
                       r.model_b, r.wins, r.losses, r.ties, r.win_rate(), r.lose_rate(), r.tie_rate());
  };
  for (const auto& row : table.rows) {
    line(row, row.vs_sft);
    if (row.vs_vanilla) line(row, *row.vs_vanilla);
  }
  return out;
}

}  // namespace idpo
