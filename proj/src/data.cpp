// SPDX-License-Identifier: Apache-2.0

#include "idpo/data.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <random>
#include <set>

#include "idpo/log.hpp"
#include "idpo/vocab.hpp"

namespace idpo {

// ---------------------------------------------------------------------------
// Tokenizer

ToyTokenizer::ToyTokenizer() {
  glyphs_ = {std::string(kPadGlyph), std::string(kBosGlyph), std::string(kEosGlyph), std::string(kSepGlyph)};
  for (char c = '0'; c <= '7'; ++c) glyphs_.emplace_back(1, c);
  for (char c = 'A'; c <= 'Z'; ++c) glyphs_.emplace_back(1, c);
  for (char c = 'a'; c <= 'z'; ++c) glyphs_.emplace_back(1, c);
}

std::optional<int> ToyTokenizer::id_of(std::string_view glyph) const {
  const auto it = std::find(glyphs_.begin(), glyphs_.end(), glyph);
  if (it == glyphs_.end()) return std::nullopt;
  return static_cast<int>(it - glyphs_.begin());
}

std::vector<int> ToyTokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto lead = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (lead >= 0xF0) len = 4;
    else if (lead >= 0xE0) len = 3;
    else if (lead >= 0xC0) len = 2;
    const std::string_view glyph = text.substr(i, len);
    const auto id = id_of(glyph);
    if (!id) throw ParseError(fmt::format("unknown symbol '{}' at byte {}", glyph, i));
    ids.push_back(*id);
    i += len;
  }
  return ids;
}

std::string ToyTokenizer::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= vocab_size()) throw std::out_of_range(fmt::format("token id {} outside vocabulary", id));
    out += glyphs_[static_cast<std::size_t>(id)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tasks

std::string_view task_kind_name(TaskKind kind) {
  return kind == TaskKind::sort_copy ? "sort-copy" : "pattern-complete";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "sort-copy" || name == "sort_copy") return TaskKind::sort_copy;
  if (name == "pattern-complete" || name == "pattern_complete") return TaskKind::pattern_complete;
  throw std::invalid_argument(fmt::format("unknown task kind '{}'", name));
}

void SyntheticTask::validate() const {
  const ToyTokenizer tok;
  if (alphabet.size() < 2) throw std::invalid_argument("SyntheticTask.alphabet needs at least two symbols");
  for (char c : alphabet) {
    const auto id = tok.id_of(std::string(1, c));
    if (!id || *id < kFirstSymbolId) throw std::invalid_argument(fmt::format("alphabet symbol '{}' not in vocabulary", c));
  }
  if (std::set<char>(alphabet.begin(), alphabet.end()).size() != alphabet.size()) {
    throw std::invalid_argument("SyntheticTask.alphabet has duplicate symbols");
  }
  if (min_len < 2 || max_len < min_len) throw std::invalid_argument("SyntheticTask: need 2 <= min_len <= max_len");
  if (motif_min < 2 || motif_max < motif_min || max_repeats < 2) {
    throw std::invalid_argument("SyntheticTask: need 2 <= motif_min <= motif_max and max_repeats >= 2");
  }
}

namespace {

std::vector<int> alphabet_ids(const SyntheticTask& task) {
  const ToyTokenizer tok;
  std::vector<int> ids;
  for (char c : task.alphabet) ids.push_back(*tok.id_of(std::string(1, c)));
  return ids;
}

int pick(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

bool is_primitive(std::span<const int> w) {
  for (std::size_t p = 1; p < w.size(); ++p) {
    if (w.size() % p != 0) continue;
    bool periodic = true;
    for (std::size_t i = p; i < w.size() && periodic; ++i) periodic = w[i] == w[i - p];
    if (periodic) return false;
  }
  return true;
}

// Single-edit corruption of `answer` (no EOS): an adjacent swap of two
// distinct symbols or a substitution. Neighbor substitutions replace a symbol
// by one adjacent to it in the alphabet.
std::vector<int> corrupt(std::vector<int> answer, const std::vector<int>& symbols, bool neighbor,
                         std::mt19937_64& rng) {
  std::vector<std::size_t> swappable;
  for (std::size_t i = 0; i + 1 < answer.size(); ++i) {
    if (answer[i] != answer[i + 1]) swappable.push_back(i);
  }
  if (!swappable.empty() && pick(rng, 0, 1) == 0) {
    const std::size_t i = swappable[static_cast<std::size_t>(pick(rng, 0, static_cast<int>(swappable.size()) - 1))];
    std::swap(answer[i], answer[i + 1]);
    return answer;
  }
  const auto pos = static_cast<std::size_t>(pick(rng, 0, static_cast<int>(answer.size()) - 1));
  if (neighbor) {
    const auto at = static_cast<int>(std::find(symbols.begin(), symbols.end(), answer[pos]) - symbols.begin());
    const int last = static_cast<int>(symbols.size()) - 1;
    const int step = at == 0 ? 1 : at == last ? -1 : (pick(rng, 0, 1) == 0 ? -1 : 1);
    answer[pos] = symbols[static_cast<std::size_t>(at + step)];
    return answer;
  }
  int replacement = answer[pos];
  while (replacement == answer[pos]) {
    replacement = symbols[static_cast<std::size_t>(pick(rng, 0, static_cast<int>(symbols.size()) - 1))];
  }
  answer[pos] = replacement;
  return answer;
}

}  // namespace

std::optional<std::vector<int>> rule_answer(const SyntheticTask& task, std::span<const int> prompt) {
  if (prompt.size() < 2 || prompt.back() != kSepId) return std::nullopt;
  std::vector<int> body(prompt.begin(), prompt.end() - 1);
  for (int id : body) {
    if (id < kFirstSymbolId) return std::nullopt;
  }
  std::vector<int> answer;
  if (task.kind == TaskKind::sort_copy) {
    answer = body;
    std::sort(answer.begin(), answer.end());
  } else {
    std::size_t period = 0;
    for (std::size_t p = 1; 2 * p <= body.size() && period == 0; ++p) {
      if (body.size() % p != 0) continue;
      bool periodic = true;
      for (std::size_t i = p; i < body.size() && periodic; ++i) periodic = body[i] == body[i - p];
      if (periodic) period = p;
    }
    if (period == 0) return std::nullopt;
    answer.assign(body.begin(), body.begin() + static_cast<std::ptrdiff_t>(period));
  }
  answer.push_back(kEosId);
  return answer;
}

std::vector<PreferencePair> generate_pairs(const SyntheticTask& task, std::size_t n) {
  task.validate();
  if (n == 0) throw std::invalid_argument("generate_pairs: n must be >= 1");
  const std::size_t longest = task.kind == TaskKind::sort_copy
                                  ? 2 * static_cast<std::size_t>(task.max_len) + 3
                                  : static_cast<std::size_t>(task.motif_max * (task.max_repeats + 2) + 3);
  if (n > task.token_budget / longest) {
    throw std::invalid_argument(
        fmt::format("generate_pairs: {} pairs x {} tokens exceeds the budget of {}", n, longest, task.token_budget));
  }
  const std::vector<int> symbols = alphabet_ids(task);
  std::mt19937_64 rng(task.seed);
  const auto draw = [&] { return symbols[static_cast<std::size_t>(pick(rng, 0, static_cast<int>(symbols.size()) - 1))]; };

  std::vector<PreferencePair> pairs;
  pairs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    PreferencePair pair;
    std::vector<int> answer;
    if (task.kind == TaskKind::sort_copy) {
      const int len = pick(rng, task.min_len, task.max_len);
      for (int j = 0; j < len; ++j) pair.prompt.push_back(draw());
      answer = pair.prompt;
      std::sort(answer.begin(), answer.end());
    } else {
      const int len = pick(rng, task.motif_min, task.motif_max);
      do {
        answer.clear();
        for (int j = 0; j < len; ++j) answer.push_back(draw());
      } while (!is_primitive(answer));
      const int repeats = pick(rng, 2, task.max_repeats);
      for (int r = 0; r < repeats; ++r) pair.prompt.insert(pair.prompt.end(), answer.begin(), answer.end());
    }
    pair.prompt.push_back(kSepId);
    pair.rejected = corrupt(answer, symbols, task.neighbor_substitution, rng);
    pair.chosen = std::move(answer);
    pair.chosen.push_back(kEosId);
    pair.rejected.push_back(kEosId);
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// JSONL

std::vector<PreferencePair> load_preference_jsonl(const std::filesystem::path& path, const ToyTokenizer& tokenizer,
                                                  int max_seq_len, std::size_t* dropped) {
  std::ifstream in(path);
  if (!in) throw ParseError(fmt::format("cannot open {}", path.string()));
  std::vector<PreferencePair> pairs;
  std::size_t n_dropped = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    PreferencePair pair;
    try {
      const auto obj = nlohmann::json::parse(line);
      if (!obj.is_object()) throw ParseError("expected a JSON object");
      const auto field = [&](const char* name) {
        if (!obj.contains(name) || !obj.at(name).is_string()) {
          throw ParseError(fmt::format("missing string field \"{}\"", name));
        }
        return tokenizer.encode(obj.at(name).get<std::string>());
      };
      pair.prompt = field("prompt");
      pair.chosen = field("chosen");
      pair.rejected = field("rejected");
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(fmt::format("{}:{}: malformed JSON: {}", path.string(), line_no, e.what()));
    } catch (const ParseError& e) {
      throw ParseError(fmt::format("{}:{}: {}", path.string(), line_no, e.what()));
    }
    if (pair.chosen.empty() || pair.rejected.empty()) {
      throw ParseError(fmt::format("{}:{}: empty completion", path.string(), line_no));
    }
    const std::size_t longest = 1 + pair.prompt.size() + std::max(pair.chosen.size(), pair.rejected.size());
    if (longest > static_cast<std::size_t>(max_seq_len)) {
      ++n_dropped;
      logging::warn(fmt::format("{}:{}: pair needs {} tokens, exceeds max_seq_len {}; dropped", path.string(), line_no,
                            longest, max_seq_len));
      continue;
    }
    pairs.push_back(std::move(pair));
  }
  if (line_no == 0) logging::warn(fmt::format("{}: empty preference file", path.string()));
  if (dropped) *dropped = n_dropped;
  return pairs;
}

void save_preference_jsonl(const std::filesystem::path& path, std::span<const PreferencePair> pairs,
                           const ToyTokenizer& tokenizer) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error(fmt::format("cannot open {} for writing", path.string()));
  for (const auto& p : pairs) {
    nlohmann::json obj;
    obj["prompt"] = tokenizer.decode(p.prompt);
    obj["chosen"] = tokenizer.decode(p.chosen);
    obj["rejected"] = tokenizer.decode(p.rejected);
    out << obj.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Splits

Split split_by_test_count(std::span<const PreferencePair> pairs, std::size_t test_count, std::uint64_t seed) {
  if (test_count == 0 || test_count >= pairs.size()) {
    throw std::invalid_argument(
        fmt::format("split: cannot take {} test pairs from {} (need at least one left for training)", test_count,
                    pairs.size()));
  }
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::uint8_t> is_test(pairs.size(), 0);
  for (std::size_t i = 0; i < test_count; ++i) is_test[order[i]] = 1;
  Split out;
  for (std::size_t i = 0; i < pairs.size(); ++i) (is_test[i] ? out.test : out.train).push_back(pairs[i]);
  return out;
}

Split split_by_fraction(std::span<const PreferencePair> pairs, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument(fmt::format("split: train fraction {} outside (0, 1)", train_fraction));
  }
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(pairs.size())));
  if (n_train == 0 || n_train >= pairs.size()) throw std::invalid_argument("split: fraction leaves an empty side");
  return split_by_test_count(pairs, pairs.size() - n_train, seed);
}

std::vector<std::vector<int>> sft_sequences(std::span<const PreferencePair> pairs, double rejected_fraction,
                                            std::uint64_t seed) {
  if (!(rejected_fraction >= 0.0 && rejected_fraction <= 1.0)) {
    throw std::invalid_argument("sft_sequences: rejected_fraction outside [0, 1]");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::vector<int>> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    out.push_back(sequence_tokens(p.prompt, u < rejected_fraction ? p.rejected : p.chosen));
  }
  return out;
}

}  // namespace idpo
