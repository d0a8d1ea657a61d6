// SPDX-License-Identifier: Apache-2.0
//
// Toy character tokenizer, rule-based synthetic preference tasks, and the
// preference JSONL format ({"prompt", "chosen", "rejected"} per line).

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "idpo/losses.hpp"

namespace idpo {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 64 ids: PAD, BOS, EOS, SEP, then the 60 symbols 0-7, A-Z, a-z in ASCII
// order, so ascending id order is ascending character order.
class ToyTokenizer {
 public:
  ToyTokenizer();

  static constexpr std::string_view kPadGlyph = "␀";
  static constexpr std::string_view kBosGlyph = "␂";
  static constexpr std::string_view kEosGlyph = "∎";
  static constexpr std::string_view kSepGlyph = "␟";

  int vocab_size() const { return static_cast<int>(glyphs_.size()); }
  // Throws ParseError naming the first out-of-vocabulary symbol.
  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;
  std::optional<int> id_of(std::string_view glyph) const;
  const std::string& glyph(int id) const { return glyphs_.at(static_cast<std::size_t>(id)); }

 private:
  std::vector<std::string> glyphs_;
};

enum class TaskKind { sort_copy, pattern_complete };

std::string_view task_kind_name(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

struct SyntheticTask {
  TaskKind kind = TaskKind::sort_copy;
  std::string alphabet = "abcdefghijklmnop";
  // sort-copy: prompt length range
  int min_len = 4;
  int max_len = 8;
  // pattern-complete: motif length range and maximum repetition count (>= 2)
  int motif_min = 2;
  int motif_max = 4;
  int max_repeats = 3;
  // Substitutions use an alphabet neighbor of the replaced symbol instead of
  // an arbitrary other symbol.
  bool neighbor_substitution = true;
  std::uint64_t seed = 0;
  // Upper bound on n * (longest possible pair) tokens per generate call.
  std::size_t token_budget = 50'000'000;

  void validate() const;
  bool operator==(const SyntheticTask&) const = default;
};

// Rule-correct completion (including EOS) for a prompt, or nullopt if the
// prompt is not well formed for the task.
std::optional<std::vector<int>> rule_answer(const SyntheticTask& task, std::span<const int> prompt);

std::vector<PreferencePair> generate_pairs(const SyntheticTask& task, std::size_t n);

// Pairs whose BOS+prompt+completion exceeds max_seq_len are dropped with a
// warning; `dropped`, when given, receives the count.
std::vector<PreferencePair> load_preference_jsonl(const std::filesystem::path& path, const ToyTokenizer& tokenizer,
                                                  int max_seq_len, std::size_t* dropped = nullptr);
void save_preference_jsonl(const std::filesystem::path& path, std::span<const PreferencePair> pairs,
                           const ToyTokenizer& tokenizer);

inline constexpr std::size_t kDefaultTestSize = 40;

struct Split {
  std::vector<PreferencePair> train;
  std::vector<PreferencePair> test;
};

// Seeded, disjoint; each side keeps the input order.
Split split_by_fraction(std::span<const PreferencePair> pairs, double train_fraction, std::uint64_t seed);
Split split_by_test_count(std::span<const PreferencePair> pairs, std::size_t test_count, std::uint64_t seed);

// Supervised sequences (BOS + prompt + completion) for building the SFT
// starting point. rejected_fraction of the pairs contribute their rejected
// completion instead of the chosen one (seeded), which leaves room for the
// preference stage to improve on the SFT model.
std::vector<std::vector<int>> sft_sequences(std::span<const PreferencePair> pairs, double rejected_fraction,
                                            std::uint64_t seed);

}  // namespace idpo
