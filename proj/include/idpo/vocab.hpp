// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace idpo {

// Reserved ids shared by the tokenizer, batching and sampling.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kFirstSymbolId = 4;

}  // namespace idpo
