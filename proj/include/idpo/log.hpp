// SPDX-License-Identifier: Apache-2.0
//
// Minimal stderr logging with a process-wide warning counter, so callers
// (and tests) can tell that a recoverable condition was flagged.

#pragma once

#include <cstddef>
#include <string_view>

namespace idpo::logging {

void info(std::string_view message);
void warn(std::string_view message);

std::size_t warning_count();
// Suppresses printing; counting continues.
void set_quiet(bool quiet);

}  // namespace idpo::logging
