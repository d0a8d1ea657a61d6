// SPDX-License-Identifier: Apache-2.0

#include "idpo/log.hpp"

#include <atomic>
#include <cstdio>
#include <fmt/format.h>

namespace idpo::logging {

namespace {
std::atomic<std::size_t> g_warnings{0};
std::atomic<bool> g_quiet{false};
}  // namespace

void info(std::string_view message) {
  if (!g_quiet) fmt::print(stderr, "[info] {}\n", message);
}

void warn(std::string_view message) {
  ++g_warnings;
  if (!g_quiet) fmt::print(stderr, "[warn] {}\n", message);
}

std::size_t warning_count() { return g_warnings.load(); }

void set_quiet(bool quiet) { g_quiet = quiet; }

}  // namespace idpo::logging
