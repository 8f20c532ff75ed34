// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>

#include <spdlog/spdlog.h>

namespace lamer {

/// Shared stderr logger. Level comes from LAMER_LOG (error|info|debug),
/// defaulting to info.
spdlog::logger& log();

/// Re-reads LAMER_LOG.
void configure_log_from_env();

}  // namespace lamer
