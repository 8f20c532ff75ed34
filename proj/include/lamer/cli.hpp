// SPDX-License-Identifier: Apache-2.0
#pragma once

// Command-line pipeline: synth-data -> cluster -> train -> continue -> eval /
// analyze, plus params and rerun. Exit codes are a stable contract.

#include <string>
#include <vector>

#include <json.hpp>

namespace lamer::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

/// Runs one command in-process. `args` excludes the program name.
int run(const std::vector<std::string>& args);

/// The synth-data spec used when no --spec file is given.
nlohmann::json default_synth_spec();

}  // namespace lamer::cli
