// SPDX-License-Identifier: Apache-2.0
#include "lamer/log.hpp"

#include <cstdlib>
#include <string>

#include <spdlog/sinks/stdout_sinks.h>

namespace lamer {

namespace {

spdlog::level::level_enum level_from_env() {
    const char* env = std::getenv("LAMER_LOG");
    const std::string v = env ? env : "info";
    if (v == "error") return spdlog::level::err;
    if (v == "debug") return spdlog::level::debug;
    return spdlog::level::info;
}

std::shared_ptr<spdlog::logger> make_logger() {
    auto logger = std::make_shared<spdlog::logger>("lamer", std::make_shared<spdlog::sinks::stderr_sink_mt>());
    logger->set_pattern("[%l] %v");
    logger->set_level(level_from_env());
    return logger;
}

}  // namespace

spdlog::logger& log() {
    static std::shared_ptr<spdlog::logger> instance = make_logger();
    return *instance;
}

void configure_log_from_env() { log().set_level(level_from_env()); }

}  // namespace lamer
