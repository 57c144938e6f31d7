#pragma once

// Minimal leveled logging to stderr. The level comes from ABCTREE_LOG_LEVEL
// (error, warn, info, debug; default warn).

#include <cstdlib>
#include <iostream>
#include <string>
#include <string_view>

namespace abctree::log {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

inline Level level_from_env() {
    const char* v = std::getenv("ABCTREE_LOG_LEVEL");
    if (!v) return Level::warn;
    const std::string_view s(v);
    if (s == "error") return Level::error;
    if (s == "info") return Level::info;
    if (s == "debug") return Level::debug;
    return Level::warn;
}

inline Level& current_level() {
    static Level level = level_from_env();
    return level;
}

inline void write(Level lvl, std::string_view msg) {
    if (static_cast<int>(lvl) > static_cast<int>(current_level())) return;
    static constexpr const char* names[] = {"error", "warn", "info", "debug"};
    std::cerr << "[abctree " << names[static_cast<int>(lvl)] << "] " << msg << '\n';
}

inline void error(std::string_view msg) { write(Level::error, msg); }
inline void warn(std::string_view msg) { write(Level::warn, msg); }
inline void info(std::string_view msg) { write(Level::info, msg); }
inline void debug(std::string_view msg) { write(Level::debug, msg); }

}  // namespace abctree::log
