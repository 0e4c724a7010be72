#pragma once

// Thin logging front end. The backend (spdlog) lives in its own translation
// unit because libtorch ships an fmt version that clashes with the system one.

#include <sstream>
#include <string>

namespace s2i::log {

enum class Level { kDebug, kInfo, kWarn, kError, kOff };

void write(Level level, const std::string& msg);
void set_level(Level level);
Level parse_level(const std::string& name);

template <typename... Args>
std::string cat(const Args&... args) {
  std::ostringstream os;
  os.precision(5);
  (os << ... << args);
  return os.str();
}

template <typename... Args>
void debug(const Args&... args) { write(Level::kDebug, cat(args...)); }
template <typename... Args>
void info(const Args&... args) { write(Level::kInfo, cat(args...)); }
template <typename... Args>
void warn(const Args&... args) { write(Level::kWarn, cat(args...)); }
template <typename... Args>
void error(const Args&... args) { write(Level::kError, cat(args...)); }

}  // namespace s2i::log
