#pragma once

// Minimal leveled logging to stderr.

#include <atomic>
#include <iostream>
#include <mutex>
#include <string>

namespace phc::log {

enum class Level { kDebug = 0, kInfo = 1, kWarning = 2, kError = 3, kSilent = 4 };

inline std::atomic<int>& threshold() {
  static std::atomic<int> level{static_cast<int>(Level::kWarning)};
  return level;
}

inline void set_level(Level l) { threshold().store(static_cast<int>(l)); }

inline void write(Level l, const std::string& msg) {
  if (static_cast<int>(l) < threshold().load()) return;
  static std::mutex mu;
  static const char* names[] = {"debug", "info", "warning", "error"};
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << '[' << names[static_cast<int>(l)] << "] " << msg << '\n';
}

inline void debug(const std::string& msg) { write(Level::kDebug, msg); }
inline void info(const std::string& msg) { write(Level::kInfo, msg); }
inline void warning(const std::string& msg) { write(Level::kWarning, msg); }
inline void error(const std::string& msg) { write(Level::kError, msg); }

}  // namespace phc::log
