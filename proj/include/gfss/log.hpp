#pragma once

#include <functional>
#include <iostream>
#include <string>
#include <string_view>
#include <utility>

namespace gfss::log {

enum class Level { debug, info, warning, error };

using Sink = std::function<void(Level, std::string_view)>;

inline Sink& sink() {
  static Sink s = [](Level level, std::string_view msg) {
    if (level == Level::debug) return;
    static constexpr const char* names[] = {"debug", "info", "warning", "error"};
    std::cerr << "[" << names[static_cast<int>(level)] << "] " << msg << '\n';
  };
  return s;
}

// Replaces the process-wide sink and returns the previous one.
inline Sink set_sink(Sink s) { return std::exchange(sink(), std::move(s)); }

inline void debug(std::string_view msg) { sink()(Level::debug, msg); }
inline void info(std::string_view msg) { sink()(Level::info, msg); }
inline void warn(std::string_view msg) { sink()(Level::warning, msg); }
inline void error(std::string_view msg) { sink()(Level::error, msg); }

// Installs a sink for the lifetime of the guard.
class ScopedSink {
 public:
  explicit ScopedSink(Sink s) : previous_(set_sink(std::move(s))) {}
  ~ScopedSink() { set_sink(std::move(previous_)); }
  ScopedSink(const ScopedSink&) = delete;
  ScopedSink& operator=(const ScopedSink&) = delete;

 private:
  Sink previous_;
};

}  // namespace gfss::log
