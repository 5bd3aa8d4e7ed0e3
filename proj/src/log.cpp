#include "bicanet/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace bicanet::log {
namespace {

std::atomic<Level> g_level{Level::kInfo};
std::mutex g_mutex;

void emit(Level lvl, const char* tag, std::string_view message) {
  if (lvl < g_level.load()) return;
  std::lock_guard lock(g_mutex);
  std::clog << "[" << tag << "] " << message << '\n';
}

}  // namespace

void set_level(Level level) { g_level.store(level); }
Level level() { return g_level.load(); }

void info(std::string_view message) { emit(Level::kInfo, "info", message); }
void warn(std::string_view message) { emit(Level::kWarn, "warn", message); }
void error(std::string_view message) { emit(Level::kError, "error", message); }

}  // namespace bicanet::log
