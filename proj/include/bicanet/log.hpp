#pragma once

#include <string_view>

namespace bicanet::log {

enum class Level { kDebug = 0, kInfo = 1, kWarn = 2, kError = 3, kOff = 4 };

void set_level(Level level);
Level level();

void info(std::string_view message);
void warn(std::string_view message);
void error(std::string_view message);

}  // namespace bicanet::log
