#pragma once

namespace ccadepth {
inline constexpr const char* kVersion = "0.1.0";
}
