#pragma once

namespace pace {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace pace
