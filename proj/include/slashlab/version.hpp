#pragma once

namespace slashlab {
inline constexpr const char* kToolName = "slashlab";
inline constexpr const char* kToolVersion = "0.1.0";
}  // namespace slashlab
