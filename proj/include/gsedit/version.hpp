#pragma once

namespace gsedit {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace gsedit
