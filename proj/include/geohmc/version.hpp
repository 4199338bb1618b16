#pragma once

namespace geohmc {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace geohmc
