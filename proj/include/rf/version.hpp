#pragma once

#include <cstdint>
#include <string>

namespace rf {

inline constexpr const char* kVersion = "0.1.0";

// "# config_hash=<hex> seed=<n> version=<v>", the first line of every CSV artifact.
std::string artifact_header(const std::string& config_text, std::uint64_t seed);
std::string config_hash(const std::string& config_text);

}  // namespace rf
