#include "rf/version.hpp"

#include "rf/kvtext.hpp"

namespace rf {

std::string config_hash(const std::string& config_text) { return kv::hex(kv::hash(config_text)); }

std::string artifact_header(const std::string& config_text, std::uint64_t seed) {
    return "# config_hash=" + config_hash(config_text) + " seed=" + std::to_string(seed) + " version=" + kVersion;
}

}  // namespace rf
