#pragma once

// RFCK checkpoint container.
//
// Layout (little-endian):
//   "RFCK" u32 version
//   str config_text  str identity  u64 step
//   u32 n_rng { str name, str state }
//   u8 precision (32 | 64)
//   u32 n_params { str name, u32 rank, u64 dims[rank], f32|f64 data }
//   u64 adam_t, then the first and second moments in the same tensor layout
//   str data_spec, u32 width, f64 mean[width], f64 std[width]

#include "rf/autodiff.hpp"
#include "rf/synth_data.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace rf::ckpt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class Precision : std::uint8_t { F32 = 32, F64 = 64 };

struct NamedTensor {
    std::string name;
    ad::Shape shape;
    std::vector<double> data;
};

struct Checkpoint {
    std::string config_text;  // full run configuration snapshot
    std::string identity;     // what must match for a resume
    std::uint64_t step = 0;
    std::vector<std::pair<std::string, std::string>> rng_states;
    Precision precision = Precision::F64;
    std::vector<NamedTensor> params;
    std::uint64_t adam_t = 0;
    std::vector<NamedTensor> adam_m, adam_v;
    std::string data_spec;
    data::Stats stats;

    const std::string& rng_state(const std::string& name) const;
};

std::vector<std::uint8_t> encode(const Checkpoint& c);
Checkpoint decode(std::vector<std::uint8_t> bytes);
void save(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load(const std::filesystem::path& path);

std::vector<NamedTensor> capture(const std::vector<std::pair<std::string, ad::Array>>& named);
// Copies values into existing leaves, matching by name and shape.
void restore(const std::vector<std::pair<std::string, ad::Array>>& named, const std::vector<NamedTensor>& tensors);

}  // namespace rf::ckpt
