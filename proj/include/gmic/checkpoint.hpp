// Binary parameter checkpoints.
//
// Layout: "GMICCKPT", u32 version, u32 entry count, then per entry
// u32 name length, name bytes, u32 rank, i64 dims[rank], f32 payload.
// All integers and floats are little-endian.
#pragma once

#include "gmic/networks.hpp"

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace gmic {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using StateDict = std::vector<std::pair<std::string, Tensor<float>>>;

void write_checkpoint(const std::filesystem::path& path, const StateDict& state);
/// Throws ConfigError on a bad tag, version or truncated file.
StateDict read_checkpoint(const std::filesystem::path& path);

/// Parameters followed by "<norm>.running_mean" / "<norm>.running_var".
template <typename Scalar>
StateDict state_dict(const NamedParameters<Scalar>& params);

/// Every parameter and running statistic must be present with a matching
/// shape; extra entries are ignored.
template <typename Scalar>
void load_state_dict(NamedParameters<Scalar>& params, const StateDict& state);

const Tensor<float>* find_entry(const StateDict& state, const std::string& name);

}  // namespace gmic
