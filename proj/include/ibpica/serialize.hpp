#pragma once

#include <string>
#include <string_view>

#include "ibpica/model.hpp"

namespace ibpica {

/// Model container: magic "IBPICA1\0", u32 D, K, J, u32 array count, then
/// named float64 arrays (u32 name length, name, u64 element count, data), all
/// little-endian and row-major. The sample count N is implied by the source
/// arrays. Round trips are bit-exact.
std::string serialize_model(const ModelState& state);
ModelState deserialize_model(std::string_view bytes);

void save_model(const ModelState& state, const std::string& path);
ModelState load_model(const std::string& path);

}  // namespace ibpica
