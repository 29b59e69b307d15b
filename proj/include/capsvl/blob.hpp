#pragma once

// Raw little-endian float64 arrays with a JSON sidecar (<file>.json) holding
// the shape and any caller metadata. Used for capsule grids, attention dumps
// and precomputed feature grids.

#include <filesystem>
#include <vector>

#include "json.hpp"

#include "capsvl/capsule.hpp"

namespace capsvl {

struct Blob {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  nlohmann::json meta = nlohmann::json::object();
};

std::filesystem::path sidecar_path(const std::filesystem::path& blob);

void write_blob(const std::filesystem::path& path, const Blob& blob);
/// Throws LoadError on a missing file, a missing sidecar or a size mismatch.
Blob read_blob(const std::filesystem::path& path);

/// Packed capsule layout version written to the sidecar.
inline constexpr int kPackedOrderVersion = 1;

/// Packed [B, h*w, C*(K*K+1)] values plus h, w, C, K in the sidecar.
Blob capsule_grid_blob(const capsule::CapsuleGrid& grid);

}  // namespace capsvl
