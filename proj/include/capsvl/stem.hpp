#pragma once

#include <cstddef>
#include <string>

#include "capsvl/capsule.hpp"
#include "capsvl/nn.hpp"

namespace capsvl::data {

/// Where grid features come from: a trainable patch stem over RGB rasters,
/// or precomputed external feature grids (e.g. 7x7x2048 backbone outputs).
enum class StemKind { Raster, Precomputed };

std::string to_string(StemKind k);
StemKind parse_stem_kind(const std::string& s);

struct StemConfig {
  StemKind kind = StemKind::Raster;
  std::size_t image_size = 56;  // raster side in pixels
  std::size_t channels = 3;
  std::size_t source_dim = 64;  // d1
};

/// Produces the projected embedding X' [B, h, w, d]. Rasters are cut into
/// h x w patches, embedded to d1 channels, then a 1x1 conv projects to d.
class FeatureStem {
 public:
  FeatureStem(nn::ParameterStore& store, const StemConfig& cfg, std::size_t grid_h, std::size_t grid_w,
              std::size_t model_dim);

  /// Raster input [B, H, W, channels] or feature input [B, h, w, d1].
  /// Throws ConfigError on shape mismatch.
  capsule::ImageEmbedding operator()(const ag::Tensor& input) const;

  std::size_t patch_size() const { return patch_; }
  const StemConfig& config() const { return cfg_; }

 private:
  StemConfig cfg_;
  std::size_t grid_h_, grid_w_, patch_ = 0;
  nn::Linear patch_embed_;
  nn::Linear projection_;
};

}  // namespace capsvl::data
