#include "capsvl/stem.hpp"

#include "capsvl/errors.hpp"

namespace capsvl::data {

std::string to_string(StemKind k) { return k == StemKind::Raster ? "raster" : "precomputed"; }

StemKind parse_stem_kind(const std::string& s) {
  if (s == "raster") return StemKind::Raster;
  if (s == "precomputed") return StemKind::Precomputed;
  throw ConfigError("unknown stem kind '" + s + "'");
}

FeatureStem::FeatureStem(nn::ParameterStore& store, const StemConfig& cfg, std::size_t grid_h, std::size_t grid_w,
                         std::size_t model_dim)
    : cfg_(cfg), grid_h_(grid_h), grid_w_(grid_w) {
  if (cfg.kind == StemKind::Raster) {
    if (grid_h != grid_w || cfg.image_size % grid_h != 0)
      throw ConfigError("raster of " + std::to_string(cfg.image_size) + " px does not divide into a " +
                        std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
    patch_ = cfg.image_size / grid_h;
    patch_embed_ = nn::Linear(store, "stem.patch", patch_ * patch_ * cfg.channels, cfg.source_dim,
                              nn::ParamGroup::Encoder, nn::fan_in_std(patch_ * patch_ * cfg.channels));
  }
  projection_ = nn::Linear(store, "stem.project", cfg.source_dim, model_dim, nn::ParamGroup::Encoder,
                           nn::fan_in_std(cfg.source_dim));
}

capsule::ImageEmbedding FeatureStem::operator()(const ag::Tensor& input) const {
  if (input.rank() != 4) throw ConfigError("stem input must be rank 4, got " + ag::shape_str(input.shape()));
  ag::Tensor features;
  if (cfg_.kind == StemKind::Raster) {
    if (input.dim(1) != cfg_.image_size || input.dim(2) != cfg_.image_size || input.dim(3) != cfg_.channels)
      throw ConfigError("raster " + ag::shape_str(input.shape()) + " does not match configured " +
                        std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.image_size) + "x" +
                        std::to_string(cfg_.channels));
    features = ag::gelu(patch_embed_(ag::patchify(input, patch_)));
  } else {
    if (input.dim(1) != grid_h_ || input.dim(2) != grid_w_ || input.dim(3) != cfg_.source_dim)
      throw ConfigError("feature grid " + ag::shape_str(input.shape()) + " does not match configured " +
                        std::to_string(grid_h_) + "x" + std::to_string(grid_w_) + "x" +
                        std::to_string(cfg_.source_dim));
    features = input;
  }
  return capsule::ImageEmbedding{projection_(features), cfg_.source_dim};
}

}  // namespace capsvl::data
