#pragma once

// Full capsule-interleaved two-stream model: stem -> capsules -> text and
// visual encoders -> co-attention -> pooling -> heads.

#include <cstdint>
#include <optional>
#include <string>

#include "json.hpp"

#include "capsvl/capsule.hpp"
#include "capsvl/cross.hpp"
#include "capsvl/encoder.hpp"
#include "capsvl/nn.hpp"
#include "capsvl/stem.hpp"

namespace capsvl {

/// Training stage. Pretrain1 stops at the encoders; the other two run the
/// co-attention module and pool after it.
enum class Stage { Pretrain1, Pretrain2, Finetune };

std::string to_string(Stage s);
Stage parse_stage(const std::string& s);

struct ModelConfig {
  encoder::EncoderConfig encoder;
  std::size_t cross_layers = 2;
  std::size_t capsules = 16;
  std::size_t pose_size = 4;
  std::size_t primary_kernel = 3;
  capsule::RoutingConfig routing;
  std::size_t grid_h = 7, grid_w = 7;
  data::StemConfig stem;
  std::size_t vocab_size = 64;
  std::size_t answer_count = 1000;
  std::size_t vqa_hidden = 1536;
  std::uint64_t seed = 1234;

  /// Layer counts and sizes used in the published system.
  static ModelConfig full_scale();
  /// CPU-tractable configuration for the synthetic pipeline.
  static ModelConfig desk();
  /// Small configuration for finite-difference checks.
  static ModelConfig toy();

  std::size_t cells() const { return grid_h * grid_w; }
  std::size_t model_dim() const { return encoder.model_dim; }
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct ForwardOutputs {
  encoder::TextLayerFeatures text;
  capsule::CapsuleGrid grid;
  encoder::VisualLayerFeatures visual;
  std::optional<cross::CrossModalFeatures> cross;
  cross::PooledFeature pooled;
  /// Token features the MLM head reads: encoder output in stage 1,
  /// cross-attended text afterwards.
  ag::Tensor mlm_features;
};

class CapsVLModel {
 public:
  explicit CapsVLModel(const ModelConfig& cfg);
  CapsVLModel(const CapsVLModel&) = delete;
  CapsVLModel& operator=(const CapsVLModel&) = delete;

  /// images: raster [B,H,W,c] or precomputed features [B,h,w,d1].
  ForwardOutputs forward(const ag::Tensor& images, const encoder::TextBatch& text, Stage stage,
                         const nn::ForwardContext& ctx, capsule::RoutingTrace* trace = nullptr) const;

  /// Capsule encodings only (one routing pass), for activation analysis.
  capsule::CapsuleGrid encode_capsules(const ag::Tensor& images) const;

  const ModelConfig& config() const { return cfg_; }
  nn::ParameterStore& params() { return store_; }
  const nn::ParameterStore& params() const { return store_; }

  const data::FeatureStem& stem() const { return stem_; }
  const capsule::CapsuleEncoder& capsules() const { return capsules_; }
  capsule::CapsuleEncoder& capsules() { return capsules_; }
  const encoder::TextEncoder& text_encoder() const { return text_; }
  const encoder::SelectionHead& selection() const { return selection_; }
  const encoder::VisualEncoder& visual_encoder() const { return visual_; }
  const cross::CrossAttentionModule& cross_module() const { return cross_; }
  const cross::Pooler& pooler() const { return pooler_; }
  const cross::MlmHead& mlm_head() const { return mlm_; }
  const cross::ItmHead& itm_head() const { return itm_; }
  const cross::VqaHead& vqa_head() const { return vqa_; }
  cross::MlmHead& mlm_head() { return mlm_; }
  cross::ItmHead& itm_head() { return itm_; }
  cross::VqaHead& vqa_head() { return vqa_; }

 private:
  ModelConfig cfg_;
  nn::ParameterStore store_;
  data::FeatureStem stem_;
  capsule::CapsuleEncoder capsules_;
  encoder::TextEncoder text_;
  encoder::SelectionHead selection_;
  encoder::VisualEncoder visual_;
  cross::CrossAttentionModule cross_;
  cross::Pooler pooler_;
  cross::MlmHead mlm_;
  cross::ItmHead itm_;
  cross::VqaHead vqa_;
};

}  // namespace capsvl
