#pragma once

// Capsule encodings: primary capsules from an image embedding, one pass of
// EM routing, text-guided capsule selection and token assembly.

#include <atomic>
#include <cstddef>
#include <vector>

#include "capsvl/nn.hpp"
#include "capsvl/tensor.hpp"

namespace capsvl::capsule {

/// Projected grid features X' of shape [B, h, w, d]; source_dim is the raw
/// feature channel count d1 the projection started from.
struct ImageEmbedding {
  ag::Tensor grid;
  std::size_t source_dim = 0;

  std::size_t batch() const { return grid.dim(0); }
  std::size_t height() const { return grid.dim(1); }
  std::size_t width() const { return grid.dim(2); }
  std::size_t model_dim() const { return grid.dim(3); }
  /// Throws InputError on an empty or non-finite grid.
  void validate() const;
};

/// Poses [B, h, w, C, K*K] and activations [B, h, w, C, 1].
///
/// The packed form lays out each capsule as its row-major pose followed by
/// its activation, C * (K*K + 1) values per cell.
struct CapsuleTensor {
  ag::Tensor poses;
  ag::Tensor activations;
  std::size_t pose_size = 0;  // K

  std::size_t batch() const { return poses.dim(0); }
  std::size_t height() const { return poses.dim(1); }
  std::size_t width() const { return poses.dim(2); }
  std::size_t capsules() const { return poses.dim(3); }
  std::size_t cells() const { return height() * width(); }
  std::size_t packed_dim() const { return capsules() * (pose_size * pose_size + 1); }

  /// [B, h*w, packed_dim]
  ag::Tensor packed() const;
};

struct PrimaryCapsules : CapsuleTensor {};
struct CapsuleGrid : CapsuleTensor {};

constexpr std::size_t packed_dim(std::size_t capsules, std::size_t pose_size) {
  return capsules * (pose_size * pose_size + 1);
}

struct RoutingConfig {
  std::size_t iterations = 3;
  std::vector<double> inverse_temperature{1.0, 2.0, 3.0};
  double epsilon = 1e-6;

  /// Throws ConfigError unless iterations >= 1, the schedule has one
  /// positive entry per iteration and epsilon > 0.
  void validate() const;
};

/// Learned routing state: vote transforms shared across cells plus the
/// per-output-capsule cost offsets.
struct RoutingParams {
  ag::Tensor transforms;  // [C_in, C_out, K, K]
  ag::Tensor beta_a;      // [C_out]
  ag::Tensor beta_u;      // [C_out]
};

/// Routing coefficients per iteration, each [N, C_in, C_out] with N = B*h*w.
/// Entry 0 is the uniform initialisation.
struct RoutingTrace {
  std::vector<std::vector<double>> coefficients;
  std::size_t cells = 0, inputs = 0, outputs = 0;
};

/// Softmax capsule-selection probabilities [B, C] for one visual layer.
struct CapsuleMask {
  ag::Tensor probabilities;
  int source_layer = 0;

  std::size_t capsules() const { return probabilities.dim(-1); }
};

CapsuleMask mask_from_logits(const ag::Tensor& logits, int source_layer);

/// Visual tokens [B, 1 + h*w, d]; position 0 is [IMG].
struct VisualTokenSequence {
  ag::Tensor tokens;
};

/// Conv (kernel x kernel, same padding) producing C*(K*K+1) channels per
/// cell, split into poses and logistic activations.
PrimaryCapsules make_primary_capsules(const ImageEmbedding& embedding, const nn::Linear& conv, std::size_t kernel,
                                      std::size_t capsules, std::size_t pose_size);

/// EM routing between the C input and C output capsules of every cell.
/// Throws NumericalError naming the iteration if a non-finite value appears.
CapsuleGrid em_route(const PrimaryCapsules& primary, const RoutingParams& params, const RoutingConfig& cfg,
                     RoutingTrace* trace = nullptr);

/// Scales capsule c's packed block at every cell by mask[c].
CapsuleGrid select_capsules(const CapsuleGrid& grid, const CapsuleMask& mask);

/// Upsampled capsule tokens [B, h*w, d] without [IMG] or positions.
ag::Tensor upsample_tokens(const CapsuleGrid& selected, const nn::Linear& upsampler);

/// [IMG] followed by upsampled cells (row-major), plus position embeddings.
VisualTokenSequence flatten_and_upsample(const CapsuleGrid& selected, const nn::Linear& upsampler,
                                         const ag::Tensor& img_token, const ag::Tensor& positions);

/// Primary-capsule conv plus routing parameters. encode() runs routing
/// exactly once and counts the calls.
class CapsuleEncoder {
 public:
  CapsuleEncoder(nn::ParameterStore& store, std::size_t model_dim, std::size_t capsules, std::size_t pose_size,
                 std::size_t kernel, RoutingConfig routing);

  CapsuleGrid encode(const ImageEmbedding& embedding, RoutingTrace* trace = nullptr) const;

  std::size_t routing_calls() const { return routing_calls_.load(); }
  void reset_routing_calls() { routing_calls_ = 0; }

  std::size_t capsules() const { return capsules_; }
  std::size_t pose_size() const { return pose_size_; }
  const RoutingConfig& routing_config() const { return routing_; }
  const RoutingParams& routing_params() const { return params_; }
  const nn::Linear& primary_conv() const { return conv_; }

 private:
  std::size_t capsules_, pose_size_, kernel_;
  RoutingConfig routing_;
  nn::Linear conv_;
  RoutingParams params_;
  mutable std::atomic<std::size_t> routing_calls_{0};
};

}  // namespace capsvl::capsule
