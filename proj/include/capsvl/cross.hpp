#pragma once

// Co-attentional cross-modal blocks, feature pooling and the pretraining /
// VQA heads.

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "capsvl/nn.hpp"

namespace capsvl::cross {

/// Softmax attention of one co-attention block, each [B, heads, Tq, Tk].
struct AttentionRecord {
  std::size_t layer = 0;        // 1-based within the cross-attention module
  ag::Tensor text_to_visual;    // text queries over visual keys
  ag::Tensor visual_to_text;    // visual queries over text keys
  ag::Tensor visual_self;       // visual self-attention; row 0 is the [IMG] query
};

struct CrossModalFeatures {
  ag::Tensor text;    // [B, Tt, d]
  ag::Tensor visual;  // [B, 1 + h*w, d]
  std::vector<AttentionRecord> records;
};

/// Each stream: cross-attention (queries from itself, keys/values from the
/// other stream), then self-attention, then a feedforward sublayer, all with
/// residual connections and post-norm.
class CoAttentionBlock {
 public:
  CoAttentionBlock(nn::ParameterStore& store, const std::string& name, std::size_t d, std::size_t heads,
                   std::size_t hidden);

  std::pair<ag::Tensor, ag::Tensor> operator()(const ag::Tensor& text, std::span<const unsigned char> text_valid,
                                               const ag::Tensor& visual, const nn::ForwardContext& ctx,
                                               AttentionRecord* record) const;

 private:
  struct Stream {
    nn::MultiHeadAttention cross, self;
    nn::LayerNorm ln_cross, ln_self, ln_ff;
    nn::FeedForward ff;
  };
  Stream text_, visual_;
};

class CrossAttentionModule {
 public:
  CrossAttentionModule(nn::ParameterStore& store, std::size_t layers, std::size_t d, std::size_t heads,
                       std::size_t hidden);

  CrossModalFeatures operator()(const ag::Tensor& text, std::span<const unsigned char> text_valid,
                                const ag::Tensor& visual, const nn::ForwardContext& ctx) const;
  std::size_t depth() const { return blocks_.size(); }

 private:
  std::vector<CoAttentionBlock> blocks_;
};

struct PooledFeature {
  ag::Tensor vector;  // [B, d], tanh range
  int stage = 1;
};

/// f_P: tanh(W [h_cls ; h_img] + b).
class Pooler {
 public:
  Pooler(nn::ParameterStore& store, std::size_t d);
  PooledFeature operator()(const ag::Tensor& text_cls, const ag::Tensor& img_token, int stage) const;
  const nn::Linear& projection() const { return fc_; }

 private:
  nn::Linear fc_;
};

/// A masked token: batch row and sequence position.
struct MaskedPosition {
  std::size_t batch = 0;
  std::size_t position = 0;
};

class MlmHead {
 public:
  MlmHead(nn::ParameterStore& store, std::size_t d, std::size_t vocab_size);
  /// Logits [#masked, V]; throws InputError for positions outside features.
  ag::Tensor operator()(const ag::Tensor& features, std::span<const MaskedPosition> masked) const;
  nn::Linear& decoder() { return decoder_; }

 private:
  nn::Linear transform_;
  nn::LayerNorm ln_;
  nn::Linear decoder_;
};

class ItmHead {
 public:
  ItmHead(nn::ParameterStore& store, std::size_t d);
  /// [B, 2]; column 1 is "matching".
  ag::Tensor operator()(const PooledFeature& pooled) const;
  nn::Linear& classifier() { return fc_; }

 private:
  nn::Linear fc_;
};

class VqaHead {
 public:
  VqaHead(nn::ParameterStore& store, std::size_t d, std::size_t hidden, std::size_t answers);
  ag::Tensor operator()(const PooledFeature& pooled) const;
  nn::Linear& classifier() { return out_; }

 private:
  nn::Linear in_;
  nn::LayerNorm ln_;
  nn::Linear out_;
};

/// Per-task losses; an absent task contributes nothing.
struct LossTerms {
  std::optional<ag::Tensor> mlm, itm, vqa;
};

/// Unweighted sum of the present terms. Throws NumericalError naming the
/// first non-finite term.
ag::Tensor combined_loss(const LossTerms& terms);

}  // namespace capsvl::cross
