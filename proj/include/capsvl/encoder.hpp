#pragma once

// Language encoder, text-guided visual encoder and the shared capsule
// selection head.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "capsvl/capsule.hpp"
#include "capsvl/nn.hpp"

namespace capsvl::encoder {

struct EncoderConfig {
  std::size_t layers = 5;
  std::size_t heads = 12;
  std::size_t model_dim = 768;
  std::size_t feedforward_dim = 3072;
  double dropout = 0.1;
  std::size_t max_text_length = 40;

  void validate() const;
};

/// Whitespace tokenizer over a fixed word list. Ids 0..4 are reserved for
/// [PAD], [CLS], [SEP], [MASK] and [UNK].
class Vocabulary {
 public:
  static constexpr int kPad = 0, kCls = 1, kSep = 2, kMask = 3, kUnk = 4;

  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& words);

  int id(const std::string& word) const;
  const std::string& word(int id) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }
  /// Adds the word if missing; returns its id.
  int add(const std::string& word);

  /// Lower-cases, splits off punctuation, and wraps with [CLS] ... [SEP].
  std::vector<int> encode(const std::string& text) const;
  static std::vector<std::string> split(const std::string& text);

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

/// Padded batch of [CLS] w_1..w_l [SEP] sequences, row-major [B, T].
struct TextBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<int> ids;
  std::vector<unsigned char> valid;

  static TextBatch from_sequences(const std::vector<std::vector<int>>& sequences);
  std::size_t sequence_length(std::size_t b) const;
};

/// Outputs of every text layer, each [B, T, d].
struct TextLayerFeatures {
  std::vector<ag::Tensor> layers;

  /// [CLS] feature of layer i (1-based), [B, d].
  ag::Tensor cls(std::size_t layer) const;
  const ag::Tensor& last() const { return layers.back(); }
};

/// Outputs of every visual layer, each [B, 1 + h*w, d], and the masks used.
struct VisualLayerFeatures {
  std::vector<ag::Tensor> layers;
  std::vector<capsule::CapsuleMask> masks;

  ag::Tensor img(std::size_t layer) const;
  const ag::Tensor& last() const { return layers.back(); }
};

class TextEncoder {
 public:
  TextEncoder(nn::ParameterStore& store, const EncoderConfig& cfg, std::size_t vocab_size);

  /// Throws InputError for ids outside the vocabulary or over-long batches.
  TextLayerFeatures encode(const TextBatch& text, const nn::ForwardContext& ctx) const;
  std::size_t vocab_size() const { return vocab_size_; }

 private:
  EncoderConfig cfg_;
  std::size_t vocab_size_;
  ag::Tensor tokens_, positions_;
  nn::LayerNorm ln_;
  std::vector<nn::TransformerLayer> layers_;
};

/// phi: d -> C logits followed by a softmax; one instance serves every layer.
class SelectionHead {
 public:
  SelectionHead(nn::ParameterStore& store, std::size_t model_dim, std::size_t capsules);

  capsule::CapsuleMask operator()(const ag::Tensor& h_cls, int layer) const;
  const nn::Linear& projection() const { return phi_; }

 private:
  nn::Linear phi_;
};

class VisualEncoder {
 public:
  VisualEncoder(nn::ParameterStore& store, const EncoderConfig& cfg, std::size_t cells, std::size_t capsule_dim);

  /// Layer 1 reads the masked capsule tokens; layers 2..L add the masked
  /// capsule residual to every non-[IMG] token before the layer.
  VisualLayerFeatures encode(const capsule::CapsuleGrid& grid, const TextLayerFeatures& text,
                             const SelectionHead& selection, const nn::ForwardContext& ctx) const;

  /// One residual step: layer `layer` (1-based, >= 2) applied to
  /// prev + [0; upsample(select(grid, mask))].
  ag::Tensor layer_step(std::size_t layer, const ag::Tensor& prev, const capsule::CapsuleGrid& grid,
                        const capsule::CapsuleMask& mask, const nn::ForwardContext& ctx) const;

  /// prev + [0; upsample(select(grid, mask))]; the [IMG] slot gets no residual.
  ag::Tensor residual_input(const ag::Tensor& prev, const capsule::CapsuleGrid& grid,
                            const capsule::CapsuleMask& mask) const;

  /// Layer 1 tokens: [IMG] + masked capsule tokens + positions, before the
  /// embedding norm.
  capsule::VisualTokenSequence first_tokens(const capsule::CapsuleGrid& grid, const capsule::CapsuleMask& mask) const;
  const nn::LayerNorm& embedding_norm() const { return ln_; }

  const nn::TransformerLayer& layer(std::size_t i) const { return layers_.at(i - 1); }
  std::size_t depth() const { return layers_.size(); }
  const nn::Linear& upsampler() const { return upsampler_; }

 private:
  EncoderConfig cfg_;
  std::size_t cells_;
  nn::Linear upsampler_;
  ag::Tensor img_token_, positions_;
  nn::LayerNorm ln_;
  std::vector<nn::TransformerLayer> layers_;
};

}  // namespace capsvl::encoder
