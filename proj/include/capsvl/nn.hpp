#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "capsvl/tensor.hpp"

namespace capsvl::nn {

/// Coarse ownership of each parameter; drives the stage-2 freeze.
enum class ParamGroup { Encoder, Capsule, Cross, Pooling, Head };

std::string to_string(ParamGroup g);
/// Encoder and capsule parameters belong to the modality encoders.
bool is_encoder_group(ParamGroup g);

struct ParamEntry {
  std::string name;
  ParamGroup group;
  ag::Tensor tensor;
};

/// Named parameters in creation order.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : rng_(seed) {}

  ag::Tensor normal(const std::string& name, ag::Shape shape, double stddev, ParamGroup group);
  ag::Tensor constant(const std::string& name, ag::Shape shape, double value, ParamGroup group);

  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::vector<ParamEntry>& entries() { return entries_; }
  const ParamEntry& find(const std::string& name) const;
  std::size_t total_size() const;
  void zero_grad();

 private:
  ag::Tensor add(const std::string& name, ag::Shape shape, std::vector<double> values, ParamGroup group);

  std::vector<ParamEntry> entries_;
  std::map<std::string, std::size_t> index_;
  std::mt19937_64 rng_;
};

/// Per-call mode: dropout is active only in training.
struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;

  ag::Tensor drop(const ag::Tensor& x) const;
};

inline constexpr double kInitStd = 0.02;
/// 1/sqrt(fan_in), for layers not followed by a normalization.
double fan_in_std(std::size_t fan_in);

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, ParamGroup group,
         double stddev = kInitStd);

  ag::Tensor operator()(const ag::Tensor& x) const;
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  ag::Tensor weight;  // [in, out]
  ag::Tensor bias;    // [out]
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, std::size_t d, ParamGroup group);
  ag::Tensor operator()(const ag::Tensor& x) const;

  ag::Tensor gamma, beta;
};

/// Projections around the fused attention kernel.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& store, const std::string& name, std::size_t d, std::size_t heads,
                     ParamGroup group);

  ag::Tensor operator()(const ag::Tensor& queries, const ag::Tensor& keys, std::span<const unsigned char> key_valid,
                        ag::Tensor* probs) const;
  std::size_t heads() const { return heads_; }

 private:
  Linear q_, k_, v_, o_;
  std::size_t heads_ = 1;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(ParameterStore& store, const std::string& name, std::size_t d, std::size_t hidden, ParamGroup group);
  ag::Tensor operator()(const ag::Tensor& x, const ForwardContext& ctx) const;

 private:
  Linear in_, out_;
};

/// Post-norm (BERT-style) encoder layer.
class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(ParameterStore& store, const std::string& name, std::size_t d, std::size_t heads,
                   std::size_t hidden, ParamGroup group);

  ag::Tensor operator()(const ag::Tensor& x, std::span<const unsigned char> key_valid, const ForwardContext& ctx,
                        ag::Tensor* probs = nullptr) const;

 private:
  MultiHeadAttention attn_;
  LayerNorm ln_attn_;
  FeedForward ff_;
  LayerNorm ln_ff_;
};

}  // namespace capsvl::nn
