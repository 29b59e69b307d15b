#include "capsvl/nn.hpp"

#include <cmath>

#include <stdexcept>

#include "capsvl/errors.hpp"

namespace capsvl::nn {

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::Encoder:
      return "encoder";
    case ParamGroup::Capsule:
      return "capsule";
    case ParamGroup::Cross:
      return "cross";
    case ParamGroup::Pooling:
      return "pooling";
    case ParamGroup::Head:
      return "head";
  }
  return "unknown";
}

bool is_encoder_group(ParamGroup g) { return g == ParamGroup::Encoder || g == ParamGroup::Capsule; }

ag::Tensor ParameterStore::add(const std::string& name, ag::Shape shape, std::vector<double> values,
                               ParamGroup group) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  auto t = ag::Tensor::parameter(std::move(shape), std::move(values));
  index_[name] = entries_.size();
  entries_.push_back({name, group, t});
  return t;
}

ag::Tensor ParameterStore::normal(const std::string& name, ag::Shape shape, double stddev, ParamGroup group) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(ag::numel_of(shape));
  for (double& x : v) x = stddev > 0 ? dist(rng_) : 0.0;
  return add(name, std::move(shape), std::move(v), group);
}

ag::Tensor ParameterStore::constant(const std::string& name, ag::Shape shape, double value, ParamGroup group) {
  std::vector<double> v(ag::numel_of(shape), value);
  return add(name, std::move(shape), std::move(v), group);
}

const ParamEntry& ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return entries_[it->second];
}

std::size_t ParameterStore::total_size() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

ag::Tensor ForwardContext::drop(const ag::Tensor& x) const {
  if (!training || dropout <= 0.0 || rng == nullptr) return x;
  return ag::dropout(x, dropout, *rng);
}

Linear::Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, ParamGroup group,
               double stddev)
    : weight(store.normal(name + ".weight", {in, out}, stddev, group)),
      bias(store.constant(name + ".bias", {out}, 0.0, group)) {}

ag::Tensor Linear::operator()(const ag::Tensor& x) const { return ag::add(ag::matmul(x, weight), bias); }

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, std::size_t d, ParamGroup group)
    : gamma(store.constant(name + ".gamma", {d}, 1.0, group)), beta(store.constant(name + ".beta", {d}, 0.0, group)) {}

ag::Tensor LayerNorm::operator()(const ag::Tensor& x) const { return ag::layer_norm(x, gamma, beta); }

MultiHeadAttention::MultiHeadAttention(ParameterStore& store, const std::string& name, std::size_t d,
                                       std::size_t heads, ParamGroup group)
    : q_(store, name + ".query", d, d, group, fan_in_std(d)),
      k_(store, name + ".key", d, d, group, fan_in_std(d)),
      v_(store, name + ".value", d, d, group),
      o_(store, name + ".output", d, d, group),
      heads_(heads) {
  if (heads == 0 || d % heads != 0)
    throw ConfigError("model dim " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
}

ag::Tensor MultiHeadAttention::operator()(const ag::Tensor& queries, const ag::Tensor& keys,
                                          std::span<const unsigned char> key_valid, ag::Tensor* probs) const {
  auto ctx = ag::attention(q_(queries), k_(keys), v_(keys), heads_, key_valid, probs);
  return o_(ctx);
}

FeedForward::FeedForward(ParameterStore& store, const std::string& name, std::size_t d, std::size_t hidden,
                         ParamGroup group)
    : in_(store, name + ".in", d, hidden, group), out_(store, name + ".out", hidden, d, group) {}

ag::Tensor FeedForward::operator()(const ag::Tensor& x, const ForwardContext& ctx) const {
  return ctx.drop(out_(ag::gelu(in_(x))));
}

TransformerLayer::TransformerLayer(ParameterStore& store, const std::string& name, std::size_t d, std::size_t heads,
                                   std::size_t hidden, ParamGroup group)
    : attn_(store, name + ".attn", d, heads, group),
      ln_attn_(store, name + ".ln_attn", d, group),
      ff_(store, name + ".ff", d, hidden, group),
      ln_ff_(store, name + ".ln_ff", d, group) {}

ag::Tensor TransformerLayer::operator()(const ag::Tensor& x, std::span<const unsigned char> key_valid,
                                        const ForwardContext& ctx, ag::Tensor* probs) const {
  auto h = ln_attn_(ag::add(x, ctx.drop(attn_(x, x, key_valid, probs))));
  return ln_ff_(ag::add(h, ff_(h, ctx)));
}

double fan_in_std(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace capsvl::nn
