#include "capsvl/cross.hpp"

#include <cmath>

#include "capsvl/errors.hpp"

namespace capsvl::cross {

namespace {

constexpr auto kGroup = nn::ParamGroup::Cross;

}  // namespace

CoAttentionBlock::CoAttentionBlock(nn::ParameterStore& store, const std::string& name, std::size_t d,
                                   std::size_t heads, std::size_t hidden) {
  auto make = [&](const std::string& prefix) {
    return Stream{nn::MultiHeadAttention(store, prefix + ".cross", d, heads, kGroup),
                  nn::MultiHeadAttention(store, prefix + ".self", d, heads, kGroup),
                  nn::LayerNorm(store, prefix + ".ln_cross", d, kGroup),
                  nn::LayerNorm(store, prefix + ".ln_self", d, kGroup),
                  nn::LayerNorm(store, prefix + ".ln_ff", d, kGroup),
                  nn::FeedForward(store, prefix + ".ff", d, hidden, kGroup)};
  };
  text_ = make(name + ".text");
  visual_ = make(name + ".visual");
}

std::pair<ag::Tensor, ag::Tensor> CoAttentionBlock::operator()(const ag::Tensor& text,
                                                               std::span<const unsigned char> text_valid,
                                                               const ag::Tensor& visual,
                                                               const nn::ForwardContext& ctx,
                                                               AttentionRecord* record) const {
  ag::Tensor t2v, v2t, vself;
  auto t = text_.ln_cross(ag::add(text, ctx.drop(text_.cross(text, visual, {}, &t2v))));
  auto v = visual_.ln_cross(ag::add(visual, ctx.drop(visual_.cross(visual, text, text_valid, &v2t))));
  t = text_.ln_self(ag::add(t, ctx.drop(text_.self(t, t, text_valid, nullptr))));
  v = visual_.ln_self(ag::add(v, ctx.drop(visual_.self(v, v, {}, &vself))));
  t = text_.ln_ff(ag::add(t, text_.ff(t, ctx)));
  v = visual_.ln_ff(ag::add(v, visual_.ff(v, ctx)));
  if (record) {
    record->text_to_visual = t2v;
    record->visual_to_text = v2t;
    record->visual_self = vself;
  }
  return {t, v};
}

CrossAttentionModule::CrossAttentionModule(nn::ParameterStore& store, std::size_t layers, std::size_t d,
                                           std::size_t heads, std::size_t hidden) {
  for (std::size_t i = 0; i < layers; ++i) blocks_.emplace_back(store, "cross.layer" + std::to_string(i + 1), d, heads, hidden);
}

CrossModalFeatures CrossAttentionModule::operator()(const ag::Tensor& text, std::span<const unsigned char> text_valid,
                                                    const ag::Tensor& visual, const nn::ForwardContext& ctx) const {
  if (text.dim(-1) != visual.dim(-1)) throw ConfigError("text and visual features differ in dimension");
  CrossModalFeatures out{text, visual, {}};
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    AttentionRecord rec;
    rec.layer = i + 1;
    std::tie(out.text, out.visual) = blocks_[i](out.text, text_valid, out.visual, ctx, &rec);
    out.records.push_back(std::move(rec));
  }
  return out;
}

Pooler::Pooler(nn::ParameterStore& store, std::size_t d) : fc_(store, "pool.fc", 2 * d, d, nn::ParamGroup::Pooling) {}

PooledFeature Pooler::operator()(const ag::Tensor& text_cls, const ag::Tensor& img_token, int stage) const {
  return PooledFeature{ag::tanh(fc_(ag::concat({text_cls, img_token}, -1))), stage};
}

MlmHead::MlmHead(nn::ParameterStore& store, std::size_t d, std::size_t vocab_size)
    : transform_(store, "head.mlm.transform", d, d, nn::ParamGroup::Head),
      ln_(store, "head.mlm.ln", d, nn::ParamGroup::Head),
      decoder_(store, "head.mlm.decoder", d, vocab_size, nn::ParamGroup::Head) {}

ag::Tensor MlmHead::operator()(const ag::Tensor& features, std::span<const MaskedPosition> masked) const {
  const std::size_t B = features.dim(0), T = features.dim(1), d = features.dim(2);
  std::vector<int> rows;
  rows.reserve(masked.size());
  for (const auto& m : masked) {
    if (m.batch >= B || m.position >= T)
      throw InputError("masked position (" + std::to_string(m.batch) + ", " + std::to_string(m.position) +
                       ") outside features of shape " + ag::shape_str(features.shape()));
    rows.push_back(static_cast<int>(m.batch * T + m.position));
  }
  if (rows.empty()) return ag::Tensor::zeros({0, decoder_.out_features()});
  const auto picked = ag::embedding(ag::reshape(features, {B * T, d}), rows, {rows.size()});
  return decoder_(ln_(ag::gelu(transform_(picked))));
}

ItmHead::ItmHead(nn::ParameterStore& store, std::size_t d) : fc_(store, "head.itm.fc", d, 2, nn::ParamGroup::Head) {}

ag::Tensor ItmHead::operator()(const PooledFeature& pooled) const { return fc_(pooled.vector); }

VqaHead::VqaHead(nn::ParameterStore& store, std::size_t d, std::size_t hidden, std::size_t answers)
    : in_(store, "head.vqa.in", d, hidden, nn::ParamGroup::Head),
      ln_(store, "head.vqa.ln", hidden, nn::ParamGroup::Head),
      out_(store, "head.vqa.out", hidden, answers, nn::ParamGroup::Head) {}

ag::Tensor VqaHead::operator()(const PooledFeature& pooled) const { return out_(ln_(ag::gelu(in_(pooled.vector)))); }

ag::Tensor combined_loss(const LossTerms& terms) {
  ag::Tensor total = ag::Tensor::scalar(0.0);
  const std::pair<const char*, const std::optional<ag::Tensor>*> named[] = {
      {"mlm", &terms.mlm}, {"itm", &terms.itm}, {"vqa", &terms.vqa}};
  for (const auto& [name, term] : named) {
    if (!term->has_value()) continue;
    const double v = (*term)->item();
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite ") + name + " loss");
    total = ag::add(total, **term);
  }
  return total;
}

}  // namespace capsvl::cross
