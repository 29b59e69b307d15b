#include "capsvl/encoder.hpp"

#include <algorithm>
#include <cctype>

#include "capsvl/errors.hpp"

namespace capsvl::encoder {

void EncoderConfig::validate() const {
  if (layers == 0) throw ConfigError("encoder needs at least one layer");
  if (heads == 0 || model_dim % heads != 0)
    throw ConfigError("model dim " + std::to_string(model_dim) + " not divisible by " + std::to_string(heads) +
                      " heads");
  if (feedforward_dim == 0) throw ConfigError("feedforward dim must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  if (max_text_length < 3) throw ConfigError("max text length must allow [CLS] w [SEP]");
}

Vocabulary::Vocabulary() {
  for (const char* w : {"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"}) add(w);
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
  for (const auto& w : words) add(w);
}

int Vocabulary::add(const std::string& word) {
  auto it = index_.find(word);
  if (it != index_.end()) return it->second;
  const int id = static_cast<int>(words_.size());
  words_.push_back(word);
  index_[word] = id;
  return id;
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size())
    throw InputError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(words_.size()));
  return words_[static_cast<std::size_t>(id)];
}

std::vector<std::string> Vocabulary::split(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(cur);
    cur.clear();
  };
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      out.emplace_back(1, raw);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> ids{kCls};
  for (const auto& w : split(text)) ids.push_back(id(w));
  ids.push_back(kSep);
  return ids;
}

TextBatch TextBatch::from_sequences(const std::vector<std::vector<int>>& sequences) {
  TextBatch tb;
  tb.batch = sequences.size();
  for (const auto& s : sequences) tb.length = std::max(tb.length, s.size());
  tb.ids.assign(tb.batch * tb.length, Vocabulary::kPad);
  tb.valid.assign(tb.batch * tb.length, 0);
  for (std::size_t b = 0; b < tb.batch; ++b) {
    const auto& s = sequences[b];
    if (s.size() < 3 || s.front() != Vocabulary::kCls || s.back() != Vocabulary::kSep)
      throw InputError("text sequence " + std::to_string(b) + " must be [CLS] w_1..w_l [SEP] with l >= 1");
    for (std::size_t t = 0; t < s.size(); ++t) {
      tb.ids[b * tb.length + t] = s[t];
      tb.valid[b * tb.length + t] = 1;
    }
  }
  return tb;
}

std::size_t TextBatch::sequence_length(std::size_t b) const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < length; ++t) n += valid[b * length + t];
  return n;
}

ag::Tensor TextLayerFeatures::cls(std::size_t layer) const {
  const auto& x = layers.at(layer - 1);
  return ag::reshape(ag::slice(x, 1, 0, 1), {x.dim(0), x.dim(2)});
}

ag::Tensor VisualLayerFeatures::img(std::size_t layer) const {
  const auto& x = layers.at(layer - 1);
  return ag::reshape(ag::slice(x, 1, 0, 1), {x.dim(0), x.dim(2)});
}

TextEncoder::TextEncoder(nn::ParameterStore& store, const EncoderConfig& cfg, std::size_t vocab_size)
    : cfg_(cfg), vocab_size_(vocab_size) {
  cfg_.validate();
  const auto g = nn::ParamGroup::Encoder;
  tokens_ = store.normal("text.embed.tokens", {vocab_size, cfg.model_dim}, nn::kInitStd, g);
  positions_ = store.normal("text.embed.positions", {cfg.max_text_length, cfg.model_dim}, nn::kInitStd, g);
  ln_ = nn::LayerNorm(store, "text.embed.ln", cfg.model_dim, g);
  for (std::size_t i = 0; i < cfg.layers; ++i)
    layers_.emplace_back(store, "text.layer" + std::to_string(i + 1), cfg.model_dim, cfg.heads, cfg.feedforward_dim, g);
}

TextLayerFeatures TextEncoder::encode(const TextBatch& text, const nn::ForwardContext& ctx) const {
  if (text.length > cfg_.max_text_length)
    throw InputError("text length " + std::to_string(text.length) + " exceeds maximum " +
                     std::to_string(cfg_.max_text_length));
  for (int id : text.ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size_)
      throw InputError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab_size_));
  auto x = ag::embedding(tokens_, text.ids, {text.batch, text.length});
  x = ag::add(x, ag::slice(positions_, 0, 0, text.length));
  x = ctx.drop(ln_(x));
  TextLayerFeatures out;
  for (const auto& layer : layers_) {
    x = layer(x, text.valid, ctx);
    out.layers.push_back(x);
  }
  return out;
}

SelectionHead::SelectionHead(nn::ParameterStore& store, std::size_t model_dim, std::size_t capsules)
    : phi_(store, "select.phi", model_dim, capsules, nn::ParamGroup::Encoder) {}

capsule::CapsuleMask SelectionHead::operator()(const ag::Tensor& h_cls, int layer) const {
  return capsule::mask_from_logits(phi_(h_cls), layer);
}

VisualEncoder::VisualEncoder(nn::ParameterStore& store, const EncoderConfig& cfg, std::size_t cells,
                             std::size_t capsule_dim)
    : cfg_(cfg), cells_(cells) {
  cfg_.validate();
  const auto g = nn::ParamGroup::Encoder;
  upsampler_ = nn::Linear(store, "visual.upsample", capsule_dim, cfg.model_dim, g, nn::fan_in_std(capsule_dim));
  img_token_ = store.normal("visual.img_token", {cfg.model_dim}, nn::kInitStd, g);
  positions_ = store.normal("visual.positions", {cells + 1, cfg.model_dim}, nn::kInitStd, g);
  ln_ = nn::LayerNorm(store, "visual.embed.ln", cfg.model_dim, g);
  for (std::size_t i = 0; i < cfg.layers; ++i)
    layers_.emplace_back(store, "visual.layer" + std::to_string(i + 1), cfg.model_dim, cfg.heads,
                         cfg.feedforward_dim, g);
}

capsule::VisualTokenSequence VisualEncoder::first_tokens(const capsule::CapsuleGrid& grid,
                                                         const capsule::CapsuleMask& mask) const {
  return capsule::flatten_and_upsample(capsule::select_capsules(grid, mask), upsampler_, img_token_, positions_);
}

ag::Tensor VisualEncoder::layer_step(std::size_t layer, const ag::Tensor& prev, const capsule::CapsuleGrid& grid,
                                     const capsule::CapsuleMask& mask, const nn::ForwardContext& ctx) const {
  if (layer < 2 || layer > layers_.size())
    throw ConfigError("residual capsule step applies to layers 2.." + std::to_string(layers_.size()));
  return layers_[layer - 1](residual_input(prev, grid, mask), {}, ctx);
}

ag::Tensor VisualEncoder::residual_input(const ag::Tensor& prev, const capsule::CapsuleGrid& grid,
                                         const capsule::CapsuleMask& mask) const {
  const auto residual = capsule::upsample_tokens(capsule::select_capsules(grid, mask), upsampler_);
  const auto img_slot = ag::Tensor::zeros({residual.dim(0), 1, residual.dim(2)});
  return ag::add(prev, ag::concat({img_slot, residual}, 1));
}

VisualLayerFeatures VisualEncoder::encode(const capsule::CapsuleGrid& grid, const TextLayerFeatures& text,
                                          const SelectionHead& selection, const nn::ForwardContext& ctx) const {
  if (text.layers.size() != layers_.size())
    throw ConfigError("text encoder has " + std::to_string(text.layers.size()) + " layers, visual encoder " +
                      std::to_string(layers_.size()));
  if (grid.cells() != cells_)
    throw ConfigError("capsule grid has " + std::to_string(grid.cells()) + " cells, encoder expects " +
                      std::to_string(cells_));
  VisualLayerFeatures out;
  auto mask = selection(text.cls(1), 1);
  auto x = layers_[0](ctx.drop(ln_(first_tokens(grid, mask).tokens)), {}, ctx);
  out.masks.push_back(mask);
  out.layers.push_back(x);
  for (std::size_t i = 2; i <= layers_.size(); ++i) {
    mask = selection(text.cls(i), static_cast<int>(i));
    x = layer_step(i, x, grid, mask, ctx);
    out.masks.push_back(mask);
    out.layers.push_back(x);
  }
  return out;
}

}  // namespace capsvl::encoder
