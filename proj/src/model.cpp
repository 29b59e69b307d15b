#include "capsvl/model.hpp"

#include "capsvl/errors.hpp"

namespace capsvl {

std::string to_string(Stage s) {
  switch (s) {
    case Stage::Pretrain1:
      return "pretrain1";
    case Stage::Pretrain2:
      return "pretrain2";
    case Stage::Finetune:
      return "finetune";
  }
  return "unknown";
}

Stage parse_stage(const std::string& s) {
  if (s == "pretrain1") return Stage::Pretrain1;
  if (s == "pretrain2") return Stage::Pretrain2;
  if (s == "finetune") return Stage::Finetune;
  throw ConfigError("unknown stage '" + s + "' (expected pretrain1, pretrain2 or finetune)");
}

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.encoder = {5, 12, 768, 3072, 0.1, 40};
  c.cross_layers = 2;
  c.capsules = 16;
  c.pose_size = 4;
  c.grid_h = c.grid_w = 7;
  c.stem.kind = data::StemKind::Precomputed;
  c.stem.source_dim = 2048;
  c.answer_count = 1000;
  c.vqa_hidden = 1536;
  return c;
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.encoder = {3, 4, 128, 512, 0.1, 16};
  c.cross_layers = 1;
  c.capsules = 8;
  c.pose_size = 3;
  c.grid_h = c.grid_w = 7;
  c.stem = {data::StemKind::Raster, 56, 3, 64};
  c.vocab_size = 64;
  c.answer_count = 16;
  c.vqa_hidden = 256;
  return c;
}

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.encoder = {2, 2, 32, 64, 0.0, 12};
  c.cross_layers = 1;
  c.capsules = 4;
  c.pose_size = 2;
  c.grid_h = c.grid_w = 4;
  c.stem = {data::StemKind::Raster, 16, 3, 8};
  c.vocab_size = 16;
  c.answer_count = 5;
  c.vqa_hidden = 16;
  return c;
}

void ModelConfig::validate() const {
  encoder.validate();
  routing.validate();
  if (cross_layers == 0) throw ConfigError("cross-attention module needs at least one layer");
  if (capsules == 0 || pose_size == 0) throw ConfigError("capsule count and pose size must be positive");
  if (grid_h == 0 || grid_w == 0) throw ConfigError("grid must be non-empty");
  if (vocab_size <= 5) throw ConfigError("vocabulary must extend past the reserved tokens");
  if (answer_count == 0) throw ConfigError("answer vocabulary must be non-empty");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"layers", c.encoder.layers},
      {"heads", c.encoder.heads},
      {"model_dim", c.encoder.model_dim},
      {"feedforward_dim", c.encoder.feedforward_dim},
      {"dropout", c.encoder.dropout},
      {"max_text_length", c.encoder.max_text_length},
      {"cross_layers", c.cross_layers},
      {"capsules", c.capsules},
      {"pose_size", c.pose_size},
      {"primary_kernel", c.primary_kernel},
      {"routing",
       {{"iterations", c.routing.iterations},
        {"inverse_temperature", c.routing.inverse_temperature},
        {"epsilon", c.routing.epsilon}}},
      {"grid_h", c.grid_h},
      {"grid_w", c.grid_w},
      {"stem",
       {{"kind", data::to_string(c.stem.kind)},
        {"image_size", c.stem.image_size},
        {"channels", c.stem.channels},
        {"source_dim", c.stem.source_dim}}},
      {"vocab_size", c.vocab_size},
      {"answer_count", c.answer_count},
      {"vqa_hidden", c.vqa_hidden},
      {"seed", c.seed},
  };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d = ModelConfig::desk();
  auto get = [&](const char* key, auto fallback) { return j.contains(key) ? j.at(key).get<decltype(fallback)>() : fallback; };
  c.encoder.layers = get("layers", d.encoder.layers);
  c.encoder.heads = get("heads", d.encoder.heads);
  c.encoder.model_dim = get("model_dim", d.encoder.model_dim);
  c.encoder.feedforward_dim = get("feedforward_dim", d.encoder.feedforward_dim);
  c.encoder.dropout = get("dropout", d.encoder.dropout);
  c.encoder.max_text_length = get("max_text_length", d.encoder.max_text_length);
  c.cross_layers = get("cross_layers", d.cross_layers);
  c.capsules = get("capsules", d.capsules);
  c.pose_size = get("pose_size", d.pose_size);
  c.primary_kernel = get("primary_kernel", d.primary_kernel);
  c.routing = d.routing;
  if (j.contains("routing")) {
    const auto& r = j.at("routing");
    c.routing.iterations = r.value("iterations", d.routing.iterations);
    c.routing.inverse_temperature = r.value("inverse_temperature", d.routing.inverse_temperature);
    c.routing.epsilon = r.value("epsilon", d.routing.epsilon);
  }
  c.grid_h = get("grid_h", d.grid_h);
  c.grid_w = get("grid_w", d.grid_w);
  c.stem = d.stem;
  if (j.contains("stem")) {
    const auto& s = j.at("stem");
    c.stem.kind = data::parse_stem_kind(s.value("kind", data::to_string(d.stem.kind)));
    c.stem.image_size = s.value("image_size", d.stem.image_size);
    c.stem.channels = s.value("channels", d.stem.channels);
    c.stem.source_dim = s.value("source_dim", d.stem.source_dim);
  }
  c.vocab_size = get("vocab_size", d.vocab_size);
  c.answer_count = get("answer_count", d.answer_count);
  c.vqa_hidden = get("vqa_hidden", d.vqa_hidden);
  c.seed = get("seed", d.seed);
}

namespace {

const ModelConfig& validated(const ModelConfig& c) {
  c.validate();
  return c;
}

}  // namespace

CapsVLModel::CapsVLModel(const ModelConfig& cfg)
    : cfg_(validated(cfg)),
      store_(cfg.seed),
      stem_(store_, cfg.stem, cfg.grid_h, cfg.grid_w, cfg.model_dim()),
      capsules_(store_, cfg.model_dim(), cfg.capsules, cfg.pose_size, cfg.primary_kernel, cfg.routing),
      text_(store_, cfg.encoder, cfg.vocab_size),
      selection_(store_, cfg.model_dim(), cfg.capsules),
      visual_(store_, cfg.encoder, cfg.cells(), capsule::packed_dim(cfg.capsules, cfg.pose_size)),
      cross_(store_, cfg.cross_layers, cfg.model_dim(), cfg.encoder.heads, cfg.encoder.feedforward_dim),
      pooler_(store_, cfg.model_dim()),
      mlm_(store_, cfg.model_dim(), cfg.vocab_size),
      itm_(store_, cfg.model_dim()),
      vqa_(store_, cfg.model_dim(), cfg.vqa_hidden, cfg.answer_count) {}

capsule::CapsuleGrid CapsVLModel::encode_capsules(const ag::Tensor& images) const {
  return capsules_.encode(stem_(images));
}

ForwardOutputs CapsVLModel::forward(const ag::Tensor& images, const encoder::TextBatch& text, Stage stage,
                                    const nn::ForwardContext& ctx, capsule::RoutingTrace* trace) const {
  if (images.dim(0) != text.batch)
    throw InputError("batch of " + std::to_string(images.dim(0)) + " images with " + std::to_string(text.batch) +
                     " questions");
  ForwardOutputs out;
  out.text = text_.encode(text, ctx);
  out.grid = capsules_.encode(stem_(images), trace);
  out.visual = visual_.encode(out.grid, out.text, selection_, ctx);
  if (stage == Stage::Pretrain1) {
    out.pooled = pooler_(out.text.cls(cfg_.encoder.layers), out.visual.img(cfg_.encoder.layers), 1);
    out.mlm_features = out.text.last();
    return out;
  }
  out.cross = cross_(out.text.last(), text.valid, out.visual.last(), ctx);
  const auto& cm = *out.cross;
  const std::size_t B = text.batch, d = cfg_.model_dim();
  const auto cls = ag::reshape(ag::slice(cm.text, 1, 0, 1), {B, d});
  const auto img = ag::reshape(ag::slice(cm.visual, 1, 0, 1), {B, d});
  out.pooled = pooler_(cls, img, 2);
  out.mlm_features = cm.text;
  return out;
}

}  // namespace capsvl
