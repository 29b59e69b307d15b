#include "capsvl/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace capsvl::training {

namespace {

constexpr char kMagic[8] = {'C', 'V', 'L', 'C', 'K', 'P', 'T', '1'};
constexpr int kFormatVersion = 1;

nlohmann::json comparable_config(nlohmann::json j) {
  j.erase("seed");
  return j;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must be in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
  if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) throw ConfigError("warmup fraction must be in [0, 1)");
  if (mask_rate < 0.0 || mask_rate > 1.0) throw ConfigError("mask rate must be in [0, 1]");
  if (stage == Stage::Finetune ? !vqa : !(mlm || itm || vqa)) throw ConfigError("no loss task enabled");
}

TrainConfig TrainConfig::defaults(Stage stage) {
  TrainConfig c;
  c.stage = stage;
  switch (stage) {
    case Stage::Pretrain1:
      c.learning_rate = 5e-4;
      c.epochs = 4;
      break;
    case Stage::Pretrain2:
      c.learning_rate = 5e-4;
      c.epochs = 3;
      break;
    case Stage::Finetune:
      c.learning_rate = 2e-4;
      c.epochs = 25;
      c.mlm = c.itm = false;
      break;
  }
  return c;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"stage", to_string(c.stage)},
                     {"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"seed", c.seed},
                     {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_epsilon", c.adam_epsilon},
                     {"warmup_fraction", c.warmup_fraction},
                     {"max_grad_norm", c.max_grad_norm},
                     {"mlm", c.mlm},
                     {"itm", c.itm},
                     {"vqa", c.vqa},
                     {"mask_rate", c.mask_rate},
                     {"from_scratch", c.from_scratch},
                     {"max_steps", c.max_steps}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (j.contains("stage")) c.stage = parse_stage(j.at("stage").get<std::string>());
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  c.mlm = j.value("mlm", c.mlm);
  c.itm = j.value("itm", c.itm);
  c.vqa = j.value("vqa", c.vqa);
  c.mask_rate = j.value("mask_rate", c.mask_rate);
  c.from_scratch = j.value("from_scratch", c.from_scratch);
  c.max_steps = j.value("max_steps", c.max_steps);
}

Checkpoint snapshot(const CapsVLModel& model, Stage stage, std::size_t step) {
  Checkpoint c;
  c.model_config = model.config();
  c.stage = stage;
  c.step = step;
  for (const auto& e : model.params().entries())
    c.params.push_back({e.name, e.tensor.shape(), {e.tensor.data().begin(), e.tensor.data().end()}});
  return c;
}

void restore(CapsVLModel& model, const Checkpoint& ckpt) {
  if (comparable_config(nlohmann::json(model.config())) != comparable_config(ckpt.model_config))
    throw LoadError("checkpoint/config mismatch: checkpoint was written for " + ckpt.model_config.dump());
  auto& entries = model.params().entries();
  if (entries.size() != ckpt.params.size())
    throw LoadError("checkpoint has " + std::to_string(ckpt.params.size()) + " parameters, model " +
                    std::to_string(entries.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& src = ckpt.params[i];
    auto& dst = entries[i];
    if (src.name != dst.name || src.shape != dst.tensor.shape())
      throw LoadError("checkpoint parameter " + src.name + " " + ag::shape_str(src.shape) + " does not match " +
                      dst.name + " " + ag::shape_str(dst.tensor.shape()));
    std::copy(src.values.begin(), src.values.end(), dst.tensor.mutable_data().begin());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  static_assert(std::endian::native == std::endian::little, "checkpoints are little-endian");
  nlohmann::json header{{"format_version", kFormatVersion},
                        {"config", ckpt.model_config},
                        {"stage", to_string(ckpt.stage)},
                        {"step", ckpt.step},
                        {"extra", ckpt.extra}};
  auto params = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& p : ckpt.params) {
    params.push_back({{"name", p.name}, {"shape", p.shape}, {"offset", offset}});
    offset += p.values.size();
  }
  header["params"] = params;
  header["total_values"] = offset;
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  const auto len = static_cast<std::uint32_t>(text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : ckpt.params)
    out.write(reinterpret_cast<const char*>(p.values.data()),
              static_cast<std::streamsize>(p.values.size() * sizeof(double)));
  if (!out) throw LoadError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw LoadError(path.string() + " is not a checkpoint");
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw LoadError(path.string() + ": truncated header");
  Checkpoint c;
  try {
    const auto header = nlohmann::json::parse(text);
    if (header.at("format_version").get<int>() != kFormatVersion)
      throw LoadError(path.string() + ": unsupported checkpoint version");
    c.model_config = header.at("config");
    c.stage = parse_stage(header.at("stage").get<std::string>());
    c.step = header.at("step").get<std::size_t>();
    c.extra = header.value("extra", nlohmann::json::object());
    for (const auto& p : header.at("params")) {
      NamedTensor t{p.at("name").get<std::string>(), p.at("shape").get<ag::Shape>(), {}};
      t.values.resize(ag::numel_of(t.shape));
      in.read(reinterpret_cast<char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * sizeof(double)));
      if (!in) throw LoadError(path.string() + ": truncated parameter data at " + t.name);
      c.params.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw LoadError(path.string() + ": trailing bytes");
  return c;
}

std::unique_ptr<CapsVLModel> model_from_checkpoint(const Checkpoint& ckpt) {
  ModelConfig cfg;
  try {
    cfg = ckpt.model_config.get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("checkpoint config unreadable: ") + e.what());
  }
  auto model = std::make_unique<CapsVLModel>(cfg);
  restore(*model, ckpt);
  return model;
}

std::uint64_t parameter_hash(const ag::Tensor& t) {
  std::uint64_t h = 1469598103934665603ull;
  for (double v : t.data()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xffu;
      h *= 1099511628211ull;
    }
  }
  return h;
}

AdamW::AdamW(std::vector<nn::ParamEntry*> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_epsilon),
      decay_(cfg.weight_decay),
      clip_(cfg.max_grad_norm) {
  for (auto* p : params_) {
    m_.emplace_back(p->tensor.numel(), 0.0);
    v_.emplace_back(p->tensor.numel(), 0.0);
  }
}

std::size_t AdamW::parameter_count() const {
  std::size_t n = 0;
  for (auto* p : params_) n += p->tensor.numel();
  return n;
}

double AdamW::step(double lr) {
  double sq = 0.0;
  for (auto* p : params_)
    for (double g : p->tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) return norm;
  const double scale = clip_ > 0.0 && norm > clip_ ? clip_ / norm : 1.0;
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& t = params_[k]->tensor;
    const auto grad = t.grad();
    if (grad.empty()) continue;
    auto w = t.mutable_data();
    const bool decay = t.rank() >= 2;
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = grad[i] * scale;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      if (decay) update += decay_ * w[i];
      w[i] -= lr * update;
    }
  }
  return norm;
}

double learning_rate_at(std::size_t step, std::size_t total_steps, double base, double warmup_fraction) {
  if (total_steps == 0) return base;
  const double warmup = std::floor(warmup_fraction * static_cast<double>(total_steps));
  const double s = static_cast<double>(step) + 1.0;
  if (s <= warmup) return base * s / warmup;
  const double rest = static_cast<double>(total_steps) - warmup;
  return base * std::max(0.0, (static_cast<double>(total_steps) - s + 1.0) / rest);
}

std::vector<nn::ParamEntry*> trainable_parameters(nn::ParameterStore& store, Stage stage) {
  std::vector<nn::ParamEntry*> out;
  for (auto& e : store.entries()) {
    const bool take = stage == Stage::Pretrain1   ? e.group != nn::ParamGroup::Cross
                      : stage == Stage::Pretrain2 ? !nn::is_encoder_group(e.group)
                                                  : true;
    if (take) out.push_back(&e);
  }
  return out;
}

MaskedText mask_tokens(const encoder::TextBatch& text, double rate, std::size_t vocab_size, std::mt19937_64& rng) {
  MaskedText m;
  m.text = text;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> word(encoder::Vocabulary::kUnk + 1, static_cast<int>(vocab_size) - 1);
  for (std::size_t b = 0; b < text.batch; ++b)
    for (std::size_t t = 0; t < text.length; ++t) {
      const int id = text.ids[b * text.length + t];
      if (!text.valid[b * text.length + t] || id == encoder::Vocabulary::kCls || id == encoder::Vocabulary::kSep ||
          id == encoder::Vocabulary::kPad)
        continue;
      if (u(rng) >= rate) continue;
      m.positions.push_back({b, t});
      m.targets.push_back(id);
      const double r = u(rng);
      int& slot = m.text.ids[b * text.length + t];
      if (r < 0.8)
        slot = encoder::Vocabulary::kMask;
      else if (r < 0.9)
        slot = word(rng);
    }
  return m;
}

PretrainInputs make_itm_pairs(const data::Batch& batch, std::mt19937_64& rng, double negative_rate) {
  const auto& tb = batch.text;
  std::vector<std::vector<int>> seqs;
  for (std::size_t b = 0; b < tb.batch; ++b) {
    const std::size_t n = tb.sequence_length(b);
    seqs.emplace_back(tb.ids.begin() + static_cast<std::ptrdiff_t>(b * tb.length),
                      tb.ids.begin() + static_cast<std::ptrdiff_t>(b * tb.length + n));
  }
  PretrainInputs p;
  p.itm_labels.assign(tb.batch, 1);
  p.vqa_labels = batch.labels;
  auto paired = seqs;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t b = 0; b < tb.batch; ++b) {
    if (u(rng) >= negative_rate) continue;
    std::vector<std::size_t> others;
    for (std::size_t o = 0; o < tb.batch; ++o)
      if (seqs[o] != seqs[b]) others.push_back(o);
    if (others.empty()) continue;
    paired[b] = seqs[others[std::uniform_int_distribution<std::size_t>(0, others.size() - 1)(rng)]];
    p.itm_labels[b] = 0;
    p.vqa_labels[b] = -1;
  }
  p.text = encoder::TextBatch::from_sequences(paired);
  return p;
}

cross::LossTerms compute_losses(const CapsVLModel& model, const data::Batch& batch, const TrainConfig& cfg,
                                const nn::ForwardContext& ctx, std::mt19937_64& rng) {
  cross::LossTerms terms;
  if (cfg.stage == Stage::Finetune) {
    const auto out = model.forward(batch.images, batch.text, Stage::Finetune, ctx);
    terms.vqa = ag::cross_entropy(model.vqa_head()(out.pooled), batch.labels);
    return terms;
  }
  PretrainInputs pairs;
  if (cfg.itm) {
    pairs = make_itm_pairs(batch, rng);
  } else {
    pairs = {batch.text, std::vector<int>(batch.labels.size(), 1), batch.labels};
  }
  MaskedText masked{pairs.text, {}, {}};
  if (cfg.mlm) masked = mask_tokens(pairs.text, cfg.mask_rate, model.config().vocab_size, rng);
  const auto out = model.forward(batch.images, masked.text, cfg.stage, ctx);
  if (cfg.mlm) terms.mlm = ag::cross_entropy(model.mlm_head()(out.mlm_features, masked.positions), masked.targets);
  if (cfg.itm) terms.itm = ag::cross_entropy(model.itm_head()(out.pooled), pairs.itm_labels);
  if (cfg.vqa) terms.vqa = ag::cross_entropy(model.vqa_head()(out.pooled), pairs.vqa_labels);
  return terms;
}

nlohmann::json to_json(const StepRecord& r) {
  nlohmann::json j{{"stage", r.stage}, {"epoch", r.epoch}, {"step", r.step}, {"loss", r.loss},
                   {"mlm", r.mlm},     {"itm", r.itm},     {"vqa", r.vqa},   {"lr", r.lr}};
  if (r.val_accuracy) j["val_accuracy"] = *r.val_accuracy;
  return j;
}

double evaluate_accuracy(const CapsVLModel& model, const data::Dataset& ds, const encoder::Vocabulary& vocab,
                         std::size_t batch_size) {
  if (ds.samples.empty()) return 0.0;
  ag::NoGradGuard guard;
  const nn::ForwardContext ctx;
  std::size_t correct = 0;
  for (const auto& idx : data::batch_indices(ds.samples.size(), batch_size, false, 0)) {
    const auto batch = data::make_batch(ds, idx, vocab, model.config().stem);
    const auto out = model.forward(batch.images, batch.text, Stage::Finetune, ctx);
    const auto logits = model.vqa_head()(out.pooled);
    const std::size_t A = logits.dim(1);
    const auto v = logits.data();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto row = v.subspan(b * A, A);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == batch.labels[b]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.samples.size());
}

namespace {

double value_or_zero(const std::optional<ag::Tensor>& t) { return t ? t->item() : 0.0; }

// Shared loop. Parameters outside `params` have gradient tracking switched
// off for the duration so backward never reaches them.
TrainResult run(CapsVLModel& model, const TrainData& data, const TrainConfig& cfg, const LogSink& sink) {
  cfg.validate();
  if (!data.train || !data.vocab) throw ConfigError("training needs a dataset and a vocabulary");
  if (data.train->samples.empty()) throw ConfigError("training dataset is empty");
  auto& store = model.params();
  auto params = trainable_parameters(store, cfg.stage);
  std::vector<bool> saved;
  for (auto& e : store.entries()) {
    saved.push_back(e.tensor.requires_grad());
    const bool on = std::find(params.begin(), params.end(), &e) != params.end();
    e.tensor.set_requires_grad(on);
  }
  struct Restore {
    nn::ParameterStore& store;
    std::vector<bool>& saved;
    ~Restore() {
      for (std::size_t i = 0; i < saved.size(); ++i) store.entries()[i].tensor.set_requires_grad(saved[i]);
    }
  } restore_flags{store, saved};

  AdamW opt(params, cfg);
  TrainResult result;
  result.optimized_parameters = opt.parameter_count();
  const std::size_t per_epoch = (data.train->samples.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total = per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);

  std::mt19937_64 rng(cfg.seed);
  const nn::ForwardContext ctx{true, model.config().encoder.dropout, &rng};
  const bool select_best = cfg.stage == Stage::Finetune && data.val && !data.val->samples.empty();
  std::optional<Checkpoint> best;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs && step < total; ++epoch) {
    const auto batches = data::batch_indices(data.train->samples.size(), cfg.batch_size, true,
                                             cfg.seed * 7919u + epoch + 1);
    for (const auto& idx : batches) {
      if (step >= total) break;
      const auto batch = data::make_batch(*data.train, idx, *data.vocab, model.config().stem);
      store.zero_grad();
      cross::LossTerms terms;
      ag::Tensor loss;
      try {
        terms = compute_losses(model, batch, cfg, ctx, rng);
        loss = cross::combined_loss(terms);
      } catch (const NumericalError& e) {
        throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(step),
                              snapshot(model, cfg.stage, step));
      }
      loss.backward();
      const double lr = learning_rate_at(step, total, cfg.learning_rate, cfg.warmup_fraction);
      const double gnorm = opt.step(lr);  // leaves weights untouched when non-finite
      if (!std::isfinite(gnorm))
        throw DivergenceError("non-finite gradient at step " + std::to_string(step), snapshot(model, cfg.stage, step));
      StepRecord rec{to_string(cfg.stage), epoch, step, loss.item(), value_or_zero(terms.mlm),
                     value_or_zero(terms.itm), value_or_zero(terms.vqa), lr, std::nullopt};
      ++step;
      const bool epoch_end = &idx == &batches.back() || step == total;
      if (select_best && epoch_end) {
        rec.val_accuracy = evaluate_accuracy(model, *data.val, *data.vocab);
        if (!result.best_val_accuracy || *rec.val_accuracy > *result.best_val_accuracy) {
          result.best_val_accuracy = rec.val_accuracy;
          best = snapshot(model, cfg.stage, step);
        }
      }
      result.log.push_back(rec);
      if (sink) sink(rec);
    }
  }
  result.checkpoint = best ? *best : snapshot(model, cfg.stage, step);
  if (best) restore(model, *best);
  if (result.best_val_accuracy) result.checkpoint.extra["val_accuracy"] = *result.best_val_accuracy;
  return result;
}

}  // namespace

TrainResult pretrain_stage1(CapsVLModel& model, const TrainData& data, const TrainConfig& cfg, const LogSink& sink) {
  if (cfg.stage != Stage::Pretrain1) throw ConfigError("pretrain_stage1 needs a pretrain1 config");
  return run(model, data, cfg, sink);
}

TrainResult pretrain_stage2(CapsVLModel& model, const Checkpoint& stage1, const TrainData& data, const TrainConfig& cfg,
                            const LogSink& sink) {
  if (cfg.stage != Stage::Pretrain2) throw ConfigError("pretrain_stage2 needs a pretrain2 config");
  if (stage1.stage != Stage::Pretrain1)
    throw ConfigError("stage-2 pretraining requires a stage-1 checkpoint, got a " + to_string(stage1.stage) + " one");
  restore(model, stage1);
  return run(model, data, cfg, sink);
}

TrainResult finetune_vqa(CapsVLModel& model, const Checkpoint* init, const TrainData& data, const TrainConfig& cfg,
                         const LogSink& sink) {
  if (cfg.stage != Stage::Finetune) throw ConfigError("finetune_vqa needs a finetune config");
  if (init) {
    if (init->stage == Stage::Pretrain1 && !cfg.from_scratch)
      throw ConfigError("finetuning requires a stage-2 checkpoint (or from_scratch)");
    restore(model, *init);
  } else if (!cfg.from_scratch) {
    throw ConfigError("finetuning requires a stage-2 checkpoint (or from_scratch)");
  }
  return run(model, data, cfg, sink);
}

}  // namespace capsvl::training
