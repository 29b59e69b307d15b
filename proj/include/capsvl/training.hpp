#pragma once

// Two-stage pretraining, VQA finetuning, optimizer and checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "capsvl/data.hpp"
#include "capsvl/errors.hpp"
#include "capsvl/model.hpp"

namespace capsvl::training {

struct TrainConfig {
  Stage stage = Stage::Pretrain1;
  double learning_rate = 5e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 4;
  std::uint64_t seed = 1;

  double weight_decay = 0.01;
  double beta1 = 0.9, beta2 = 0.999, adam_epsilon = 1e-6;
  double warmup_fraction = 0.1;
  double max_grad_norm = 1.0;  // <= 0 disables clipping

  bool mlm = true, itm = true, vqa = true;
  double mask_rate = 0.15;
  /// Finetune without a stage-2 checkpoint.
  bool from_scratch = false;
  /// Stop after this many optimizer steps (0 = run all epochs).
  std::size_t max_steps = 0;

  void validate() const;
  /// Desk-scale defaults for each stage.
  static TrainConfig defaults(Stage stage);
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Missing keys keep the values already in `c`.
void from_json(const nlohmann::json& j, TrainConfig& c);

struct NamedTensor {
  std::string name;
  ag::Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  nlohmann::json model_config;
  Stage stage = Stage::Pretrain1;
  std::size_t step = 0;
  std::vector<NamedTensor> params;
  nlohmann::json extra = nlohmann::json::object();
};

Checkpoint snapshot(const CapsVLModel& model, Stage stage, std::size_t step);
/// Copies parameter values into the model. Throws LoadError when the
/// configuration, names or shapes differ.
void restore(CapsVLModel& model, const Checkpoint& ckpt);

/// "CVLCKPT1", u32 header length, JSON header, raw little-endian doubles.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Builds a model from the checkpoint's config and restores its values.
std::unique_ptr<CapsVLModel> model_from_checkpoint(const Checkpoint& ckpt);

/// FNV-1a over a parameter's bytes; used for freeze checks.
std::uint64_t parameter_hash(const ag::Tensor& t);

/// Decoupled weight decay Adam over a fixed parameter list. Weight decay
/// skips rank-1 tensors (biases, norms, cost offsets).
class AdamW {
 public:
  AdamW(std::vector<nn::ParamEntry*> params, const TrainConfig& cfg);
  /// Applies one update with the given learning rate; returns the
  /// pre-clipping global gradient norm.
  double step(double lr);
  std::size_t parameter_count() const;
  const std::vector<nn::ParamEntry*>& params() const { return params_; }

 private:
  std::vector<nn::ParamEntry*> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_, decay_, clip_;
  std::size_t t_ = 0;
};

/// Linear warmup over the first warmup_fraction of steps, then linear decay to 0.
double learning_rate_at(std::size_t step, std::size_t total_steps, double base, double warmup_fraction);

/// Parameters a stage optimizes: stage 1 everything but cross-attention,
/// stage 2 everything but encoders/capsules, finetune everything.
std::vector<nn::ParamEntry*> trainable_parameters(nn::ParameterStore& store, Stage stage);

struct MaskedText {
  encoder::TextBatch text;
  std::vector<cross::MaskedPosition> positions;
  std::vector<int> targets;
};

/// Selects word tokens with probability `rate`; of those 80% become [MASK],
/// 10% a random word and 10% stay unchanged.
MaskedText mask_tokens(const encoder::TextBatch& text, double rate, std::size_t vocab_size, std::mt19937_64& rng);

/// Batch prepared for one pretraining step: some questions swapped for a
/// different question from the batch (ITM negatives).
struct PretrainInputs {
  encoder::TextBatch text;
  std::vector<int> itm_labels;  // 1 = matched
  std::vector<int> vqa_labels;  // -1 where the pair is mismatched
};

PretrainInputs make_itm_pairs(const data::Batch& batch, std::mt19937_64& rng, double negative_rate = 0.5);

/// Per-task losses for one batch in the given stage. Pretraining stages use
/// masked, partly mismatched text; finetuning uses VQA only.
cross::LossTerms compute_losses(const CapsVLModel& model, const data::Batch& batch, const TrainConfig& cfg,
                                const nn::ForwardContext& ctx, std::mt19937_64& rng);

struct StepRecord {
  std::string stage;
  std::size_t epoch = 0, step = 0;
  double loss = 0, mlm = 0, itm = 0, vqa = 0, lr = 0;
  std::optional<double> val_accuracy;
};

nlohmann::json to_json(const StepRecord& r);

/// Thrown when a loss or gradient turns non-finite; carries the last
/// parameters that produced a finite loss.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, Checkpoint last_good)
      : NumericalError(what), last_good_(std::move(last_good)) {}
  const Checkpoint& last_good() const { return last_good_; }

 private:
  Checkpoint last_good_;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepRecord> log;
  std::size_t optimized_parameters = 0;
  std::optional<double> best_val_accuracy;
};

struct TrainData {
  const data::Dataset* train = nullptr;
  const data::Dataset* val = nullptr;  // finetune model selection
  const encoder::Vocabulary* vocab = nullptr;
};

/// Called after every logged step (e.g. to append to a JSONL file).
using LogSink = std::function<void(const StepRecord&)>;

TrainResult pretrain_stage1(CapsVLModel& model, const TrainData& data, const TrainConfig& cfg,
                            const LogSink& sink = {});
/// Restores `stage1` and trains with encoders and capsules frozen.
TrainResult pretrain_stage2(CapsVLModel& model, const Checkpoint& stage1, const TrainData& data, const TrainConfig& cfg,
                            const LogSink& sink = {});
/// Restores `init` unless cfg.from_scratch; keeps the best validation epoch.
TrainResult finetune_vqa(CapsVLModel& model, const Checkpoint* init, const TrainData& data, const TrainConfig& cfg,
                         const LogSink& sink = {});

/// Answer accuracy (argmax) in eval mode.
double evaluate_accuracy(const CapsVLModel& model, const data::Dataset& ds, const encoder::Vocabulary& vocab,
                         std::size_t batch_size = 64);

}  // namespace capsvl::training
