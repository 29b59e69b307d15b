#include "cli.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "capsvl/errors.hpp"
#include "capsvl/grounding.hpp"
#include "capsvl/training.hpp"

namespace capsvl::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Usage problems that surface after parsing (exit code 2).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

bool verbose() {
  const char* v = std::getenv("CAPSVL_VERBOSE");
  return v && *v && std::string(v) != "0";
}

json read_json_file(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw UsageError(what + " not found: " + path.string());
  std::ifstream in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(what + " " + path.string() + " is not valid JSON: " + e.what());
  }
}

ModelConfig preset_config(const std::string& name) {
  if (name == "desk") return ModelConfig::desk();
  if (name == "toy") return ModelConfig::toy();
  if (name == "full") return ModelConfig::full_scale();
  throw UsageError("unknown preset '" + name + "' (desk, toy, full)");
}

// Shared model options: a preset, optionally patched by the "model" object
// of a config file.
struct ModelOptions {
  std::string preset = "desk";
  std::string config_file;
  bool given = false;  // user asked for a specific configuration

  void add(CLI::App* cmd) {
    cmd->add_option("--preset", preset, "Model preset: desk, toy or full")->check(CLI::IsMember({"desk", "toy", "full"}));
    cmd->add_option("--config", config_file, "JSON config file with optional \"model\" and \"train\" objects");
  }

  void finalize(CLI::App* cmd) { given = cmd->count("--preset") > 0 || !config_file.empty(); }

  json file() const { return config_file.empty() ? json::object() : read_json_file(config_file, "config file"); }

  ModelConfig model() const {
    const auto cfg_json = file();
    std::string name = preset;
    if (cfg_json.contains("preset")) name = cfg_json.at("preset").get<std::string>();
    json j = preset_config(name);
    if (cfg_json.contains("model")) j.merge_patch(cfg_json.at("model"));
    auto cfg = j.get<ModelConfig>();
    cfg.validate();
    return cfg;
  }
};

struct DataDir {
  fs::path root;
  encoder::Vocabulary vocab;
  std::vector<std::string> answers;

  explicit DataDir(const fs::path& dir) : root(dir) {
    if (!fs::is_directory(dir)) throw UsageError("data directory not found: " + dir.string());
    vocab = encoder::Vocabulary(data::read_lines(dir / "vocab.txt"));
    answers = data::read_lines(dir / "answers.txt");
  }

  data::Dataset split(const std::string& name) const {
    const auto manifest = root / (name + ".jsonl");
    if (!fs::exists(manifest)) throw UsageError("split manifest not found: " + manifest.string());
    return data::load_dataset(manifest);
  }

  void check_fits(const ModelConfig& cfg) const {
    if (vocab.size() > cfg.vocab_size)
      throw ConfigError("dataset vocabulary has " + std::to_string(vocab.size()) + " tokens, model vocab_size is " +
                        std::to_string(cfg.vocab_size));
    if (answers.size() > cfg.answer_count)
      throw ConfigError("dataset has " + std::to_string(answers.size()) + " answers, model answer_count is " +
                        std::to_string(cfg.answer_count));
  }
};

// Model from a checkpoint; when the user named a configuration it must
// match the checkpoint's.
std::unique_ptr<CapsVLModel> load_model(const std::string& ckpt_path, const ModelOptions& opts,
                                        training::Checkpoint* ckpt_out = nullptr) {
  auto ckpt = training::load_checkpoint(ckpt_path);
  std::unique_ptr<CapsVLModel> model;
  if (opts.given) {
    model = std::make_unique<CapsVLModel>(opts.model());
    training::restore(*model, ckpt);
  } else {
    model = training::model_from_checkpoint(ckpt);
  }
  if (ckpt_out) *ckpt_out = std::move(ckpt);
  return model;
}

// ---- gen-data ----

struct GenOptions {
  std::string spec_file, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> samples, human_maps;
};

int gen_data(const GenOptions& o, std::ostream& out) {
  data::SyntheticSpec spec;
  if (!o.spec_file.empty()) {
    if (!fs::exists(o.spec_file)) throw UsageError("spec not found: " + o.spec_file);
    try {
      read_json_file(o.spec_file, "spec").get_to(spec);
    } catch (const json::exception& e) {
      throw ConfigError("spec " + o.spec_file + ": " + e.what());
    }
  }
  if (o.seed) spec.seed = *o.seed;
  if (o.samples) spec.samples = *o.samples;
  if (o.human_maps) spec.human_maps = *o.human_maps;
  const auto ds = data::generate_synthetic(spec);
  const auto files = data::write_dataset(ds, spec, o.out_dir);
  std::map<std::string, std::size_t> types;
  for (const auto* split : {&ds.train, &ds.val})
    for (const auto& s : *split) ++types[s.question_type];
  out << "train manifest: " << files.train_manifest.string() << " (" << ds.train.size() << " samples)\n";
  out << "val manifest:   " << files.val_manifest.string() << " (" << ds.val.size() << " samples)\n";
  out << "answers: " << ds.answers.size() << "  vocabulary words: " << ds.words.size() << "\n";
  for (const auto& [t, n] : types) out << "  " << t << ": " << n << "\n";
  return kOk;
}

// ---- train ----

struct TrainOptions {
  ModelOptions model;
  std::string stage, data_dir, ckpt_in, ckpt_out, log_file;
  std::optional<double> lr;
  std::optional<std::size_t> batch, epochs, max_steps;
  std::optional<std::uint64_t> seed;
  bool from_scratch = false;
};

int train(const TrainOptions& o, std::ostream& out) {
  const Stage stage = parse_stage(o.stage);
  if (stage == Stage::Pretrain2 && o.ckpt_in.empty())
    throw UsageError("pretrain2 requires a stage-1 checkpoint: pass --ckpt-in from a pretrain1 run");
  if (stage == Stage::Finetune && o.ckpt_in.empty() && !o.from_scratch)
    throw UsageError("finetune requires a stage-2 checkpoint (--ckpt-in) or --from-scratch");

  const DataDir dir(o.data_dir);
  const auto train_set = dir.split("train");
  const auto val_set = dir.split("val");

  std::optional<training::Checkpoint> init;
  std::unique_ptr<CapsVLModel> model;
  if (!o.ckpt_in.empty()) {
    init.emplace();
    model = load_model(o.ckpt_in, o.model, &*init);
  } else {
    model = std::make_unique<CapsVLModel>(o.model.model());
  }
  dir.check_fits(model->config());

  auto cfg = training::TrainConfig::defaults(stage);
  const auto file = o.model.file();
  if (file.contains("train")) training::from_json(file.at("train"), cfg);
  cfg.stage = stage;
  if (o.lr) cfg.learning_rate = *o.lr;
  if (o.batch) cfg.batch_size = *o.batch;
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.max_steps) cfg.max_steps = *o.max_steps;
  if (o.seed) cfg.seed = *o.seed;
  if (o.from_scratch) cfg.from_scratch = true;
  cfg.validate();

  const fs::path log_path = o.log_file.empty() ? fs::path(o.ckpt_out + ".log.jsonl") : fs::path(o.log_file);
  std::ofstream log(log_path);
  if (!log) throw LoadError("cannot write log " + log_path.string());
  const bool loud = verbose();
  double epoch_loss = 0;
  std::size_t epoch_steps = 0, current_epoch = 0;
  auto flush_epoch = [&] {
    if (epoch_steps == 0) return;
    out << to_string(stage) << " epoch " << current_epoch + 1 << ": mean loss " << std::setprecision(4)
        << epoch_loss / double(epoch_steps) << "\n";
    epoch_loss = 0;
    epoch_steps = 0;
  };
  auto sink = [&](const training::StepRecord& r) {
    log << training::to_json(r).dump() << "\n";
    if (r.epoch != current_epoch) flush_epoch();
    current_epoch = r.epoch;
    epoch_loss += r.loss;
    ++epoch_steps;
    if (loud) out << training::to_json(r).dump() << "\n";
    if (r.val_accuracy) out << "  val accuracy " << std::setprecision(4) << *r.val_accuracy * 100 << "%\n";
  };

  const training::TrainData td{&train_set, &val_set, &dir.vocab};
  training::TrainResult result;
  switch (stage) {
    case Stage::Pretrain1:
      result = training::pretrain_stage1(*model, td, cfg, sink);
      break;
    case Stage::Pretrain2:
      result = training::pretrain_stage2(*model, *init, td, cfg, sink);
      break;
    case Stage::Finetune:
      result = training::finetune_vqa(*model, init ? &*init : nullptr, td, cfg, sink);
      break;
  }
  flush_epoch();
  result.checkpoint.extra["train_config"] = cfg;
  training::save_checkpoint(o.ckpt_out, result.checkpoint);
  out << "optimized parameters: " << result.optimized_parameters << "\n";
  out << "steps: " << result.log.size() << "\n";
  if (result.best_val_accuracy) out << "best val accuracy: " << *result.best_val_accuracy * 100 << "%\n";
  out << "checkpoint: " << o.ckpt_out << "\nlog: " << log_path.string() << "\n";
  return kOk;
}

// ---- eval ----

struct EvalCli {
  ModelOptions model;
  std::string ckpt, data_dir, split = "val", head = "mean", target = "answer", heatmaps, report;
  std::size_t layer = 0, heatmap_limit = 16;
  double det_thresh = 0.5, accept = 0.5;
  bool sweep = false, per_head = false, macro = false, eight = false;
};

std::optional<std::size_t> parse_head(const std::string& s, std::size_t heads) {
  if (s == "mean") return std::nullopt;
  std::size_t k = 0;
  try {
    std::size_t used = 0;
    k = std::stoul(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
  } catch (const std::exception&) {
    throw UsageError("--head must be 'mean' or a head index, got '" + s + "'");
  }
  if (k >= heads) throw UsageError("--head " + s + " out of range 0.." + std::to_string(heads - 1));
  return k;
}

grounding::AttentionMap select_map(const grounding::SampleAttention& sa, std::optional<std::size_t> head) {
  return head ? sa.heads[*head] : sa.mean();
}

void write_heatmaps(const std::vector<grounding::SampleAttention>& att, const data::Dataset& ds,
                    const grounding::EvalOptions& opt, const ModelConfig& cfg, const fs::path& dir,
                    std::size_t limit) {
  fs::create_directories(dir);
  std::size_t written = 0;
  for (std::size_t i = 0; i < ds.samples.size() && written < limit; ++i) {
    const auto gts = grounding::grid_boxes(ds.samples[i], opt.target, cfg.grid_h, cfg.grid_w);
    const auto map = grounding::normalize_map(select_map(att[i], opt.head));
    const auto dets = grounding::detect_regions(map, opt.detection_threshold, opt.connectivity);
    std::vector<std::pair<double, double>> points;
    for (std::size_t h = 0; h < att[i].heads.size(); ++h) {
      if (opt.head && *opt.head != h) continue;
      const auto cell = grounding::argmax_cell(att[i].heads[h]);
      points.emplace_back(double(cell % cfg.grid_w) + 0.5, double(cell / cfg.grid_w) + 0.5);
    }
    const auto img = grounding::overlay_image(map, dets, gts, grounding::centroid(points), 16);
    write_pnm(dir / (ds.samples[i].sample_id + "_" + grounding::to_string(opt.target) + ".ppm"), img);
    ++written;
  }
}

int eval(const EvalCli& o, std::ostream& out) {
  const auto model = load_model(o.ckpt, o.model);
  const auto& cfg = model->config();
  const DataDir dir(o.data_dir);
  dir.check_fits(cfg);
  const auto ds = dir.split(o.split);

  grounding::EvalOptions opt;
  opt.head = parse_head(o.head, cfg.encoder.heads);
  opt.detection_threshold = o.det_thresh;
  opt.accept = o.accept;
  opt.connectivity = o.eight ? grounding::Connectivity::Eight : grounding::Connectivity::Four;
  opt.averaging = o.macro ? grounding::Averaging::Macro : grounding::Averaging::Micro;
  opt.sweep = o.sweep;
  opt.per_head = o.per_head;

  std::vector<int> predictions;
  const auto att = grounding::collect_attention(*model, ds, dir.vocab, o.layer, &predictions);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) correct += predictions[i] == ds.samples[i].label;
  const double accuracy = ds.samples.empty() ? 0.0 : double(correct) / double(ds.samples.size());

  std::vector<grounding::Target> targets;
  if (o.target == "both")
    targets = {grounding::Target::Answer, grounding::Target::Question};
  else
    targets = {grounding::parse_target(o.target)};

  json report = json::object();
  for (const auto target : targets) {
    opt.target = target;
    auto metrics = grounding::evaluate_grounding(att, ds, opt, cfg.grid_h, cfg.grid_w);
    metrics.answer_accuracy = accuracy;
    out << metrics.text() << "\n";
    report[grounding::to_string(target)] = metrics.json();
    if (!o.heatmaps.empty()) write_heatmaps(att, ds, opt, cfg, o.heatmaps, o.heatmap_limit);
  }
  if (!o.report.empty()) {
    std::ofstream f(o.report);
    if (!f) throw LoadError("cannot write report " + o.report);
    f << report.dump(2) << "\n";
  }
  return kOk;
}

// ---- eval-hat ----

struct HatCli {
  ModelOptions model;
  std::string ckpt, data_dir, split = "val", head = "mean", per_sample;
  std::size_t layer = 0;
};

grounding::AttentionMap read_human_map(const fs::path& path) {
  const auto img = read_pnm(path);
  grounding::AttentionMap m;
  m.height = img.height;
  m.width = img.width;
  m.query = "human";
  m.values.resize(img.width * img.height);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    double v = 0;
    for (std::size_t c = 0; c < img.channels; ++c) v += img.pixels[i * img.channels + c];
    m.values[i] = v / (255.0 * double(img.channels));
  }
  return m;
}

int eval_hat(const HatCli& o, std::ostream& out) {
  const auto model = load_model(o.ckpt, o.model);
  const auto& cfg = model->config();
  const DataDir dir(o.data_dir);
  dir.check_fits(cfg);
  const auto ds = dir.split(o.split);
  std::vector<std::string> missing;
  for (const auto& s : ds.samples)
    if (s.human_maps.empty()) missing.push_back(s.sample_id);
  if (!missing.empty()) {
    std::string list;
    for (std::size_t i = 0; i < missing.size(); ++i) list += (i ? ", " : "") + missing[i];
    throw LoadError("missing human attention maps for " + std::to_string(missing.size()) + " samples: " + list);
  }
  const auto head = parse_head(o.head, cfg.encoder.heads);
  const auto att = grounding::collect_attention(*model, ds, dir.vocab, o.layer);
  std::vector<double> rho;
  std::ofstream per;
  if (!o.per_sample.empty()) {
    per.open(o.per_sample);
    if (!per) throw LoadError("cannot write " + o.per_sample);
    per << "sample_id,maps,rank_correlation\n";
  }
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    std::vector<grounding::AttentionMap> human;
    for (const auto& p : ds.samples[i].human_maps) human.push_back(read_human_map(ds.root / p));
    rho.push_back(grounding::rank_correlation(select_map(att[i], head), human));
    if (per) per << ds.samples[i].sample_id << "," << human.size() << "," << std::setprecision(6) << rho.back() << "\n";
  }
  double mean = 0, var = 0;
  for (double r : rho) mean += r;
  mean /= double(std::max<std::size_t>(rho.size(), 1));
  for (double r : rho) var += (r - mean) * (r - mean);
  const double sd = rho.empty() ? 0.0 : std::sqrt(var / double(rho.size()));
  out << "samples: " << rho.size() << "\n";
  out << "mean rank correlation: " << std::fixed << std::setprecision(3) << mean << " +- " << std::setprecision(4) << sd
      << "\n";
  if (!o.per_sample.empty()) out << "per-sample breakdown: " << o.per_sample << "\n";
  return kOk;
}

// ---- inspect-capsules ----

struct InspectCli {
  ModelOptions model;
  std::string ckpt, data_dir, split = "val", out_dir;
};

int inspect_capsules(const InspectCli& o, std::ostream& out) {
  const auto model = load_model(o.ckpt, o.model);
  const auto& cfg = model->config();
  const DataDir dir(o.data_dir);
  const auto ds = dir.split(o.split);
  fs::create_directories(o.out_dir);
  std::vector<std::vector<std::string>> groups(cfg.capsules);
  std::ofstream vectors(fs::path(o.out_dir) / "vectors.jsonl");
  if (!vectors) throw LoadError("cannot write to " + o.out_dir);
  for (const auto& idx : data::batch_indices(ds.samples.size(), 64, false, 0)) {
    const auto batch = data::make_batch(ds, idx, dir.vocab, cfg.stem);
    ag::NoGradGuard guard;
    const auto summary = grounding::capsule_activation_summary(model->encode_capsules(batch.images));
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto& id = ds.samples[idx[b]].sample_id;
      groups[summary.groups[b]].push_back(id);
      vectors << json{{"sample_id", id}, {"group", summary.groups[b]}, {"activations", summary.vectors[b]}}.dump()
              << "\n";
    }
  }
  std::size_t files = 0;
  for (std::size_t c = 0; c < groups.size(); ++c) {
    if (groups[c].empty()) continue;
    std::ostringstream name;
    name << "capsule_" << std::setw(2) << std::setfill('0') << c << ".txt";
    data::write_lines(fs::path(o.out_dir) / name.str(), groups[c]);
    out << name.str() << ": " << groups[c].size() << " images\n";
    ++files;
  }
  out << files << " non-empty groups of " << cfg.capsules << "; vectors in "
      << (fs::path(o.out_dir) / "vectors.jsonl").string() << "\n";
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Capsule-based vision-language grounding: data, training and evaluation"};
  app.require_subcommand(1);

  GenOptions gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic shapes VQA dataset");
  gen_cmd->add_option("--spec", gen.spec_file, "Synthetic dataset spec (JSON)");
  gen_cmd->add_option("--out", gen.out_dir, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Override the spec seed");
  gen_cmd->add_option("--samples", gen.samples, "Override the sample count");
  gen_cmd->add_option("--human-maps", gen.human_maps, "Simulated human attention maps per sample");

  TrainOptions tr;
  auto* train_cmd = app.add_subcommand("train", "Run one training stage");
  train_cmd->add_option("--stage", tr.stage, "pretrain1, pretrain2 or finetune")
      ->required()
      ->check(CLI::IsMember({"pretrain1", "pretrain2", "finetune"}));
  train_cmd->add_option("--data", tr.data_dir, "Dataset directory")->required();
  train_cmd->add_option("--ckpt-in", tr.ckpt_in, "Checkpoint to start from");
  train_cmd->add_option("--ckpt-out", tr.ckpt_out, "Checkpoint to write")->required();
  train_cmd->add_option("--log", tr.log_file, "JSONL step log (default <ckpt-out>.log.jsonl)");
  train_cmd->add_option("--lr", tr.lr, "Peak learning rate");
  train_cmd->add_option("--batch", tr.batch, "Batch size");
  train_cmd->add_option("--epochs", tr.epochs, "Epochs");
  train_cmd->add_option("--max-steps", tr.max_steps, "Stop after this many steps");
  train_cmd->add_option("--seed", tr.seed, "Shuffling, masking and dropout seed");
  train_cmd->add_flag("--from-scratch", tr.from_scratch, "Finetune without a pretrained checkpoint");
  tr.model.add(train_cmd);

  EvalCli ev;
  auto* eval_cmd = app.add_subcommand("eval", "Answer accuracy and grounding metrics");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--data", ev.data_dir, "Dataset directory")->required();
  eval_cmd->add_option("--split", ev.split, "Manifest name inside the dataset directory");
  eval_cmd->add_option("--layer", ev.layer, "Cross layer (1-based, 0 = last)");
  eval_cmd->add_option("--head", ev.head, "'mean' or a head index");
  eval_cmd->add_option("--det-thresh", ev.det_thresh, "Attention threshold for region detection")
      ->check(CLI::Range(0.0, 1.0));
  eval_cmd->add_option("--accept", ev.accept, "Overlap/IOU acceptance threshold")->check(CLI::Range(0.0, 1.0));
  eval_cmd->add_option("--target", ev.target, "answer, question or both")
      ->check(CLI::IsMember({"answer", "question", "both"}));
  eval_cmd->add_flag("--sweep", ev.sweep, "Acceptance-threshold sweep 0.05..0.95");
  eval_cmd->add_flag("--per-head", ev.per_head, "Per-head table and clustered pointing game");
  eval_cmd->add_flag("--macro", ev.macro, "Macro-average over samples");
  eval_cmd->add_flag("--eight-connected", ev.eight, "8-connected regions");
  eval_cmd->add_option("--heatmaps", ev.heatmaps, "Directory for overlay images");
  eval_cmd->add_option("--heatmap-limit", ev.heatmap_limit, "Overlay images per target");
  eval_cmd->add_option("--report", ev.report, "Write the report as JSON");
  ev.model.add(eval_cmd);

  HatCli hat;
  auto* hat_cmd = app.add_subcommand("eval-hat", "Rank correlation with human attention maps");
  hat_cmd->add_option("--ckpt", hat.ckpt, "Checkpoint")->required();
  hat_cmd->add_option("--data", hat.data_dir, "Dataset directory with human maps")->required();
  hat_cmd->add_option("--split", hat.split, "Manifest name inside the dataset directory");
  hat_cmd->add_option("--layer", hat.layer, "Cross layer (1-based, 0 = last)");
  hat_cmd->add_option("--head", hat.head, "'mean' or a head index");
  hat_cmd->add_option("--per-sample", hat.per_sample, "CSV with one correlation per sample");
  hat.model.add(hat_cmd);

  InspectCli ins;
  auto* ins_cmd = app.add_subcommand("inspect-capsules", "Group images by their most active capsule");
  ins_cmd->add_option("--ckpt", ins.ckpt, "Checkpoint")->required();
  ins_cmd->add_option("--data", ins.data_dir, "Dataset directory")->required();
  ins_cmd->add_option("--split", ins.split, "Manifest name inside the dataset directory");
  ins_cmd->add_option("--out", ins.out_dir, "Output directory")->required();
  ins.model.add(ins_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kUsageError;
  }

  try {
    if (*gen_cmd) return gen_data(gen, out);
    if (*train_cmd) {
      tr.model.finalize(train_cmd);
      return train(tr, out);
    }
    if (*eval_cmd) {
      ev.model.finalize(eval_cmd);
      return eval(ev, out);
    }
    if (*hat_cmd) {
      hat.model.finalize(hat_cmd);
      return eval_hat(hat, out);
    }
    if (*ins_cmd) {
      ins.model.finalize(ins_cmd);
      return inspect_capsules(ins, out);
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeFailure;
  }
  return kUsageError;
}

}  // namespace capsvl::cli
