#pragma once

// Synthetic shapes-VQA generation, manifest I/O and batching.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "capsvl/box.hpp"
#include "capsvl/encoder.hpp"
#include "capsvl/raster.hpp"
#include "capsvl/stem.hpp"
#include "capsvl/tensor.hpp"

namespace capsvl::data {

inline constexpr int kSchemaVersion = 1;

struct SceneObject {
  std::string shape;
  std::string color;
  BoundingBox box;  // pixel-tight
};

struct Sample {
  std::string sample_id;
  std::filesystem::path image_path;  // relative to the manifest directory
  Raster image;                      // raster stem
  std::vector<double> features;      // precomputed stem, [h, w, d1]
  std::vector<std::size_t> feature_shape;
  std::size_t image_width = 0, image_height = 0;
  std::string question;
  std::string answer;
  int label = -1;
  std::string question_type;
  std::vector<BoundingBox> answer_boxes;
  std::vector<BoundingBox> question_boxes;
  std::vector<SceneObject> scene;
  std::vector<std::filesystem::path> human_maps;
};

struct SyntheticSpec {
  std::size_t samples = 2000;
  std::size_t image_size = 56;
  std::size_t grid = 7;
  std::size_t object_size = 16;
  std::size_t min_objects = 2, max_objects = 3;
  std::vector<std::string> shapes{"circle", "square", "triangle"};
  std::vector<std::string> colors{"red", "green", "blue", "yellow"};
  /// Any of "color", "exists", "shape".
  std::vector<std::string> templates{"color", "exists", "shape"};
  /// Place objects on multiples of the cell size.
  bool snap_to_grid = true;
  double val_fraction = 0.2;
  /// Simulated human attention maps per sample (0 = none).
  std::size_t human_maps = 0;
  std::uint64_t seed = 7;

  /// ConfigError for malformed fields, GenerationError when the requested
  /// objects cannot fit.
  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

/// Answer list (index = label id) and question words for the vocabulary.
std::vector<std::string> answer_vocabulary(const SyntheticSpec& spec);
std::vector<std::string> question_words(const SyntheticSpec& spec);

struct SyntheticDataset {
  std::vector<Sample> train, val;
  std::vector<std::string> answers;
  std::vector<std::string> words;
};

/// Deterministic in spec.seed. Human maps are rendered by write_dataset.
SyntheticDataset generate_synthetic(const SyntheticSpec& spec);

struct DatasetFiles {
  std::filesystem::path train_manifest, val_manifest, answers, vocabulary;
};

/// Writes images/, optional hat/ maps, train.jsonl, val.jsonl, answers.txt,
/// vocab.txt and spec.json under out_dir.
DatasetFiles write_dataset(const SyntheticDataset& ds, const SyntheticSpec& spec, const std::filesystem::path& out_dir);

/// Simulated human attention for one sample: Gaussian blobs around the
/// answer (else question) objects, image resolution, 8-bit.
Raster render_human_map(const Sample& s, std::size_t object_size, std::uint64_t seed);

nlohmann::json sample_to_json(const Sample& s);
/// Throws LoadError naming the field (and sample id when known).
Sample sample_from_json(const nlohmann::json& j);

struct Dataset {
  std::filesystem::path root;  // manifest directory
  std::vector<Sample> samples;
};

/// Reads a JSONL manifest, validates every record and loads the referenced
/// images or feature blobs.
Dataset load_dataset(const std::filesystem::path& manifest, bool load_pixels = true);

std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);

/// Fixed-order or seeded-shuffled index batches; the last may be short.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, bool shuffle,
                                                    std::uint64_t seed);

struct Batch {
  std::vector<std::size_t> indices;
  ag::Tensor images;  // [B, H, W, c] raster or [B, h, w, d1] features
  encoder::TextBatch text;
  std::vector<int> labels;
};

/// Stacks pixels (scaled to [0, 1]) or features and tokenizes questions.
Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices, const encoder::Vocabulary& vocab,
                 const StemConfig& stem);

}  // namespace capsvl::data
