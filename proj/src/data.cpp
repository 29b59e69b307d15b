#include "capsvl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "capsvl/blob.hpp"
#include "capsvl/errors.hpp"

namespace capsvl::data {

namespace {

const std::map<std::string, std::array<std::uint8_t, 3>>& palette() {
  static const std::map<std::string, std::array<std::uint8_t, 3>> p{
      {"red", {220, 40, 40}},    {"green", {40, 190, 60}},   {"blue", {50, 80, 230}},
      {"yellow", {230, 210, 40}}, {"purple", {150, 60, 200}}, {"orange", {240, 140, 30}},
      {"cyan", {40, 200, 210}},  {"white", {235, 235, 235}},
  };
  return p;
}

const std::set<std::string>& known_shapes() {
  static const std::set<std::string> s{"circle", "square", "triangle", "diamond"};
  return s;
}

// Whether the pixel centred at (u, v) in an s x s slot belongs to the shape.
bool inside_shape(const std::string& shape, double u, double v, double s) {
  const double c = s / 2.0;
  if (shape == "square") return true;
  if (shape == "circle") return (u - c) * (u - c) + (v - c) * (v - c) <= c * c;
  if (shape == "triangle") return std::abs(u - c) <= v / 2.0;
  if (shape == "diamond") return std::abs(u - c) + std::abs(v - c) <= c;
  throw ConfigError("unknown shape '" + shape + "'");
}

// Paints the shape and returns its pixel-tight box.
BoundingBox paint(Raster& img, const std::string& shape, const std::string& color, std::size_t x, std::size_t y,
                  std::size_t size) {
  const auto rgb = palette().at(color);
  std::size_t x0 = img.width, y0 = img.height, x1 = 0, y1 = 0;
  for (std::size_t j = 0; j < size; ++j)
    for (std::size_t i = 0; i < size; ++i) {
      if (!inside_shape(shape, static_cast<double>(i) + 0.5, static_cast<double>(j) + 0.5,
                        static_cast<double>(size)))
        continue;
      const std::size_t px = x + i, py = y + j;
      for (std::size_t c = 0; c < 3; ++c) img.at(px, py, c) = rgb[c];
      x0 = std::min(x0, px);
      y0 = std::min(y0, py);
      x1 = std::max(x1, px + 1);
      y1 = std::max(y1, py + 1);
    }
  return {static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1), static_cast<double>(y1)};
}

template <class T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

std::string sample_name(std::size_t i) {
  std::ostringstream os;
  os << 's' << std::setw(6) << std::setfill('0') << i;
  return os.str();
}

// Scene plus question for one image.
Sample make_sample(const SyntheticSpec& spec, std::size_t index, std::mt19937_64& rng,
                   const std::vector<std::string>& answers) {
  const std::size_t n = std::uniform_int_distribution<std::size_t>(spec.min_objects, spec.max_objects)(rng);
  auto shapes = spec.shapes;
  auto colors = spec.colors;
  std::shuffle(shapes.begin(), shapes.end(), rng);
  std::shuffle(colors.begin(), colors.end(), rng);

  const std::size_t cell = spec.image_size / spec.grid;
  const std::size_t step = spec.snap_to_grid ? cell : 1;
  const std::size_t max_pos = (spec.image_size - spec.object_size) / step;
  std::uniform_int_distribution<std::size_t> pos(0, max_pos);

  std::vector<std::pair<std::size_t, std::size_t>> slots;
  for (int attempt = 0; attempt < 100 && slots.size() < n; ++attempt) {
    slots.clear();
    for (std::size_t k = 0; k < n; ++k) {
      bool placed = false;
      for (int t = 0; t < 200 && !placed; ++t) {
        const std::size_t x = pos(rng) * step, y = pos(rng) * step;
        placed = std::none_of(slots.begin(), slots.end(), [&](const auto& s) {
          return x < s.first + spec.object_size && s.first < x + spec.object_size && y < s.second + spec.object_size &&
                 s.second < y + spec.object_size;
        });
        if (placed) slots.emplace_back(x, y);
      }
      if (!placed) break;
    }
  }
  if (slots.size() < n)
    throw GenerationError("could not place " + std::to_string(n) + " non-overlapping objects of " +
                          std::to_string(spec.object_size) + " px for sample " + sample_name(index));

  Sample s;
  s.sample_id = sample_name(index);
  s.image_path = "images/" + s.sample_id + ".ppm";
  s.image = Raster(spec.image_size, spec.image_size, 3);
  s.image_width = s.image_height = spec.image_size;
  for (std::size_t k = 0; k < n; ++k)
    s.scene.push_back({shapes[k], colors[k], paint(s.image, shapes[k], colors[k], slots[k].first, slots[k].second,
                                                   spec.object_size)});

  s.question_type = pick(spec.templates, rng);
  const auto& obj = pick(s.scene, rng);
  if (s.question_type == "color") {
    s.question = "what color is the " + obj.shape + "?";
    s.answer = obj.color;
    s.answer_boxes = s.question_boxes = {obj.box};
  } else if (s.question_type == "shape") {
    s.question = "what shape is " + obj.color + "?";
    s.answer = obj.shape;
    s.answer_boxes = s.question_boxes = {obj.box};
  } else {
    const bool yes = std::bernoulli_distribution(0.5)(rng);
    if (yes) {
      s.question = "is there a " + obj.color + " " + obj.shape + "?";
      s.answer = "yes";
      s.answer_boxes = s.question_boxes = {obj.box};
    } else {
      std::vector<std::pair<std::string, std::string>> absent;
      for (const auto& c : spec.colors)
        for (const auto& sh : spec.shapes)
          if (std::none_of(s.scene.begin(), s.scene.end(),
                           [&](const SceneObject& o) { return o.color == c && o.shape == sh; }))
            absent.emplace_back(c, sh);
      const auto& [c, sh] = pick(absent, rng);
      s.question = "is there a " + c + " " + sh + "?";
      s.answer = "no";
      for (const auto& o : s.scene)
        if (o.color == c || o.shape == sh) s.question_boxes.push_back(o.box);
    }
  }
  s.label = static_cast<int>(std::find(answers.begin(), answers.end(), s.answer) - answers.begin());
  for (std::size_t k = 0; k < spec.human_maps; ++k)
    s.human_maps.push_back("hat/" + s.sample_id + "_" + std::to_string(k) + ".pgm");
  return s;
}

nlohmann::json box_json(const BoundingBox& b) { return nlohmann::json::array({b.x0, b.y0, b.x1, b.y1}); }

nlohmann::json boxes_json(const std::vector<BoundingBox>& boxes) {
  auto a = nlohmann::json::array();
  for (const auto& b : boxes) a.push_back(box_json(b));
  return a;
}

class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string id) : j_(j), id_(std::move(id)) {}

  template <class T>
  T get(const char* field) const {
    if (!j_.contains(field)) fail(field, "missing");
    try {
      return j_.at(field).get<T>();
    } catch (const nlohmann::json::exception&) {
      fail(field, "has the wrong type");
    }
  }
  template <class T>
  T get_or(const char* field, T fallback) const {
    return j_.contains(field) ? get<T>(field) : fallback;
  }
  BoundingBox box(const nlohmann::json& v, const char* field) const {
    if (!v.is_array() || v.size() != 4) fail(field, "entries must be [x0, y0, x1, y1]");
    BoundingBox b{v[0].get<double>(), v[1].get<double>(), v[2].get<double>(), v[3].get<double>()};
    if (!b.valid()) fail(field, "contains an empty box " + b.str());
    return b;
  }
  std::vector<BoundingBox> boxes(const char* field) const {
    std::vector<BoundingBox> out;
    if (!j_.contains(field)) return out;
    if (!j_.at(field).is_array()) fail(field, "must be an array");
    for (const auto& v : j_.at(field)) out.push_back(box(v, field));
    return out;
  }
  [[noreturn]] void fail(const std::string& field, const std::string& what) const {
    throw LoadError("manifest record" + (id_.empty() ? std::string() : " '" + id_ + "'") + ": field '" + field +
                    "' " + what);
  }

 private:
  const nlohmann::json& j_;
  std::string id_;
};

}  // namespace

void SyntheticSpec::validate() const {
  if (samples == 0) throw ConfigError("synthetic spec: samples must be positive");
  if (grid == 0 || image_size % grid != 0)
    throw ConfigError("synthetic spec: image size " + std::to_string(image_size) + " does not divide into a " +
                      std::to_string(grid) + "x" + std::to_string(grid) + " grid");
  if (object_size == 0 || object_size > image_size)
    throw GenerationError("synthetic spec: " + std::to_string(object_size) + " px objects do not fit a " +
                          std::to_string(image_size) + " px image");
  if (min_objects == 0 || min_objects > max_objects) throw ConfigError("synthetic spec: bad object count range");
  if (max_objects * object_size * object_size > image_size * image_size)
    throw GenerationError("synthetic spec: " + std::to_string(max_objects) + " non-overlapping " +
                          std::to_string(object_size) + "x" + std::to_string(object_size) + " objects exceed the " +
                          std::to_string(image_size) + "x" + std::to_string(image_size) + " image area");
  if (max_objects > shapes.size() || max_objects > colors.size())
    throw ConfigError("synthetic spec: objects in one image must have distinct shapes and colors");
  for (const auto& s : shapes)
    if (!known_shapes().count(s)) throw ConfigError("synthetic spec: unknown shape '" + s + "'");
  for (const auto& c : colors)
    if (!palette().count(c)) throw ConfigError("synthetic spec: unknown color '" + c + "'");
  if (templates.empty()) throw ConfigError("synthetic spec: no question templates");
  for (const auto& t : templates)
    if (t != "color" && t != "exists" && t != "shape")
      throw ConfigError("synthetic spec: unknown question template '" + t + "'");
  if (val_fraction < 0.0 || val_fraction >= 1.0) throw ConfigError("synthetic spec: val_fraction must be in [0, 1)");
}

void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = nlohmann::json{{"samples", s.samples},         {"image_size", s.image_size},     {"grid", s.grid},
                     {"object_size", s.object_size}, {"min_objects", s.min_objects},   {"max_objects", s.max_objects},
                     {"shapes", s.shapes},           {"colors", s.colors},             {"templates", s.templates},
                     {"snap_to_grid", s.snap_to_grid}, {"val_fraction", s.val_fraction}, {"human_maps", s.human_maps},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  const SyntheticSpec d;
  s.samples = j.value("samples", d.samples);
  s.image_size = j.value("image_size", d.image_size);
  s.grid = j.value("grid", d.grid);
  s.object_size = j.value("object_size", d.object_size);
  s.min_objects = j.value("min_objects", d.min_objects);
  s.max_objects = j.value("max_objects", d.max_objects);
  s.shapes = j.value("shapes", d.shapes);
  s.colors = j.value("colors", d.colors);
  s.templates = j.value("templates", d.templates);
  s.snap_to_grid = j.value("snap_to_grid", d.snap_to_grid);
  s.val_fraction = j.value("val_fraction", d.val_fraction);
  s.human_maps = j.value("human_maps", d.human_maps);
  s.seed = j.value("seed", d.seed);
}

std::vector<std::string> answer_vocabulary(const SyntheticSpec& spec) {
  std::vector<std::string> a = spec.colors;
  a.insert(a.end(), spec.shapes.begin(), spec.shapes.end());
  a.push_back("yes");
  a.push_back("no");
  return a;
}

std::vector<std::string> question_words(const SyntheticSpec& spec) {
  std::vector<std::string> w{"what", "color", "is", "the", "shape", "there", "a", "?"};
  w.insert(w.end(), spec.colors.begin(), spec.colors.end());
  w.insert(w.end(), spec.shapes.begin(), spec.shapes.end());
  return w;
}

SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticDataset ds;
  ds.answers = answer_vocabulary(spec);
  ds.words = question_words(spec);
  std::mt19937_64 rng(spec.seed);
  const auto n_train =
      static_cast<std::size_t>(std::llround(static_cast<double>(spec.samples) * (1.0 - spec.val_fraction)));
  for (std::size_t i = 0; i < spec.samples; ++i)
    (i < n_train ? ds.train : ds.val).push_back(make_sample(spec, i, rng, ds.answers));
  return ds;
}

Raster render_human_map(const Sample& s, std::size_t object_size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto& boxes = s.answer_boxes.empty() ? s.question_boxes : s.answer_boxes;
  std::vector<std::array<double, 3>> blobs;  // cx, cy, sigma
  std::normal_distribution<double> jitter(0.0, static_cast<double>(object_size) / 6.0);
  std::uniform_real_distribution<double> spread(0.35, 0.7);
  std::uniform_real_distribution<double> anywhere(0.0, static_cast<double>(s.image_width));
  for (const auto& b : boxes)
    blobs.push_back({(b.x0 + b.x1) / 2 + jitter(rng), (b.y0 + b.y1) / 2 + jitter(rng),
                     spread(rng) * static_cast<double>(object_size)});
  if (blobs.empty()) blobs.push_back({anywhere(rng), anywhere(rng), spread(rng) * static_cast<double>(object_size)});
  std::uniform_real_distribution<double> noise(0.0, 0.05);
  std::vector<double> v(s.image_width * s.image_height);
  for (std::size_t y = 0; y < s.image_height; ++y)
    for (std::size_t x = 0; x < s.image_width; ++x) {
      double a = noise(rng);
      for (const auto& [cx, cy, sg] : blobs) {
        const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
        a += std::exp(-(dx * dx + dy * dy) / (2 * sg * sg));
      }
      v[y * s.image_width + x] = a;
    }
  return map_to_gray(v, s.image_width, s.image_height);
}

DatasetFiles write_dataset(const SyntheticDataset& ds, const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "images");
  if (spec.human_maps > 0) fs::create_directories(out_dir / "hat");
  DatasetFiles files{out_dir / "train.jsonl", out_dir / "val.jsonl", out_dir / "answers.txt", out_dir / "vocab.txt"};
  auto write_split = [&](const std::vector<Sample>& split, const fs::path& manifest) {
    std::ofstream out(manifest);
    if (!out) throw LoadError("cannot write " + manifest.string());
    for (const auto& s : split) {
      write_pnm(out_dir / s.image_path, s.image);
      const auto index = static_cast<std::uint64_t>(std::stoull(s.sample_id.substr(1)));
      for (std::size_t k = 0; k < s.human_maps.size(); ++k)
        write_pnm(out_dir / s.human_maps[k], render_human_map(s, spec.object_size, spec.seed * 1000003u + index * 31u + k));
      out << sample_to_json(s).dump() << '\n';
    }
  };
  write_split(ds.train, files.train_manifest);
  write_split(ds.val, files.val_manifest);
  write_lines(files.answers, ds.answers);
  write_lines(files.vocabulary, ds.words);
  std::ofstream(out_dir / "spec.json") << nlohmann::json(spec).dump(2) << '\n';
  return files;
}

nlohmann::json sample_to_json(const Sample& s) {
  nlohmann::json j{{"schema_version", kSchemaVersion},
                   {"sample_id", s.sample_id},
                   {"image", s.image_path.generic_string()},
                   {"image_size", {s.image_width, s.image_height}},
                   {"question", s.question},
                   {"answer", s.answer},
                   {"label", s.label},
                   {"answer_boxes", boxes_json(s.answer_boxes)},
                   {"question_boxes", boxes_json(s.question_boxes)}};
  if (!s.question_type.empty()) j["question_type"] = s.question_type;
  if (!s.feature_shape.empty()) j["feature_shape"] = s.feature_shape;
  if (!s.scene.empty()) {
    auto scene = nlohmann::json::array();
    for (const auto& o : s.scene) scene.push_back({{"shape", o.shape}, {"color", o.color}, {"box", box_json(o.box)}});
    j["scene"] = scene;
  }
  if (!s.human_maps.empty()) {
    auto maps = nlohmann::json::array();
    for (const auto& p : s.human_maps) maps.push_back(p.generic_string());
    j["human_maps"] = maps;
  }
  return j;
}

Sample sample_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw LoadError("manifest record is not an object");
  const std::string id = j.contains("sample_id") && j["sample_id"].is_string() ? j["sample_id"].get<std::string>() : "";
  FieldReader r(j, id);
  const int version = r.get<int>("schema_version");
  if (version != kSchemaVersion)
    r.fail("schema_version", "is " + std::to_string(version) + ", supported " + std::to_string(kSchemaVersion));
  Sample s;
  s.sample_id = r.get<std::string>("sample_id");
  s.image_path = r.get<std::string>("image");
  const auto size = r.get<std::vector<std::size_t>>("image_size");
  if (size.size() != 2 || size[0] == 0 || size[1] == 0) r.fail("image_size", "must be [width, height]");
  s.image_width = size[0];
  s.image_height = size[1];
  s.question = r.get<std::string>("question");
  s.answer = r.get<std::string>("answer");
  s.label = r.get<int>("label");
  if (s.label < 0) r.fail("label", "must be a non-negative answer id");
  s.question_type = r.get_or<std::string>("question_type", "");
  s.feature_shape = r.get_or<std::vector<std::size_t>>("feature_shape", {});
  s.answer_boxes = r.boxes("answer_boxes");
  s.question_boxes = r.boxes("question_boxes");
  const BoundingBox frame{0, 0, static_cast<double>(s.image_width), static_cast<double>(s.image_height)};
  for (const char* field : {"answer_boxes", "question_boxes"})
    for (const auto& b : std::string(field) == "answer_boxes" ? s.answer_boxes : s.question_boxes)
      if (b.x0 < frame.x0 || b.y0 < frame.y0 || b.x1 > frame.x1 || b.y1 > frame.y1)
        r.fail(field, "box " + b.str() + " lies outside the " + std::to_string(s.image_width) + "x" +
                          std::to_string(s.image_height) + " image");
  if (j.contains("scene")) {
    if (!j["scene"].is_array()) r.fail("scene", "must be an array");
    for (const auto& o : j["scene"]) {
      FieldReader ro(o, id);
      s.scene.push_back({ro.get<std::string>("shape"), ro.get<std::string>("color"), r.box(o.value("box", nlohmann::json()), "scene")});
    }
  }
  for (const auto& p : r.get_or<std::vector<std::string>>("human_maps", {})) s.human_maps.emplace_back(p);
  return s;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) lines.push_back(line);
  return lines;
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

Dataset load_dataset(const std::filesystem::path& manifest, bool load_pixels) {
  std::ifstream in(manifest);
  if (!in) throw LoadError("cannot open manifest " + manifest.string());
  Dataset ds;
  ds.root = manifest.parent_path();
  std::set<std::string> seen;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(manifest.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    Sample s = sample_from_json(j);
    if (!seen.insert(s.sample_id).second) throw LoadError("duplicate sample_id '" + s.sample_id + "'");
    if (load_pixels) {
      const auto path = ds.root / s.image_path;
      if (s.feature_shape.empty()) {
        s.image = read_pnm(path);
        if (s.image.width != s.image_width || s.image.height != s.image_height)
          throw LoadError("sample '" + s.sample_id + "': image is " + std::to_string(s.image.width) + "x" +
                          std::to_string(s.image.height) + ", manifest says " + std::to_string(s.image_width) + "x" +
                          std::to_string(s.image_height));
      } else {
        auto blob = read_blob(path);
        if (blob.shape != s.feature_shape)
          throw LoadError("sample '" + s.sample_id + "': feature blob shape does not match feature_shape");
        s.features = std::move(blob.values);
      }
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, bool shuffle,
                                                    std::uint64_t seed) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  return out;
}

Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices, const encoder::Vocabulary& vocab,
                 const StemConfig& stem) {
  Batch b;
  b.indices = indices;
  std::vector<std::vector<int>> seqs;
  std::vector<double> pixels;
  ag::Shape item_shape;
  for (std::size_t i : indices) {
    const Sample& s = ds.samples.at(i);
    seqs.push_back(vocab.encode(s.question));
    b.labels.push_back(s.label);
    ag::Shape shape;
    if (stem.kind == StemKind::Raster) {
      if (s.image.pixels.empty()) throw InputError("sample '" + s.sample_id + "' has no raster loaded");
      shape = {s.image.height, s.image.width, s.image.channels};
      for (auto p : s.image.pixels) pixels.push_back(static_cast<double>(p) / 255.0);
    } else {
      if (s.features.empty()) throw InputError("sample '" + s.sample_id + "' has no feature grid loaded");
      shape = s.feature_shape;
      pixels.insert(pixels.end(), s.features.begin(), s.features.end());
    }
    if (item_shape.empty()) item_shape = shape;
    if (shape != item_shape) throw InputError("sample '" + s.sample_id + "' differs in image shape from its batch");
  }
  ag::Shape shape{indices.size()};
  shape.insert(shape.end(), item_shape.begin(), item_shape.end());
  if (indices.empty()) shape = {0, 1, 1, 1};
  b.images = ag::Tensor::constant(shape, std::move(pixels));
  b.text = encoder::TextBatch::from_sequences(seqs);
  return b;
}

}  // namespace capsvl::data
