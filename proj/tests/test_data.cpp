#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "capsvl/blob.hpp"
#include "capsvl/data.hpp"
#include "capsvl/errors.hpp"
#include "capsvl/stem.hpp"
#include "doctest.h"

using namespace capsvl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("capsvl_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

data::SyntheticSpec small_spec(std::size_t n = 120) {
  data::SyntheticSpec s;
  s.samples = n;
  return s;
}

// Answers a question from the scene record alone.
struct OracleAnswer {
  std::string answer;
  std::vector<BoundingBox> answer_boxes, question_boxes;
};

OracleAnswer oracle(const data::Sample& s) {
  std::istringstream is(s.question);
  std::vector<std::string> w;
  for (std::string t; is >> t;) w.push_back(t);
  auto strip = [](std::string t) {
    if (!t.empty() && t.back() == '?') t.pop_back();
    return t;
  };
  OracleAnswer out;
  if (w.size() == 5 && w[0] == "what" && w[1] == "color") {
    const auto shape = strip(w[4]);
    std::size_t hits = 0;
    for (const auto& o : s.scene)
      if (o.shape == shape) {
        ++hits;
        out.answer = o.color;
        out.answer_boxes = out.question_boxes = {o.box};
      }
    REQUIRE(hits == 1);
  } else if (w.size() == 4 && w[0] == "what" && w[1] == "shape") {
    const auto color = strip(w[3]);
    std::size_t hits = 0;
    for (const auto& o : s.scene)
      if (o.color == color) {
        ++hits;
        out.answer = o.shape;
        out.answer_boxes = out.question_boxes = {o.box};
      }
    REQUIRE(hits == 1);
  } else {
    REQUIRE(w.size() == 5);
    REQUIRE(w[0] == "is");
    const auto color = w[3], shape = strip(w[4]);
    out.answer = "no";
    for (const auto& o : s.scene)
      if (o.color == color && o.shape == shape) {
        out.answer = "yes";
        out.answer_boxes = out.question_boxes = {o.box};
      }
    if (out.answer == "no")
      for (const auto& o : s.scene)
        if (o.color == color || o.shape == shape) out.question_boxes.push_back(o.box);
  }
  return out;
}

}  // namespace

TEST_CASE("generation is deterministic in the seed") {
  const auto spec = small_spec(60);
  const auto a = scratch("det_a"), b = scratch("det_b");
  data::write_dataset(data::generate_synthetic(spec), spec, a);
  data::write_dataset(data::generate_synthetic(spec), spec, b);
  CHECK(slurp(a / "train.jsonl") == slurp(b / "train.jsonl"));
  CHECK(slurp(a / "val.jsonl") == slurp(b / "val.jsonl"));
  CHECK(slurp(a / "images" / "s000007.ppm") == slurp(b / "images" / "s000007.ppm"));
  auto other = spec;
  other.seed = 8;
  const auto c = scratch("det_c");
  data::write_dataset(data::generate_synthetic(other), other, c);
  CHECK(slurp(a / "train.jsonl") != slurp(c / "train.jsonl"));
}

TEST_CASE("split sizes and answer vocabulary") {
  const auto ds = data::generate_synthetic(small_spec(100));
  CHECK(ds.train.size() == 80);
  CHECK(ds.val.size() == 20);
  CHECK(ds.answers.size() == 4 + 3 + 2);
  for (const auto& s : ds.train) {
    REQUIRE(s.label >= 0);
    REQUIRE(static_cast<std::size_t>(s.label) < ds.answers.size());
    CHECK(ds.answers[static_cast<std::size_t>(s.label)] == s.answer);
  }
}

TEST_CASE("unsatisfiable placement is a generation error") {
  data::SyntheticSpec s;
  s.image_size = 8;
  s.grid = 8;
  s.object_size = 6;
  s.min_objects = s.max_objects = 10;
  CHECK_THROWS_AS(s.validate(), GenerationError);
  CHECK_THROWS_AS(data::generate_synthetic(s), GenerationError);
  data::SyntheticSpec t;
  t.object_size = 64;
  CHECK_THROWS_AS(t.validate(), GenerationError);
  data::SyntheticSpec u;
  u.colors = {"mauve"};
  CHECK_THROWS_AS(u.validate(), ConfigError);
}

TEST_CASE("answers and boxes are recoverable from the scene") {
  const auto ds = data::generate_synthetic(small_spec(300));
  std::set<std::string> types;
  for (const auto* split : {&ds.train, &ds.val})
    for (const auto& s : *split) {
      const auto o = oracle(s);
      CHECK(o.answer == s.answer);
      CHECK(o.answer_boxes == s.answer_boxes);
      CHECK(o.question_boxes == s.question_boxes);
      types.insert(s.question_type);
    }
  CHECK(types.size() == 3);
}

TEST_CASE("what color is the circle") {
  const auto ds = data::generate_synthetic(small_spec(200));
  bool seen = false;
  for (const auto& s : ds.train) {
    if (s.question != "what color is the circle?") continue;
    for (const auto& o : s.scene)
      if (o.shape == "circle") {
        CHECK(s.answer == o.color);
        REQUIRE(s.answer_boxes.size() == 1);
        CHECK(s.answer_boxes[0] == o.box);
        seen = true;
      }
  }
  CHECK(seen);
}

TEST_CASE("stored boxes are pixel-tight around the rendered shapes") {
  const auto ds = data::generate_synthetic(small_spec(80));
  for (const auto& s : ds.train) {
    // Colours are distinct within an image, so each non-black colour is one object.
    std::map<std::array<int, 3>, BoundingBox> seen;
    for (std::size_t y = 0; y < s.image.height; ++y)
      for (std::size_t x = 0; x < s.image.width; ++x) {
        const std::array<int, 3> c{s.image.at(x, y, 0), s.image.at(x, y, 1), s.image.at(x, y, 2)};
        if (c == std::array<int, 3>{0, 0, 0}) continue;
        auto [it, fresh] = seen.try_emplace(c, BoundingBox{double(x), double(y), double(x + 1), double(y + 1)});
        if (!fresh) {
          auto& b = it->second;
          b = {std::min(b.x0, double(x)), std::min(b.y0, double(y)), std::max(b.x1, double(x + 1)),
               std::max(b.y1, double(y + 1))};
        }
      }
    REQUIRE(seen.size() == s.scene.size());
    for (const auto& o : s.scene) {
      bool matched = false;
      for (const auto& [c, b] : seen) matched |= b == o.box;
      CHECK(matched);
      CHECK(o.box.x1 <= 56.0);
      CHECK(o.box.y1 <= 56.0);
    }
    // Non-overlapping objects.
    for (std::size_t i = 0; i < s.scene.size(); ++i)
      for (std::size_t j = i + 1; j < s.scene.size(); ++j)
        CHECK(intersection_area(s.scene[i].box, s.scene[j].box) == 0.0);
  }
}

TEST_CASE("manifest round trip and validation") {
  const auto spec = small_spec(40);
  const auto dir = scratch("manifest");
  const auto files = data::write_dataset(data::generate_synthetic(spec), spec, dir);
  const auto train = data::load_dataset(files.train_manifest);
  REQUIRE(train.samples.size() == 32);
  const auto gen = data::generate_synthetic(spec);
  for (std::size_t i = 0; i < 32; ++i) {
    CHECK(train.samples[i].sample_id == gen.train[i].sample_id);
    CHECK(train.samples[i].answer_boxes == gen.train[i].answer_boxes);
    CHECK(train.samples[i].image.pixels == gen.train[i].image.pixels);
  }
  CHECK(data::read_lines(files.answers) == gen.answers);

  SUBCASE("empty manifest") {
    std::ofstream(dir / "empty.jsonl").close();
    CHECK(data::load_dataset(dir / "empty.jsonl").samples.empty());
  }
  SUBCASE("box outside the image names the sample") {
    auto j = data::sample_to_json(gen.train[3]);
    j["answer_boxes"] = nlohmann::json::array({nlohmann::json::array({40, 40, 70, 50})});
    std::ofstream(dir / "bad.jsonl") << j.dump() << "\n";
    try {
      data::load_dataset(dir / "bad.jsonl");
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find(gen.train[3].sample_id) != std::string::npos);
    }
  }
  SUBCASE("missing field is named") {
    auto j = data::sample_to_json(gen.train[0]);
    j.erase("question");
    std::ofstream(dir / "missing.jsonl") << j.dump() << "\n";
    try {
      data::load_dataset(dir / "missing.jsonl");
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find("question") != std::string::npos);
    }
  }
  SUBCASE("duplicate ids") {
    const auto line = data::sample_to_json(gen.train[0]).dump();
    std::ofstream(dir / "dup.jsonl") << line << "\n" << line << "\n";
    CHECK_THROWS_AS(data::load_dataset(dir / "dup.jsonl"), LoadError);
  }
  SUBCASE("unsupported schema version") {
    auto j = data::sample_to_json(gen.train[0]);
    j["schema_version"] = 99;
    std::ofstream(dir / "schema.jsonl") << j.dump() << "\n";
    CHECK_THROWS_AS(data::load_dataset(dir / "schema.jsonl"), LoadError);
  }
}

TEST_CASE("batching") {
  const auto b = data::batch_indices(100, 32, false, 0);
  REQUIRE(b.size() == 4);
  CHECK(b[0].size() == 32);
  CHECK(b[1].size() == 32);
  CHECK(b[2].size() == 32);
  CHECK(b[3].size() == 4);
  CHECK(b[3].back() == 99);
  CHECK(data::batch_indices(100, 32, true, 5) == data::batch_indices(100, 32, true, 5));
  CHECK(data::batch_indices(100, 32, true, 5) != data::batch_indices(100, 32, true, 6));
  CHECK(data::batch_indices(0, 32, false, 0).empty());
  CHECK_THROWS_AS(data::batch_indices(10, 0, false, 0), ConfigError);

  const auto spec = small_spec(20);
  const auto dir = scratch("batch");
  data::write_dataset(data::generate_synthetic(spec), spec, dir);
  const auto ds = data::load_dataset(dir / "train.jsonl");
  encoder::Vocabulary vocab(data::read_lines(dir / "vocab.txt"));
  const auto batch = data::make_batch(ds, {0, 1, 2}, vocab, data::StemConfig{data::StemKind::Raster, 56, 3, 64});
  CHECK(batch.images.shape() == ag::Shape{3, 56, 56, 3});
  std::size_t longest = 0;
  for (std::size_t i = 0; i < 3; ++i) longest = std::max(longest, vocab.encode(ds.samples[i].question).size());
  CHECK(batch.text.length == longest);
  for (double v : batch.images.data()) CHECK((v >= 0.0 && v <= 1.0));
  for (std::size_t i = 0; i < batch.text.ids.size(); ++i) CHECK(batch.text.ids[i] != encoder::Vocabulary::kUnk);
}

TEST_CASE("feature stem") {
  nn::ParameterStore store(1);
  data::StemConfig raster{data::StemKind::Raster, 56, 3, 64};
  data::FeatureStem stem(store, raster, 7, 7, 128);
  CHECK(stem.patch_size() == 8);
  const auto emb = stem(ag::Tensor::zeros({2, 56, 56, 3}));
  CHECK(emb.grid.shape() == ag::Shape{2, 7, 7, 128});
  CHECK_THROWS_AS(stem(ag::Tensor::zeros({2, 48, 48, 3})), ConfigError);

  data::StemConfig pre{data::StemKind::Precomputed, 0, 0, 2048};
  nn::ParameterStore store2(2);
  data::FeatureStem fstem(store2, pre, 7, 7, 768);
  CHECK(fstem(ag::Tensor::zeros({1, 7, 7, 2048})).grid.shape() == ag::Shape{1, 7, 7, 768});
  CHECK_THROWS_AS(fstem(ag::Tensor::zeros({1, 7, 7, 1024})), ConfigError);
  nn::ParameterStore store3(3);
  CHECK_THROWS_AS(data::FeatureStem(store3, data::StemConfig{data::StemKind::Raster, 50, 3, 8}, 7, 7, 16),
                  ConfigError);
}

TEST_CASE("precomputed feature blobs load through the manifest") {
  const auto dir = scratch("features");
  Blob blob{{7, 7, 4}, std::vector<double>(196, 0.25), {{"source", "test"}}};
  write_blob(dir / "f0.bin", blob);
  const auto back = read_blob(dir / "f0.bin");
  CHECK(back.shape == blob.shape);
  CHECK(back.values == blob.values);
  data::Sample s;
  s.sample_id = "f0";
  s.image_path = "f0.bin";
  s.feature_shape = {7, 7, 4};
  s.image_width = s.image_height = 224;
  s.question = "what color is the circle?";
  s.answer = "red";
  s.label = 0;
  s.question_type = "color";
  s.answer_boxes = s.question_boxes = {{10, 10, 40, 40}};
  std::ofstream(dir / "m.jsonl") << data::sample_to_json(s).dump() << "\n";
  const auto ds = data::load_dataset(dir / "m.jsonl");
  REQUIRE(ds.samples.size() == 1);
  CHECK(ds.samples[0].features == blob.values);
  fs::remove(sidecar_path(dir / "f0.bin"));
  CHECK_THROWS_AS(data::load_dataset(dir / "m.jsonl"), LoadError);
}
