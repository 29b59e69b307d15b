#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "capsvl/data.hpp"
#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "capsvl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = capsvl::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path root() {
  static const fs::path r = [] {
    auto p = fs::temp_directory_path() / "capsvl_test_cli";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return r;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

// Toy-sized dataset with simulated human maps, plus a matching config file.
struct Workspace {
  fs::path data = root() / "data", config = root() / "toy.json", ckpt1 = root() / "s1.ckpt",
           ckpt2 = root() / "s2.ckpt", ckpt3 = root() / "ft.ckpt";

  Workspace() {
    if (fs::exists(ckpt3)) return;
    write(root() / "spec.json",
          R"({"samples": 60, "image_size": 16, "grid": 4, "object_size": 4, "min_objects": 1, "max_objects": 2,
              "human_maps": 3})");
    write(config, R"({"preset": "toy", "model": {"vocab_size": 32, "answer_count": 9},
                      "train": {"batch_size": 8, "max_steps": 2}})");
    REQUIRE(cli({"gen-data", "--spec", (root() / "spec.json").string(), "--out", data.string()}).code == 0);
    const auto s1 = cli({"train", "--stage", "pretrain1", "--data", data.string(), "--config", config.string(),
                         "--ckpt-out", ckpt1.string()});
    REQUIRE_MESSAGE(s1.code == 0, s1.err);
    const auto s2 = cli({"train", "--stage", "pretrain2", "--data", data.string(), "--ckpt-in", ckpt1.string(),
                         "--config", config.string(), "--ckpt-out", ckpt2.string()});
    REQUIRE_MESSAGE(s2.code == 0, s2.err);
    const auto s3 = cli({"train", "--stage", "finetune", "--data", data.string(), "--ckpt-in", ckpt2.string(),
                         "--config", config.string(), "--ckpt-out", ckpt3.string(), "--lr", "1e-5", "--batch", "32"});
    REQUIRE_MESSAGE(s3.code == 0, s3.err);
  }
};

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(cli({}).code == 2);
  CHECK(cli({"no-such-command"}).code == 2);
  CHECK(cli({"--help"}).code == 0);
  CHECK(cli({"train", "--stage", "pretrain3", "--data", "x", "--ckpt-out", "y"}).code == 2);
  const auto r = cli({"gen-data", "--spec", (root() / "missing.json").string(), "--out", (root() / "x").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("spec not found") != std::string::npos);
}

TEST_CASE("gen-data is deterministic and reports generation errors") {
  const auto a = root() / "gen_a", b = root() / "gen_b";
  const auto ra = cli({"gen-data", "--out", a.string(), "--seed", "7", "--samples", "30"});
  REQUIRE(ra.code == 0);
  CHECK(ra.out.find("train.jsonl") != std::string::npos);
  REQUIRE(cli({"gen-data", "--out", b.string(), "--seed", "7", "--samples", "30"}).code == 0);
  CHECK(slurp(a / "train.jsonl") == slurp(b / "train.jsonl"));
  CHECK(slurp(a / "val.jsonl") == slurp(b / "val.jsonl"));
  CHECK(slurp(a / "images" / "s000003.ppm") == slurp(b / "images" / "s000003.ppm"));

  write(root() / "crowded.json", R"({"image_size": 8, "grid": 8, "object_size": 6, "min_objects": 10,
                                     "max_objects": 10})");
  const auto bad = cli({"gen-data", "--spec", (root() / "crowded.json").string(), "--out", (root() / "c").string()});
  CHECK(bad.code != 0);
  CHECK_FALSE(bad.err.empty());
}

TEST_CASE("train stage prerequisites") {
  Workspace ws;
  const auto r = cli({"train", "--stage", "pretrain2", "--data", ws.data.string(), "--config", ws.config.string(),
                      "--ckpt-out", (root() / "never.ckpt").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("stage-1 checkpoint") != std::string::npos);
  const auto f = cli({"train", "--stage", "finetune", "--data", ws.data.string(), "--config", ws.config.string(),
                      "--ckpt-out", (root() / "never.ckpt").string()});
  CHECK(f.code == 2);
  CHECK_FALSE(fs::exists(root() / "never.ckpt"));
  // A finetune checkpoint is not a stage-1 checkpoint.
  const auto g = cli({"train", "--stage", "pretrain2", "--data", ws.data.string(), "--ckpt-in", ws.ckpt3.string(),
                      "--ckpt-out", (root() / "never.ckpt").string()});
  CHECK(g.code == 2);
  CHECK(g.err.find("stage-1") != std::string::npos);
}

TEST_CASE("train writes checkpoints and logs") {
  Workspace ws;
  CHECK(fs::file_size(ws.ckpt3) > 0);
  std::ifstream log(ws.ckpt3.string() + ".log.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    const auto j = json::parse(line);
    CHECK(j["stage"] == "finetune");
    ++lines;
  }
  CHECK(lines == 2);
}

TEST_CASE("eval report") {
  Workspace ws;
  const auto report = root() / "report.json";
  const auto heat = root() / "heat";
  const auto r = cli({"eval", "--ckpt", ws.ckpt3.string(), "--data", ws.data.string(), "--target", "both", "--sweep",
                      "--per-head", "--report", report.string(), "--heatmaps", heat.string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.find("pointing game") != std::string::npos);
  const auto j = json::parse(slurp(report));
  for (const char* target : {"answer", "question"}) {
    const auto& t = j.at(target);
    CHECK(t["target"] == target);
    for (const char* key : {"samples", "samples_with_gt", "overlap", "iou", "pointing_game", "answer_accuracy"})
      CHECK_MESSAGE(t.contains(key), key);
    for (const char* key : {"precision", "recall", "f1"}) {
      CHECK(t["overlap"].contains(key));
      CHECK(t["iou"].contains(key));
    }
    CHECK(t["sweep"].size() == 19);
  }
  // Answer and question targets read different box lists.
  const auto val = capsvl::data::load_dataset(ws.data / "val.jsonl", false);
  std::size_t answer_gt = 0, question_gt = 0;
  for (const auto& s : val.samples) {
    answer_gt += !s.answer_boxes.empty();
    question_gt += !s.question_boxes.empty();
  }
  CHECK(j["answer"]["samples_with_gt"] == answer_gt);
  CHECK(j["question"]["samples_with_gt"] == question_gt);
  std::size_t images = 0;
  for (const auto& e : fs::directory_iterator(heat)) images += e.path().extension() == ".ppm";
  CHECK(images > 0);

  SUBCASE("single head and options") {
    const auto h = cli({"eval", "--ckpt", ws.ckpt3.string(), "--data", ws.data.string(), "--head", "1", "--macro",
                        "--eight-connected", "--det-thresh", "0.3"});
    CHECK(h.code == 0);
    CHECK(cli({"eval", "--ckpt", ws.ckpt3.string(), "--data", ws.data.string(), "--head", "9"}).code == 2);
    CHECK(cli({"eval", "--ckpt", ws.ckpt3.string(), "--data", ws.data.string(), "--layer", "5"}).code == 1);
  }
  SUBCASE("checkpoint/config mismatch") {
    const auto m = cli({"eval", "--ckpt", ws.ckpt3.string(), "--data", ws.data.string(), "--preset", "desk"});
    CHECK(m.code == 1);
    CHECK(m.err.find("mismatch") != std::string::npos);
  }
}

TEST_CASE("eval-hat") {
  Workspace ws;
  const auto per = root() / "hat.csv";
  const auto r = cli({"eval-hat", "--ckpt", ws.ckpt3.string(), "--data", ws.data.string(), "--per-sample",
                      per.string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.find("mean rank correlation") != std::string::npos);
  CHECK(r.out.find("+-") != std::string::npos);
  std::ifstream csv(per);
  std::string line;
  std::getline(csv, line);
  CHECK(line == "sample_id,maps,rank_correlation");
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    CHECK(line.find(",3,") != std::string::npos);  // three human maps per sample
    ++rows;
  }
  CHECK(rows == capsvl::data::load_dataset(ws.data / "val.jsonl", false).samples.size());

  SUBCASE("missing human maps are listed") {
    const auto plain = root() / "plain";
    REQUIRE(cli({"gen-data", "--spec", (root() / "spec.json").string(), "--out", plain.string(), "--human-maps", "0"})
                .code == 0);
    const auto m = cli({"eval-hat", "--ckpt", ws.ckpt3.string(), "--data", plain.string()});
    CHECK(m.code == 1);
    CHECK(m.err.find("missing human attention maps") != std::string::npos);
    CHECK(m.err.find("s0000") != std::string::npos);
  }
}

TEST_CASE("inspect-capsules partitions the images") {
  Workspace ws;
  const auto out = root() / "caps", again = root() / "caps2";
  const auto r = cli({"inspect-capsules", "--ckpt", ws.ckpt3.string(), "--data", ws.data.string(), "--out",
                      out.string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  std::multiset<std::string> seen;
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(out)) {
    if (e.path().filename().string().rfind("capsule_", 0) != 0) continue;
    ++files;
    for (const auto& id : capsvl::data::read_lines(e.path())) seen.insert(id);
  }
  CHECK(files >= 1);
  CHECK(files <= 4);  // toy model has C = 4
  const auto val = capsvl::data::load_dataset(ws.data / "val.jsonl", false);
  CHECK(seen.size() == val.samples.size());
  for (const auto& s : val.samples) CHECK(seen.count(s.sample_id) == 1);
  REQUIRE(cli({"inspect-capsules", "--ckpt", ws.ckpt3.string(), "--data", ws.data.string(), "--out",
               again.string()})
              .code == 0);
  CHECK(slurp(out / "vectors.jsonl") == slurp(again / "vectors.jsonl"));
}
