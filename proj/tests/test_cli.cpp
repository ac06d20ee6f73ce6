#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mitdet/cli.hpp"

using namespace mitdet;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "mitdet");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(is), {});
}

// Small dataset and training budget so the whole suite runs in seconds.
struct Workspace {
  fs::path dir;
  std::string config;

  Workspace() : dir(fs::temp_directory_path() / "mitdet_test_cli") {
    fs::remove_all(dir);
    fs::create_directories(dir);
    config = (dir / "small.cfg").string();
    std::ofstream(config) << "# tiny run\n"
                             "synth.image_count = 4\n"
                             "synth.image_size = 256\n"
                             "synth.normal_nuclei = 12\n"
                             "synth.mitoses = 3\n"
                             "synth.impostors = 3\n"
                             "pipeline.epochs = 1\n"
                             "pipeline.parent_epochs = 1\n"
                             "pipeline.fdiff_epochs = 1\n"
                             "dgsb.k = 3\n"
                             "incdp.T = 2\n";
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("usage errors") {
  CHECK(cli({}).code == 2);
  CHECK(cli({"frobnicate"}).code == 2);
  CHECK(cli({"synth", "--out", "x", "--bogus"}).code == 2);
  CHECK(cli({"eval", "--data", "x"}).code == 2);  // missing required option
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("runtime errors exit 1") {
  CHECK(cli({"localize", "--data", "/nonexistent/dir"}).code == 1);
  CHECK(cli({"--set", "no.such.key=1", "synth", "--out", "/tmp/x"}).code == 1);
}

TEST_CASE("subcommands") {
  const Workspace ws;
  const std::string data = ws.path("data");
  REQUIRE(cli({"--config", ws.config, "--seed", "7", "synth", "--out", data}).code == 0);
  REQUIRE(cli({"--config", ws.config, "--seed", "7", "synth", "--out", ws.path("data2")}).code ==
          0);
  for (const auto& e : fs::recursive_directory_iterator(data)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), data);
    CHECK(slurp(e.path()) == slurp(fs::path(ws.path("data2")) / rel));
  }

  SUBCASE("localize") {
    const auto r = cli({"--config", ws.config, "localize", "--data", data, "--split", "test"});
    REQUIRE(r.code == 0);
    const auto doc = json::parse(r.out);
    REQUIRE(doc.is_array());
    REQUIRE_FALSE(doc.empty());
    for (const auto& c : doc) {
      CHECK(c.at("image_id").get<std::string>() == "img_003");
      CHECK(c.at("area").get<int>() >= 30);
      CHECK(c.contains("cx"));
      CHECK(c.contains("cy"));
    }
  }

  SUBCASE("eval of the ground truth scores one") {
    const auto ann = json::parse(slurp(fs::path(data) / "annotations.json"));
    json dets = json::array();
    for (const auto& img : ann["images"]) {
      json pts = json::array();
      for (const auto& p : ann["points"]) {
        if (p["image_id"] == img["id"] && p["label"] == "mitosis") {
          pts.push_back({{"x", p["x"]}, {"y", p["y"]}, {"score", 1.0}});
        }
      }
      dets.push_back({{"image_id", img["id"]}, {"points", pts}});
    }
    std::ofstream(ws.path("gt.json")) << dets.dump();
    const auto r = cli({"eval", "--data", data, "--detections", ws.path("gt.json")});
    REQUIRE(r.code == 0);
    const auto m = json::parse(r.out);
    CHECK(m.at("f1").get<double>() == 1.0);
    CHECK(m.at("fp").get<int>() == 0);
    CHECK(m.at("tp").get<int>() == 12);

    std::ofstream(ws.path("bad.json")) << R"([{"image_id": "nope", "points": []}])";
    CHECK(cli({"eval", "--data", data, "--detections", ws.path("bad.json")}).code == 1);
  }

  SUBCASE("build manifest") {
    const auto r = cli({"--config", ws.config, "build", "--data", data});
    REQUIRE(r.code == 0);
    const auto doc = json::parse(r.out);
    int pos = 0, neg = 0;
    for (const auto& e : doc) {
      const int label = e.at("parent_label").get<int>();
      const int cluster = e.at("cluster").get<int>();
      CHECK(e.at("patch_id").get<std::string>().rfind("img_00", 0) == 0);
      if (label == 1) {
        ++pos;
        CHECK(cluster == -1);
      } else {
        ++neg;
        CHECK(cluster >= 0);
        CHECK(cluster < 3);
      }
    }
    CHECK(pos == 9);  // 3 training images x 3 mitoses
    CHECK(neg >= 1);
  }

  SUBCASE("train and detect are deterministic") {
    const std::vector<std::string> base = {"--config", ws.config, "--seed", "7"};
    auto run = [&](std::vector<std::string> tail) {
      std::vector<std::string> args = base;
      args.insert(args.end(), tail.begin(), tail.end());
      return cli(args);
    };
    REQUIRE(run({"train", "--data", data, "--out", ws.path("a.ckpt"), "--history",
                 ws.path("a.csv")}).code == 0);
    REQUIRE(run({"train", "--data", data, "--out", ws.path("b.ckpt")}).code == 0);
    CHECK(slurp(ws.path("a.ckpt")) == slurp(ws.path("b.ckpt")));
    const std::string csv = slurp(ws.path("a.csv"));
    CHECK(csv.rfind("epoch,L_focal_p,L_center_p,L_focal_c,L_center_c,total\n", 0) == 0);

    REQUIRE(run({"detect", "--data", data, "--model", ws.path("a.ckpt"), "--out",
                 ws.path("d1.json")}).code == 0);
    REQUIRE(run({"detect", "--data", data, "--model", ws.path("b.ckpt"), "--out",
                 ws.path("d2.json")}).code == 0);
    CHECK(slurp(ws.path("d1.json")) == slurp(ws.path("d2.json")));
    const auto dets = json::parse(slurp(ws.path("d1.json")));
    CHECK(dets.size() == 4);

    REQUIRE(run({"plot-features", "--data", data, "--model", ws.path("a.ckpt"), "--out",
                 ws.path("plot.png")}).code == 0);
    CHECK(fs::file_size(ws.path("plot.png")) > 0);
  }

  SUBCASE("ablate") {
    const auto r = cli({"--config", ws.config, "ablate", "--data", data, "--variant", "baseline",
                        "--variant", "all", "--json", ws.path("abl.json")});
    REQUIRE(r.code == 0);
    const auto rows = json::parse(slurp(ws.path("abl.json")));
    REQUIRE(rows.size() == 2);
    for (const auto& row : rows) {
      for (const char* k : {"precision", "recall", "f1"}) CHECK(row.contains(k));
    }
  }
}
