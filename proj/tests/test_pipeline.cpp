#include <doctest.h>

#include <cmath>

#include "mitdet/error.hpp"
#include "mitdet/pipeline.hpp"

using namespace mitdet;

namespace {

// Dark centered disk for positives, faint ring for negatives.
RgbImage toy_patch(bool positive, int variant) {
  RgbImage p = make_rgb(32, 32, 235);
  const double r = 5.0 + variant % 3;
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      const double d = std::hypot(x - 15.5, y - 15.5);
      const bool ink = positive ? d < r : std::abs(d - r) < 1.0;
      if (!ink) continue;
      p(y, x, 0) = positive ? 60 : 180;
      p(y, x, 1) = positive ? 40 : 170;
      p(y, x, 2) = positive ? 120 : 200;
    }
  }
  return p;
}

struct Toy {
  std::vector<RgbImage> patches;
  std::vector<int> labels;
  std::vector<const RgbImage*> ptrs() const {
    std::vector<const RgbImage*> out;
    for (const auto& p : patches) out.push_back(&p);
    return out;
  }
};

Toy toy(int n) {
  Toy t;
  for (int i = 0; i < n; ++i) {
    t.patches.push_back(toy_patch(i % 2 == 1, i / 2));
    t.labels.push_back(i % 2);
  }
  return t;
}

Config toy_config() {
  Config cfg;
  cfg.pipeline.batch_size = 8;
  cfg.pipeline.augment_flips = false;
  cfg.stain.hed = HedJitter{};
  cfg.pipeline.momentum = 0.0;
  return cfg;
}

std::vector<TrainingSample> samples_from(const Toy& t) {
  std::vector<TrainingSample> s;
  for (std::size_t i = 0; i < t.patches.size(); ++i) {
    s.push_back({t.patches[i], t.labels[i], "toy", static_cast<int>(i), 0, {}});
  }
  return s;
}

}  // namespace

TEST_CASE("ablation flags") {
  CHECK(AblationFlags::parse("all") == AblationFlags{});
  CHECK(AblationFlags::parse("baseline") == AblationFlags{false, false, false});
  CHECK(AblationFlags::parse("dgsb+incdp") == AblationFlags{true, false, true});
  CHECK(AblationFlags{true, false, true}.label() == "dgsb+incdp");
  CHECK(AblationFlags{false, false, false}.label() == "baseline");
  CHECK_THROWS_AS(AblationFlags::parse("dgsb+xyz"), Error);
}

TEST_CASE("config text round trip") {
  Config cfg;
  cfg.set("dgsb.k", "7");
  cfg.set("incdp.lambda", "0.25");
  cfg.set("pipeline.dgsb", "false");
  cfg.set("pipeline.incdp", "false");
  cfg.set("seed", "42");
  const Config back = Config::parse(cfg.to_text());
  CHECK(back.to_text() == cfg.to_text());
  CHECK(back.dgsb.k == 7);
  CHECK(back.incdp.lambda == 0.25);
  CHECK(back.pipeline.flags == AblationFlags{false, true, false});
  CHECK(back.seed == 42);
  CHECK(back.stain.domains.size() == 3);
  CHECK_THROWS_AS(cfg.set("no.such.key", "1"), Error);
  CHECK_THROWS_AS(Config::parse("pipeline.score_threshold = 1.5\n"), Error);
  // Defaults carry the stated training settings.
  const Config d;
  CHECK(d.dgsb.k == 10);
  CHECK(d.dgsb.epsilon == 0.5);
  CHECK(d.incdp.child_per_parent == 4);
  CHECK(d.incdp.lambda == 0.5);
  CHECK(d.pipeline.patch_size == 80);
  CHECK(d.pipeline.learning_rate == 1e-3);
  CHECK(d.pipeline.weight_decay == 5e-4);
}

TEST_CASE("toy training loss decreases") {
  const Toy t = toy(32);
  // Whole-set batches keep normalization statistics fixed between steps.
  Config cfg = toy_config();
  cfg.pipeline.batch_size = 32;
  MitosisClassifier model;
  model.init(3);
  const auto hist = fit(model, t.ptrs(), t.labels, cfg, FitOptions{5, false, {}}, 4);
  REQUIRE(hist.size() == 5);
  for (std::size_t e = 1; e < hist.size(); ++e) {
    CHECK(hist[e].total < hist[e - 1].total);
  }
  const auto p = model.predict_proba(t.patches);
  int correct = 0;
  for (std::size_t i = 0; i < p.size(); ++i) correct += (p[i] >= 0.5) == (t.labels[i] == 1);
  CHECK(correct >= 28);
}

TEST_CASE("train composition and determinism") {
  const Toy t = toy(40);
  const auto samples = samples_from(t);
  Config cfg = toy_config();
  cfg.pipeline.epochs = 2;
  cfg.pipeline.parent_epochs = 1;
  cfg.pipeline.fdiff_epochs = 1;
  cfg.dgsb.k = 3;
  cfg.incdp.child_per_parent = 2;

  SUBCASE("all flags off") {
    cfg.pipeline.flags = AblationFlags{false, false, false};
    const auto r = train(samples, cfg, 5);
    CHECK(r.history.size() == 2);
    for (const auto& row : r.history) {
      CHECK_FALSE(row.focal_child.has_value());
      CHECK_FALSE(row.center_child.has_value());
      CHECK(row.total == doctest::Approx(row.focal_parent + row.center_parent));
    }
    CHECK_FALSE(r.model.has_child_head());
    CHECK(r.sampling.negatives.size() == r.sampling.positives.size());
  }
  SUBCASE("all flags on") {
    const auto r = train(samples, cfg, 5);
    REQUIRE(r.history.size() == 3);
    CHECK_FALSE(r.history[0].focal_child.has_value());
    CHECK(r.history[1].focal_child.has_value());
    CHECK(r.history[2].center_child.has_value());
    CHECK(r.model.has_child_head());
    CHECK(r.sampling.first_sampler.size() == r.sampling.difficulty_probs.size());
  }
  SUBCASE("same seed gives identical parameters") {
    auto a = train(samples, cfg, 9);
    auto b = train(samples, cfg, 9);
    const auto pa = a.model.params(), pb = b.model.params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
    CHECK(a.model.parent_centers == b.model.parent_centers);
  }
  SUBCASE("single class is rejected") {
    auto neg = samples;
    for (auto& s : neg) s.parent = 0;
    try {
      train(neg, cfg, 1);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kSingleClass);
    }
  }
}

TEST_CASE("detect") {
  MitosisClassifier model;
  model.init(1);
  const Config cfg;
  CHECK(detect(make_rgb(128, 128), "blank", model, cfg).points.empty());

  SyntheticConfig sc;
  sc.image_count = 1;
  sc.image_size = 256;
  sc.normal_nuclei = 20;
  const auto ds = generate_synthetic(sc);
  const auto& img = ds.images[0].image;
  const auto a = detect(img, "x", model, cfg);
  const auto b = detect(img, "x", model, cfg);
  REQUIRE(a.points.size() == b.points.size());
  for (std::size_t i = 0; i < a.points.size(); ++i) CHECK(a.points[i] == b.points[i]);
  const auto cands =
      extract_candidates(hematoxylin_channel(img, cfg.stain.source), cfg.localize);
  CHECK(a.points.size() <= cands.size());
  for (const auto& p : a.points) {
    CHECK(p.x >= 0);
    CHECK(p.x < img.width());
    CHECK(p.score >= cfg.pipeline.score_threshold);
    CHECK(p.score <= 1.0);
  }
}

TEST_CASE("evaluation and serialization") {
  AnnotationSet ann;
  ann.images.push_back({"a", "a.png", 100, 100, "test"});
  ann.points.push_back({"a", 10, 10, PointLabel::kMitosis, {}});
  ann.points.push_back({"a", 60, 60, PointLabel::kMitosis, {}});
  ann.points.push_back({"a", 30, 80, PointLabel::kHardNegative, {}});
  const std::vector<DetectionResult> dets = {{"a", {{12, 10, 0.9}, {30, 80, 0.8}}}};
  const auto rep = evaluate_detections(dets, ann, Config{});
  CHECK(rep.match.tp == 1);
  CHECK(rep.match.fp == 1);
  CHECK(rep.match.fn == 1);
  CHECK(rep.metrics.f1 == doctest::Approx(0.5));

  const auto back = detections_from_json(detections_to_json(dets));
  REQUIRE(back.size() == 1);
  CHECK(back[0].image_id == "a");
  CHECK(back[0].points == dets[0].points);

  const std::vector<EpochLoss> hist = {{1, 0.5, 0.25, std::nullopt, std::nullopt, 0.75}};
  CHECK(history_to_csv(hist).rfind("epoch,L_focal_p,L_center_p,L_focal_c,L_center_c,total", 0) == 0);
}
