#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mitdet/error.hpp"
#include "mitdet/incdp.hpp"
#include "mitdet/rng.hpp"
#include "support/oracles.hpp"

using namespace mitdet;

namespace {

FeatureMatrix rows(std::initializer_list<std::initializer_list<double>> r) {
  FeatureMatrix m(static_cast<int>(r.size()), static_cast<int>(r.begin()->size()));
  int i = 0;
  for (const auto& row : r) {
    int j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

}  // namespace

TEST_CASE("focal loss") {
  const double y1[] = {1.0 - 1e-12};
  const int lab1[] = {1};
  CHECK(focal_loss(y1, lab1, 2.0) < 1e-12);
  const double half[] = {0.5};
  CHECK(focal_loss(half, lab1, 2.0) == doctest::Approx(0.25 * std::log(2.0)).epsilon(1e-12));
  CHECK(focal_loss(half, lab1, 2.0) == doctest::Approx(0.17329).epsilon(1e-4));

  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> p(16);
    std::vector<int> y(16);
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = rng.uniform(0.01, 0.99);
      y[i] = rng.bernoulli(0.5);
    }
    CHECK(focal_loss(p, y, 0.0) == doctest::Approx(oracle::bce(p, y)).epsilon(1e-12));
  }
}

TEST_CASE("focal loss decreases as the true-class probability rises") {
  std::vector<double> p = {0.3, 0.6, 0.2};
  const std::vector<int> y = {1, 0, 0};
  for (double gamma : {0.0, 1.0, 2.0, 5.0}) {
    double prev = 1e300;
    for (double q = 0.02; q < 0.99; q += 0.02) {
      p[0] = q;  // true class 1
      const double l = focal_loss(p, y, gamma);
      CHECK(l >= 0.0);
      CHECK(l < prev);
      prev = l;
    }
  }
}

TEST_CASE("center loss and update") {
  CHECK(center_loss(rows({{1, 0}}), std::vector<int>{0}, rows({{0, 0}})) == 0.5);
  CHECK(center_loss(rows({{1, 0}, {0, 2}}), std::vector<int>{0, 1}, rows({{0, 0}, {0, 0}})) ==
        2.5);
  CHECK(center_loss(rows({{3, 4}}), std::vector<int>{0}, rows({{3, 4}})) == 0.0);
  CHECK_THROWS_AS(center_loss(rows({{1, 0}}), std::vector<int>{2}, rows({{0, 0}, {0, 0}})),
                  Error);

  const auto c = rows({{0, 0}, {5, 5}});
  CHECK(update_centers(c, rows({{2, 0}}), std::vector<int>{0}, 0.0) == c);
  CHECK(update_centers(c, rows({{2, 0}}), std::vector<int>{0}, 1.0).row(0) ==
        rows({{2, 0}}).row(0));
  const auto half = update_centers(c, rows({{2, 0}}), std::vector<int>{0}, 0.5);
  CHECK(half(0, 0) == 1.0);
  CHECK(half(0, 1) == 0.0);
  CHECK(half.row(1) == c.row(1));
}

TEST_CASE("center loss gradient matches finite differences") {
  Rng rng(4);
  FeatureMatrix x(6, 5), c(3, 5);
  for (int i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  for (int i = 0; i < c.size(); ++i) c.data()[i] = rng.normal();
  const std::vector<int> y = {0, 1, 2, 1, 0, 2};
  const auto g = center_loss_grad(x, y, c);
  CHECK(g.loss == doctest::Approx(center_loss(x, y, c)));
  const double h = 1e-6;
  for (int i = 0; i < x.size(); ++i) {
    FeatureMatrix xp = x, xm = x;
    xp.data()[i] += h;
    xm.data()[i] -= h;
    const double fd = (center_loss(xp, y, c) - center_loss(xm, y, c)) / (2 * h);
    CHECK(std::abs(fd - g.grad.data()[i]) <= 1e-4 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("logit losses agree with probability losses and their gradients") {
  Rng rng(6);
  FeatureMatrix logits(5, 2);
  for (int i = 0; i < logits.size(); ++i) logits.data()[i] = rng.normal();
  const std::vector<int> y = {1, 0, 0, 1, 1};
  const auto lf = focal_loss_logits(logits, y, 2.0);
  const auto p = softmax_rows(logits);
  std::vector<double> pos(5);
  for (int i = 0; i < 5; ++i) pos[i] = p(i, 1);
  CHECK(lf.loss == doctest::Approx(focal_loss(pos, y, 2.0)).epsilon(1e-10));
  const double h = 1e-6;
  for (int i = 0; i < logits.size(); ++i) {
    FeatureMatrix a = logits, b = logits;
    a.data()[i] += h;
    b.data()[i] -= h;
    const double fd = (focal_loss_logits(a, y, 2.0).loss - focal_loss_logits(b, y, 2.0).loss) / (2 * h);
    CHECK(std::abs(fd - lf.grad.data()[i]) <= 1e-5 * std::max(1.0, std::abs(fd)));
  }

  FeatureMatrix cl(4, 4);
  for (int i = 0; i < cl.size(); ++i) cl.data()[i] = rng.normal();
  const std::vector<int> yc = {0, 3, 2, 3};
  ChildWeights w{{0.5, 1.5, 1.0, 1.0}};
  const auto lc = child_focal_loss_logits(cl, yc, w, 2.0);
  CHECK(lc.loss == doctest::Approx(child_focal_loss(softmax_rows(cl), yc, w, 2.0)).epsilon(1e-10));
  for (int i = 0; i < cl.size(); ++i) {
    FeatureMatrix a = cl, b = cl;
    a.data()[i] += h;
    b.data()[i] -= h;
    const double fd =
        (child_focal_loss_logits(a, yc, w, 2.0).loss - child_focal_loss_logits(b, yc, w, 2.0).loss) /
        (2 * h);
    CHECK(std::abs(fd - lc.grad.data()[i]) <= 1e-5 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("child focal loss") {
  const ChildWeights unit{{1.0, 1.0}};
  CHECK(child_focal_loss(rows({{0.5, 0.5}}), std::vector<int>{0}, unit, 2.0) ==
        doctest::Approx(0.25 * std::log(2.0)).epsilon(1e-12));
  CHECK(child_focal_loss(rows({{1.0, 0.0}, {0.0, 1.0}}), std::vector<int>{0, 1}, unit, 2.0) <
        1e-12);
  const ChildWeights zero_first{{0.0, 1.0}};
  CHECK(child_focal_loss(rows({{0.1, 0.9}}), std::vector<int>{0}, zero_first, 2.0) == 0.0);
}

TEST_CASE("joint loss") {
  CHECK(joint_loss(1, 2, 3, 4, 0.0) == 3.0);
  CHECK(joint_loss(1, 2, 3, 4, 0.5) == 6.5);
  CHECK(joint_loss(0, 0, 0, 0, 0.5) == 0.0);
  const double a = joint_loss(1.3, 0.4, 2.2, 0.9, 0.0);
  const double b = joint_loss(1.3, 0.4, 2.2, 0.9, 1.0) - a;
  for (double l : {0.25, 0.5, 2.0, 8.0}) {
    CHECK(joint_loss(1.3, 0.4, 2.2, 0.9, l) == 1.3 + 0.4 + l * (2.2 + 0.9));
    CHECK(joint_loss(1.3, 0.4, 2.2, 0.9, l) == doctest::Approx(a + l * b).epsilon(1e-15));
  }
}

TEST_CASE("child labels") {
  Rng rng(3);
  // Two planted sub-clusters per parent.
  FeatureMatrix f(80, 3);
  std::vector<int> parents, truth;
  for (int i = 0; i < 80; ++i) {
    const int parent = i < 40 ? 0 : 1;
    const int sub = (i / 20) % 2;
    parents.push_back(parent);
    truth.push_back(parent * 2 + sub);
    f(i, 0) = 30.0 * parent + rng.normal();
    f(i, 1) = 30.0 * sub + rng.normal();
    f(i, 2) = rng.normal();
  }
  const auto t1 = generate_child_labels(f, parents, 1, 0);
  CHECK(t1.labels == parents);

  const auto t2 = generate_child_labels(f, parents, 2, 0);
  CHECK(t2.centroids.rows() == 4);
  for (int i = 0; i < 80; ++i) {
    if (parents[i] == 0) {
      CHECK(t2.labels[i] >= 0);
      CHECK(t2.labels[i] < 2);
    } else {
      CHECK(t2.labels[i] >= 2);
      CHECK(t2.labels[i] < 4);
    }
  }
  CHECK(adjusted_rand_index(t2.labels, truth) == doctest::Approx(1.0));

  try {
    generate_child_labels(f.topRows(43), std::vector<int>(parents.begin(), parents.begin() + 43),
                          4, 0);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kTooFewSamples);
  }
}

TEST_CASE("child weights") {
  SUBCASE("symmetric configuration gives unit weights") {
    const auto w = child_weights(rows({{0, 1}, {0, -1}, {1, 0}, {-1, 0}}), 2);
    for (double v : w.weights) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("two classes at distances 1 and 3") {
    const double d[] = {1.0, 3.0};
    const auto w = child_weights_from_distances(d);
    CHECK(w.weights[0] == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(w.weights[1] == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("clip engaged keeps bounds and mean one") {
    const double d[] = {0.01, 1.0, 1.0, 1.0, 1.0, 1.0, 5.0, 20.0};
    const auto w = child_weights_from_distances(d, 0.25, 4.0);
    double mean = 0.0;
    for (double v : w.weights) {
      CHECK(v >= 0.25 - 1e-12);
      CHECK(v <= 4.0 + 1e-12);
      mean += v;
    }
    CHECK(mean / 8 == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(w.weights[0] == doctest::Approx(4.0));
    CHECK(w.weights[7] == doctest::Approx(0.25));
  }
  SUBCASE("coincident opposite centroid lands on the upper clip") {
    const double d[] = {0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0};
    const auto w = child_weights_from_distances(d, 0.25, 4.0);
    CHECK(w.weights[0] == doctest::Approx(4.0));
    CHECK(w.weights[0] == doctest::Approx(*std::max_element(w.weights.begin(), w.weights.end())));
    double mean = 0.0;
    for (double v : w.weights) mean += v;
    CHECK(mean / 8 == doctest::Approx(1.0).epsilon(1e-9));
  }
  SUBCASE("random centroids") {
    Rng rng(12);
    for (int t = 0; t < 20; ++t) {
      FeatureMatrix c(8, 3);
      for (int i = 0; i < c.size(); ++i) c.data()[i] = rng.normal();
      const auto w = child_weights(c, 4);
      double mean = 0.0;
      for (double v : w.weights) {
        CHECK(v >= 0.25 - 1e-12);
        CHECK(v <= 4.0 + 1e-12);
        mean += v;
      }
      CHECK(mean / 8 == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("efdmix") {
  const std::vector<double> u = {1, 3}, v = {2, 2};
  const auto r = efdmix(u, v, 0.5, false);
  CHECK(r.value[0] == doctest::Approx(1.5));
  CHECK(r.value[1] == doctest::Approx(2.5));

  CHECK(efdmix(u, v, 1.0, true).value == u);
  const auto zero = efdmix(u, v, 0.0, false).value;
  CHECK(zero[0] == doctest::Approx(2.0));
  CHECK(zero[1] == doctest::Approx(2.0));
  CHECK_THROWS_AS(efdmix(u, std::vector<double>{1.0}, 0.5, false), Error);

  // Sorted mode pairs order statistics: u's largest gets v's largest.
  const std::vector<double> us = {5, 1, 3}, vs = {10, 30, 20};
  const auto s = efdmix(us, vs, 0.5, true);
  CHECK(s.value[0] == doctest::Approx(0.5 * 5 + 0.5 * 30));
  CHECK(s.value[1] == doctest::Approx(0.5 * 1 + 0.5 * 10));
  CHECK(s.value[2] == doctest::Approx(0.5 * 3 + 0.5 * 20));

  const std::vector<double> gw = {1.0, 2.0, 3.0};
  const auto g = efdmix_backward(gw, s, 0.5);
  CHECK(g.grad_u == gw);
  CHECK(g.grad_v[1] == doctest::Approx(0.5));   // v=30 feeds u=5
  CHECK(g.grad_v[0] == doctest::Approx(1.0));   // v=10 feeds u=1
  CHECK(g.grad_v[2] == doctest::Approx(1.5));
}

TEST_CASE("cam") {
  SUBCASE("single map with unit weight") {
    std::vector<float> maps(12);
    for (std::size_t i = 0; i < maps.size(); ++i) maps[i] = static_cast<float>(i % 5);
    const float w[] = {1.0f};
    const auto r = cam(maps, 1, 3, 4, w, 80);
    for (std::size_t i = 0; i < maps.size(); ++i) CHECK(r.heatmap.data()[i] == maps[i]);
  }
  SUBCASE("flat map falls back to the patch center") {
    std::vector<float> maps(2 * 100, 0.3f);
    const float w[] = {1.0f, -2.0f};
    const auto r = cam(maps, 2, 10, 10, w, 80);
    CHECK(r.flat);
    CHECK(r.patch_x == 40.0);
    CHECK(r.patch_y == 40.0);
  }
  SUBCASE("planted peak") {
    std::vector<float> maps(100, 0.0f);
    maps[2 * 10 + 3] = 5.0f;
    const float w[] = {0.7f};
    const auto r = cam(maps, 1, 10, 10, w, 80);
    CHECK(r.map_y == 2);
    CHECK(r.map_x == 3);
    CHECK(r.patch_x == doctest::Approx(28.0));
    CHECK(r.patch_y == doctest::Approx(20.0));
  }
}
