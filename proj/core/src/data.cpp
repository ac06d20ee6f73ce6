#include "mitdet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "mitdet/error.hpp"
#include "mitdet/rng.hpp"

namespace mitdet {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Annotations

const char* to_string(PointLabel label) {
  return label == PointLabel::kMitosis ? "mitosis" : "hard_negative";
}

PointLabel parse_point_label(const std::string& text) {
  if (text == "mitosis") return PointLabel::kMitosis;
  if (text == "hard_negative") return PointLabel::kHardNegative;
  throw Error(ErrorKind::kUnknownLabel, "unknown point label: " + text);
}

const ImageEntry* AnnotationSet::find_image(const std::string& id) const {
  for (const auto& img : images) {
    if (img.id == id) return &img;
  }
  return nullptr;
}

std::vector<Point> AnnotationSet::mitoses(const std::string& image_id) const {
  std::vector<Point> out;
  for (const auto& p : points) {
    if (p.image_id == image_id && p.label == PointLabel::kMitosis) out.push_back({p.x, p.y});
  }
  return out;
}

std::vector<const AnnotatedPoint*> AnnotationSet::points_for(
    const std::string& image_id) const {
  std::vector<const AnnotatedPoint*> out;
  for (const auto& p : points) {
    if (p.image_id == image_id) out.push_back(&p);
  }
  return out;
}

namespace {

AnnotationSet parse_json_annotations(const json& doc, AnnotationFormat format) {
  AnnotationSet set;
  if (doc.is_array() && doc.empty()) return set;
  if (!doc.is_object()) {
    throw Error(ErrorKind::kMalformedJson, "annotation root must be an object");
  }
  std::set<std::string> ids;
  for (const auto& e : doc.value("images", json::array())) {
    ImageEntry img;
    img.id = e.at("id").get<std::string>();
    img.file = e.value("file", std::string{});
    img.width = e.at("width").get<int>();
    img.height = e.at("height").get<int>();
    img.split = e.value("split", std::string{});
    if (!ids.insert(img.id).second) {
      throw Error(ErrorKind::kMalformedJson, "duplicate image id: " + img.id);
    }
    set.images.push_back(std::move(img));
  }
  const char* key = format == AnnotationFormat::kPointsJson ? "points" : "boxes";
  for (const auto& e : doc.value(key, json::array())) {
    AnnotatedPoint p;
    p.image_id = e.at("image_id").get<std::string>();
    if (format == AnnotationFormat::kPointsJson) {
      p.x = e.at("x").get<double>();
      p.y = e.at("y").get<double>();
    } else {
      p.x = e.at("x").get<double>() + e.at("w").get<double>() / 2.0;
      p.y = e.at("y").get<double>() + e.at("h").get<double>() / 2.0;
    }
    p.label = parse_point_label(e.at("label").get<std::string>());
    p.kind = e.value("kind", std::string{});
    const ImageEntry* img = set.find_image(p.image_id);
    if (img == nullptr) {
      throw Error(ErrorKind::kMalformedJson, "point references unknown image: " + p.image_id);
    }
    if (p.x < 0.0 || p.y < 0.0 || p.x >= img->width || p.y >= img->height) {
      throw Error(ErrorKind::kOutOfBounds, "annotation point outside image " + p.image_id);
    }
    set.points.push_back(std::move(p));
  }
  return set;
}

}  // namespace

AnnotationSet parse_annotations(const std::string& text, AnnotationFormat format) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kMalformedJson, e.what());
  }
  try {
    return parse_json_annotations(doc, format);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kMalformedJson, e.what());
  }
}

AnnotationSet load_annotations(const std::string& path, AnnotationFormat format) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::kMissingFile, "cannot open annotations: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_annotations(ss.str(), format);
}

std::string annotations_to_json(const AnnotationSet& set) {
  json doc;
  doc["images"] = json::array();
  for (const auto& img : set.images) {
    json e = {{"id", img.id}, {"file", img.file}, {"width", img.width},
              {"height", img.height}};
    if (!img.split.empty()) e["split"] = img.split;
    doc["images"].push_back(std::move(e));
  }
  doc["points"] = json::array();
  for (const auto& p : set.points) {
    json e = {{"image_id", p.image_id}, {"x", p.x}, {"y", p.y},
              {"label", to_string(p.label)}};
    if (!p.kind.empty()) e["kind"] = p.kind;
    doc["points"].push_back(std::move(e));
  }
  return doc.dump(2) + "\n";
}

void save_annotations(const AnnotationSet& set, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::kIo, "cannot write annotations: " + path);
  os << annotations_to_json(set);
}

// ---------------------------------------------------------------------------
// Synthetic data

void SyntheticConfig::validate() const {
  if (image_count < 0 || normal_nuclei < 0 || mitoses < 0 || impostors < 0) {
    throw Error(ErrorKind::kInvalidArgument, "synthetic counts must be >= 0");
  }
  if (image_size < 32) throw Error(ErrorKind::kInvalidArgument, "image_size must be >= 32");
  if (!(radius_min > 0.0 && radius_min <= radius_max)) {
    throw Error(ErrorKind::kInvalidArgument, "invalid radius range");
  }
  if (!(min_separation > 0.0)) {
    throw Error(ErrorKind::kInvalidArgument, "min_separation must be positive");
  }
}

namespace {

enum class ShapeKind { kNucleus, kMitosis, kImpostor };

struct Shape {
  ShapeKind kind;
  double x, y;
};

// Smooth periodic texture in roughly [-1, 1].
struct Texture {
  double fx[3], fy[3], phase[3];

  explicit Texture(Rng& rng) {
    for (int i = 0; i < 3; ++i) {
      fx[i] = rng.uniform(0.01, 0.06);
      fy[i] = rng.uniform(0.01, 0.06);
      phase[i] = rng.uniform(0.0, 2.0 * M_PI);
    }
  }
  double operator()(double x, double y) const {
    double s = 0.0;
    for (int i = 0; i < 3; ++i) s += std::sin(fx[i] * x + fy[i] * y + phase[i]);
    return s / 3.0;
  }
};

Vec3 jitter_direction(const Vec3& v, double max_deg, Rng& rng) {
  const double angle = rng.uniform(0.0, max_deg) * M_PI / 180.0;
  Eigen::Vector3d base(v[0], v[1], v[2]);
  base.normalize();
  Eigen::Vector3d r(rng.normal(), rng.normal(), rng.normal());
  r -= r.dot(base) * base;
  if (r.norm() < 1e-9) return v;
  r.normalize();
  const Eigen::Vector3d out = std::cos(angle) * base + std::sin(angle) * r;
  return {std::abs(out[0]), std::abs(out[1]), std::abs(out[2])};
}

// Coverage in [0, 1] from a signed distance-like value (negative inside).
double soft_edge(double d) { return std::clamp(0.5 - d, 0.0, 1.0); }

// Elliptical distance proxy in pixels: <0 inside.
double ellipse_distance(double dx, double dy, double a, double b, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  const double u = c * dx + s * dy;
  const double v = -s * dx + c * dy;
  const double r = std::sqrt((u * u) / (a * a) + (v * v) / (b * b));
  return (r - 1.0) * std::min(a, b);
}

class ShapeRenderer {
 public:
  ShapeRenderer(ConcentrationMap& conc, Rng& rng) : conc_(conc), rng_(rng) {}

  void nucleus(double cx, double cy, double r) {
    const double a = r, b = r * rng_.uniform(0.65, 1.0);
    const double angle = rng_.uniform(0.0, M_PI);
    const double density = rng_.uniform(0.35, 0.55);
    paint(cx, cy, r + 2, density, 0.15, [&](double dx, double dy) {
      return ellipse_distance(dx, dy, a, b, angle);
    });
  }

  void mitosis(double cx, double cy, double r, bool low_intensity) {
    const double density =
        low_intensity ? rng_.uniform(0.10, 0.14) : rng_.uniform(0.95, 1.2);
    const double angle = rng_.uniform(0.0, M_PI);
    if (rng_.bernoulli(0.5)) {
      // Metaphase plate: elongated bar with a spiky rim.
      const double a = 1.3 * r, b = 0.5 * r;
      const double phase = rng_.uniform(0.0, 2.0 * M_PI);
      paint(cx, cy, 1.6 * r + 2, density, 0.05, [&](double dx, double dy) {
        const double theta = std::atan2(dy, dx);
        const double spike = 1.0 + 0.3 * std::max(0.0, std::sin(9.0 * theta + phase));
        return ellipse_distance(dx / spike, dy / spike, a, b, angle);
      });
    } else {
      // Anaphase: two lobes joined by a thin chromatin bridge.
      const double off = 0.9 * r;
      const double ux = std::cos(angle), uy = std::sin(angle);
      const double la = 0.45 * r, lb = 0.7 * r;
      paint(cx, cy, 1.8 * r + 2, density, 0.05, [&](double dx, double dy) {
        const double d1 = ellipse_distance(dx - off * ux, dy - off * uy, la, lb, angle);
        const double d2 = ellipse_distance(dx + off * ux, dy + off * uy, la, lb, angle);
        const double along = dx * ux + dy * uy;
        const double across = std::abs(-dx * uy + dy * ux);
        const double bridge = std::abs(along) <= off ? across - 2.2 : 1e9;
        return std::min({d1, d2, bridge});
      });
    }
  }

  void impostor(double cx, double cy) {
    const double r = rng_.uniform(4.2, 5.2);
    const double density = rng_.uniform(0.95, 1.2);
    const double b = r * rng_.uniform(0.85, 1.0);
    const double angle = rng_.uniform(0.0, M_PI);
    paint(cx, cy, r + 2, density, 0.03, [&](double dx, double dy) {
      return ellipse_distance(dx, dy, r, b, angle);
    });
    // A tiny detached fragment, below any sensible area threshold.
    const double fa = rng_.uniform(0.0, 2.0 * M_PI);
    const double fx = cx + (r + 3.0) * std::cos(fa), fy = cy + (r + 3.0) * std::sin(fa);
    paint(fx, fy, 3.5, density, 0.0, [&](double dx, double dy) {
      return std::sqrt(dx * dx + dy * dy) - 1.3;
    });
  }

 private:
  template <typename Dist>
  void paint(double cx, double cy, double extent, double density, double speckle,
             Dist dist) {
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - extent)));
    const int x1 = std::min(conc_.width() - 1, static_cast<int>(std::ceil(cx + extent)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - extent)));
    const int y1 = std::min(conc_.height() - 1, static_cast<int>(std::ceil(cy + extent)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double cov = soft_edge(dist(x - cx, y - cy));
        if (cov <= 0.0) continue;
        const double texture = speckle > 0.0 ? 1.0 + speckle * rng_.normal() : 1.0;
        const double h = density * cov * std::max(0.2, texture);
        conc_(y, x, 0) = std::max(conc_(y, x, 0), h);
        conc_(y, x, 1) *= 1.0 - 0.5 * cov;
      }
    }
  }

  ConcentrationMap& conc_;
  Rng& rng_;
};

std::vector<Shape> place_shapes(const SyntheticConfig& cfg, Rng& rng) {
  std::vector<ShapeKind> kinds;
  kinds.insert(kinds.end(), static_cast<std::size_t>(cfg.mitoses), ShapeKind::kMitosis);
  kinds.insert(kinds.end(), static_cast<std::size_t>(cfg.impostors), ShapeKind::kImpostor);
  kinds.insert(kinds.end(), static_cast<std::size_t>(cfg.normal_nuclei), ShapeKind::kNucleus);
  const double margin = 1.8 * cfg.radius_max + 2.0;
  const double lo = margin, hi = cfg.image_size - 1 - margin;
  if (!kinds.empty() && !(hi > lo)) {
    throw Error(ErrorKind::kInfeasiblePacking, "image too small for shapes");
  }
  const double sep2 = cfg.min_separation * cfg.min_separation;
  std::vector<Shape> out;
  int attempts = 0;
  for (ShapeKind kind : kinds) {
    while (true) {
      if (++attempts > 10000) {
        throw Error(ErrorKind::kInfeasiblePacking,
                    "cannot place all shapes with the requested separation");
      }
      const double x = std::round(rng.uniform(lo, hi));
      const double y = std::round(rng.uniform(lo, hi));
      const bool ok = std::all_of(out.begin(), out.end(), [&](const Shape& s) {
        return (s.x - x) * (s.x - x) + (s.y - y) * (s.y - y) >= sep2;
      });
      if (ok) {
        out.push_back({kind, x, y});
        break;
      }
    }
  }
  return out;
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticConfig& cfg, const StainMatrix& stain) {
  cfg.validate();
  SyntheticDataset ds;
  const int train_count =
      static_cast<int>(std::lround(cfg.image_count * cfg.train_fraction));
  for (int i = 0; i < cfg.image_count; ++i) {
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(i)));
    char id[32];
    std::snprintf(id, sizeof(id), "img_%03d", i);
    const int n = cfg.image_size;

    const StainMatrix local = StainMatrix::from_he(
        jitter_direction(stain.row(0), cfg.stain_jitter_deg, rng),
        jitter_direction(stain.row(1), cfg.stain_jitter_deg, rng));

    ConcentrationMap conc(n, n, 3, 0.0);
    const Texture tex(rng);
    const double e_level = rng.uniform(0.2, 0.3);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        conc(y, x, 0) = std::max(0.0, 0.03 + 0.01 * rng.normal());
        conc(y, x, 1) = std::max(0.0, e_level * (1.0 + 0.35 * tex(x, y)) + 0.015 * rng.normal());
      }
    }

    const std::vector<Shape> shapes = place_shapes(cfg, rng);
    ShapeRenderer render(conc, rng);
    for (const Shape& s : shapes) {
      const double r = rng.uniform(cfg.radius_min, cfg.radius_max);
      AnnotatedPoint p{id, s.x, s.y, PointLabel::kHardNegative, {}};
      switch (s.kind) {
        case ShapeKind::kNucleus:
          render.nucleus(s.x, s.y, r);
          p.kind = "nucleus";
          break;
        case ShapeKind::kImpostor:
          render.impostor(s.x, s.y);
          p.kind = "impostor";
          break;
        case ShapeKind::kMitosis:
          render.mitosis(s.x, s.y, r, rng.bernoulli(cfg.low_intensity_fraction));
          p.label = PointLabel::kMitosis;
          p.kind = "mitosis";
          break;
      }
      ds.annotations.points.push_back(std::move(p));
    }

    ds.images.push_back({id, od_to_rgb(recombine(conc, local))});
    ds.annotations.images.push_back(
        {id, std::string("images/") + id + ".png", n, n, i < train_count ? "train" : "test"});
  }
  return ds;
}

void write_dataset(const SyntheticDataset& ds, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");
  for (const auto& img : ds.images) {
    write_png(img.image, (fs::path(dir) / "images" / (img.id + ".png")).string());
  }
  save_annotations(ds.annotations, (fs::path(dir) / "annotations.json").string());
}

}  // namespace mitdet
