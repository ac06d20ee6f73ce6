#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mitdet/image.hpp"
#include "mitdet/localize.hpp"
#include "mitdet/stain.hpp"

namespace mitdet {

// ---------------------------------------------------------------------------
// Annotations

enum class PointLabel { kMitosis, kHardNegative };

const char* to_string(PointLabel label);
PointLabel parse_point_label(const std::string& text);

struct ImageEntry {
  std::string id;
  std::string file;
  int width = 0;
  int height = 0;
  std::string split;  // "train", "test" or empty

  bool operator==(const ImageEntry&) const = default;
};

struct AnnotatedPoint {
  std::string image_id;
  double x = 0.0;
  double y = 0.0;
  PointLabel label = PointLabel::kMitosis;
  std::string kind;  // synthetic provenance ("nucleus", "impostor", "mitosis"); optional

  bool operator==(const AnnotatedPoint&) const = default;
};

struct AnnotationSet {
  std::vector<ImageEntry> images;
  std::vector<AnnotatedPoint> points;

  const ImageEntry* find_image(const std::string& id) const;
  std::vector<Point> mitoses(const std::string& image_id) const;
  std::vector<const AnnotatedPoint*> points_for(const std::string& image_id) const;

  bool operator==(const AnnotationSet&) const = default;
};

enum class AnnotationFormat { kPointsJson, kBoxesJson };

/// Validates ids and bounds. Distinct ErrorKinds for a missing file,
/// malformed JSON, out-of-bounds points and unknown labels.
AnnotationSet load_annotations(const std::string& path,
                               AnnotationFormat format = AnnotationFormat::kPointsJson);
AnnotationSet parse_annotations(const std::string& text, AnnotationFormat format);
void save_annotations(const AnnotationSet& set, const std::string& path);
std::string annotations_to_json(const AnnotationSet& set);

// ---------------------------------------------------------------------------
// Synthetic H&E-like data

struct SyntheticConfig {
  int image_count = 40;
  int image_size = 512;
  int normal_nuclei = 60;
  int mitoses = 5;
  int impostors = 10;
  double radius_min = 6.0;
  double radius_max = 10.0;
  double min_separation = 24.0;
  /// Fraction of mitoses rendered at low hematoxylin density.
  double low_intensity_fraction = 0.0;
  /// Leading images are tagged "train", the rest "test".
  double train_fraction = 0.75;
  /// Angular jitter (degrees) of the per-image stain vectors.
  double stain_jitter_deg = 4.0;
  std::uint64_t seed = 7;

  void validate() const;
};

struct SyntheticImage {
  std::string id;
  RgbImage image;
};

struct SyntheticDataset {
  std::vector<SyntheticImage> images;
  AnnotationSet annotations;
};

/// Renders shapes in concentration space and maps them to RGB through the
/// stain basis. Throws kInfeasiblePacking when shapes cannot be placed.
SyntheticDataset generate_synthetic(const SyntheticConfig& cfg,
                                    const StainMatrix& stain = StainMatrix::default_he());

/// Writes images/<id>.png and annotations.json under dir.
void write_dataset(const SyntheticDataset& ds, const std::string& dir);

// ---------------------------------------------------------------------------
// PNG

RgbImage read_png(const std::string& path);
void write_png(const RgbImage& img, const std::string& path);

}  // namespace mitdet
