#pragma once

#include <string>
#include <vector>

#include "mitdet/image.hpp"

namespace mitdet {

struct NucleusCandidate {
  int cx = 0;
  int cy = 0;
  int area = 0;
  double mean_od = 0.0;

  bool operator==(const NucleusCandidate&) const = default;
};

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct Patch {
  RgbImage pixels;
  std::string source_image_id;
  int cx = 0;
  int cy = 0;
};

enum class ThresholdMethod { kOtsu, kFixed };

struct LocalizeConfig {
  ThresholdMethod threshold_method = ThresholdMethod::kOtsu;
  double fixed_threshold = 0.3;
  int min_area = 30;
  int max_area = 3000;
  int open_radius = 1;

  void validate() const;
};

/// Otsu threshold over the given values (256 bins between min and max).
double otsu_threshold(const std::vector<double>& values);

/// Binary mask (1 channel, 0/1) of hmap > threshold, before opening.
Raster<std::uint8_t> binarize(const ScalarMap& hmap, const LocalizeConfig& cfg);

/// Erosion followed by dilation with a disk structuring element.
Raster<std::uint8_t> morphological_open(const Raster<std::uint8_t>& mask,
                                        int radius);

/// Connected-component centroids of the opened hematoxylin mask, filtered
/// by area and sorted by (cy, cx).
std::vector<NucleusCandidate> extract_candidates(const ScalarMap& hmap,
                                                 const LocalizeConfig& cfg);

/// size x size crops centered at each candidate, reflect-padded at borders.
std::vector<Patch> crop_patches(const RgbImage& img,
                                const std::vector<NucleusCandidate>& cands,
                                int size, const std::string& image_id = {});

RgbImage crop_reflect(const RgbImage& img, int cx, int cy, int size);

/// Fraction of gt points with a candidate within radius; 1 for empty gt.
double localization_sensitivity(const std::vector<NucleusCandidate>& cands,
                                const std::vector<Point>& gt, double radius);

}  // namespace mitdet
