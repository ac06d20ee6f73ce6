#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>

#include <Eigen/Core>

#include "mitdet/image.hpp"

namespace mitdet {

using Vec3 = std::array<double, 3>;

/// Three unit-norm absorbance rows: hematoxylin, eosin, residual.
///
/// Construction validates row norms and conditioning, so any StainMatrix in
/// hand is safe to invert.
class StainMatrix {
 public:
  /// Normalizes each row. Throws kInvalidStainBasis on a zero row or a
  /// (near-)singular basis.
  StainMatrix(const Vec3& hematoxylin, const Vec3& eosin, const Vec3& residual);

  /// Residual row is the normalized cross product of H and E.
  static StainMatrix from_he(const Vec3& hematoxylin, const Vec3& eosin);
  /// Default H&E basis (0.650, 0.704, 0.286) / (0.072, 0.990, 0.105).
  static StainMatrix default_he();
  static StainMatrix identity();
  /// Nine numbers, row-major.
  static StainMatrix from_row_major(const std::array<double, 9>& values);

  const Eigen::Matrix3d& matrix() const noexcept { return m_; }
  const Eigen::Matrix3d& inverse() const noexcept { return inv_; }
  Vec3 row(int i) const;
  std::array<double, 9> row_major() const;
  double condition_number() const;

 private:
  Eigen::Matrix3d m_;
  Eigen::Matrix3d inv_;
};

/// od = -log10(max(I, 1) / 255).
double intensity_to_od(std::uint8_t intensity);
/// I = round(255 * 10^-od), clamped to [0, 255].
std::uint8_t od_to_intensity(double od);

OdImage rgb_to_od(const RgbImage& img);
RgbImage od_to_rgb(const OdImage& od);

/// Solves c * M = od per pixel.
ConcentrationMap deconvolve(const OdImage& od, const StainMatrix& m);
/// od = c * M per pixel. Negative values are kept.
OdImage recombine(const ConcentrationMap& conc, const StainMatrix& m);

/// Hematoxylin concentration with negatives clamped to zero (1 channel).
ScalarMap hematoxylin_channel(const RgbImage& img, const StainMatrix& m);

struct StainEstimateOptions {
  double od_floor = 0.15;
  double percentile = 1.0;  // low tail; the high tail is 100 - percentile
  int min_pixels = 100;
};

/// Estimates H and E from the principal plane of the high-OD pixel cloud
/// using angular extreme percentiles.
StainMatrix estimate_stain_matrix(const RgbImage& img,
                                  const StainEstimateOptions& opts = {});

/// Deconvolve with src, scale concentrations by gain, recombine with tgt.
RgbImage restain(const RgbImage& img, const StainMatrix& src,
                 const StainMatrix& tgt, const Vec3& gain);

/// Image-to-image stain transfer into one target domain. Any learned model
/// can be wrapped in this signature.
using Restainer = std::function<RgbImage(const RgbImage&)>;

Restainer make_matrix_restainer(StainMatrix src, StainMatrix tgt, Vec3 gain);

struct HedJitter {
  Vec3 scale{1.0, 1.0, 1.0};
  Vec3 shift{0.0, 0.0, 0.0};
  // Uniform half-widths added to scale/shift, sampled once per call.
  Vec3 scale_spread{0.0, 0.0, 0.0};
  Vec3 shift_spread{0.0, 0.0, 0.0};
};

/// c' = c * scale + shift per stain, recombined with m.
RgbImage hed_jitter(const RgbImage& img, const StainMatrix& m,
                    const HedJitter& jitter, std::uint64_t seed);

}  // namespace mitdet
