#include "mitdet/stain.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "mitdet/error.hpp"
#include "mitdet/rng.hpp"

namespace mitdet {

namespace {

constexpr double kMaxCondition = 1e6;

Eigen::RowVector3d normalized_row(const Vec3& v) {
  Eigen::RowVector3d r(v[0], v[1], v[2]);
  const double n = r.norm();
  if (!(n > 0.0) || !std::isfinite(n)) {
    throw Error(ErrorKind::kInvalidStainBasis, "stain vector has zero norm");
  }
  return r / n;
}

Vec3 to_vec3(const Eigen::Vector3d& v) { return {v[0], v[1], v[2]}; }

void check_same_shape(const Raster<double>& a, int h, int w) {
  if (a.height() != h || a.width() != w || a.channels() != 3) {
    throw Error(ErrorKind::kShapeMismatch, "raster shape mismatch");
  }
}

// Applies a 3x3 row transform (out = in * t) to every pixel.
Raster<double> transform_pixels(const Raster<double>& in,
                                const Eigen::Matrix3d& t) {
  Raster<double> out(in.height(), in.width(), 3);
  auto src = in.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); i += 3) {
    const Eigen::RowVector3d v(src[i], src[i + 1], src[i + 2]);
    const Eigen::RowVector3d r = v * t;
    dst[i] = r[0];
    dst[i + 1] = r[1];
    dst[i + 2] = r[2];
  }
  return out;
}

}  // namespace

StainMatrix::StainMatrix(const Vec3& hematoxylin, const Vec3& eosin,
                         const Vec3& residual) {
  m_.row(0) = normalized_row(hematoxylin);
  m_.row(1) = normalized_row(eosin);
  m_.row(2) = normalized_row(residual);
  const double cond = condition_number();
  if (!std::isfinite(cond) || cond >= kMaxCondition) {
    throw Error(ErrorKind::kInvalidStainBasis,
                "stain matrix is singular or ill-conditioned");
  }
  inv_ = m_.inverse();
}

StainMatrix StainMatrix::from_he(const Vec3& hematoxylin, const Vec3& eosin) {
  const Eigen::Vector3d h = normalized_row(hematoxylin).transpose();
  const Eigen::Vector3d e = normalized_row(eosin).transpose();
  const Eigen::Vector3d r = h.cross(e);
  if (r.norm() < 1e-9) {
    throw Error(ErrorKind::kInvalidStainBasis, "H and E vectors are parallel");
  }
  return StainMatrix(hematoxylin, eosin, to_vec3(r.normalized()));
}

StainMatrix StainMatrix::default_he() {
  return from_he({0.650, 0.704, 0.286}, {0.072, 0.990, 0.105});
}

StainMatrix StainMatrix::identity() {
  return StainMatrix({1, 0, 0}, {0, 1, 0}, {0, 0, 1});
}

StainMatrix StainMatrix::from_row_major(const std::array<double, 9>& v) {
  return StainMatrix({v[0], v[1], v[2]}, {v[3], v[4], v[5]},
                     {v[6], v[7], v[8]});
}

Vec3 StainMatrix::row(int i) const { return {m_(i, 0), m_(i, 1), m_(i, 2)}; }

std::array<double, 9> StainMatrix::row_major() const {
  std::array<double, 9> out{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) out[r * 3 + c] = m_(r, c);
  }
  return out;
}

double StainMatrix::condition_number() const {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m_);
  const auto& s = svd.singularValues();
  if (s[2] <= 0.0) return std::numeric_limits<double>::infinity();
  return s[0] / s[2];
}

double intensity_to_od(std::uint8_t intensity) {
  const double i = std::max<double>(intensity, 1.0);
  return -std::log10(i / 255.0);
}

std::uint8_t od_to_intensity(double od) {
  const double v = std::round(255.0 * std::pow(10.0, -od));
  return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

OdImage rgb_to_od(const RgbImage& img) {
  static const std::array<double, 256> table = [] {
    std::array<double, 256> t{};
    for (int i = 0; i < 256; ++i) t[i] = intensity_to_od(static_cast<std::uint8_t>(i));
    return t;
  }();
  OdImage od(img.height(), img.width(), img.channels());
  auto src = img.data();
  auto dst = od.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = table[src[i]];
  return od;
}

RgbImage od_to_rgb(const OdImage& od) {
  RgbImage img(od.height(), od.width(), od.channels());
  auto src = od.data();
  auto dst = img.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = od_to_intensity(src[i]);
  return img;
}

ConcentrationMap deconvolve(const OdImage& od, const StainMatrix& m) {
  check_same_shape(od, od.height(), od.width());
  return transform_pixels(od, m.inverse());
}

OdImage recombine(const ConcentrationMap& conc, const StainMatrix& m) {
  check_same_shape(conc, conc.height(), conc.width());
  return transform_pixels(conc, m.matrix());
}

ScalarMap hematoxylin_channel(const RgbImage& img, const StainMatrix& m) {
  const ConcentrationMap conc = deconvolve(rgb_to_od(img), m);
  ScalarMap h(img.height(), img.width(), 1);
  auto src = conc.data();
  auto dst = h.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i] = std::max(0.0, src[3 * i]);
  }
  return h;
}

StainMatrix estimate_stain_matrix(const RgbImage& img,
                                  const StainEstimateOptions& opts) {
  const OdImage od = rgb_to_od(img);
  auto v = od.data();
  std::vector<Eigen::Vector3d> cloud;
  for (std::size_t i = 0; i < v.size(); i += 3) {
    const Eigen::Vector3d p(v[i], v[i + 1], v[i + 2]);
    if (p.norm() > opts.od_floor) cloud.push_back(p);
  }
  if (static_cast<int>(cloud.size()) < opts.min_pixels) {
    throw Error(ErrorKind::kInsufficientTissue, "insufficient tissue");
  }

  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& p : cloud) mean += p;
  mean /= static_cast<double>(cloud.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : cloud) cov += (p - mean) * (p - mean).transpose();
  cov /= static_cast<double>(cloud.size());

  // Eigenvalues ascending; the principal plane is spanned by columns 2 and 1.
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  const Eigen::Vector3d evals = eig.eigenvalues();
  Eigen::Vector3d e1 = eig.eigenvectors().col(2);
  Eigen::Vector3d e2 = eig.eigenvectors().col(1);
  if (e1.sum() < 0) e1 = -e1;
  if (e2.sum() < 0) e2 = -e2;

  std::vector<double> angles;
  angles.reserve(cloud.size());
  for (const auto& p : cloud) angles.push_back(std::atan2(p.dot(e2), p.dot(e1)));
  std::sort(angles.begin(), angles.end());
  auto at_percentile = [&](double pct) {
    const double pos = pct / 100.0 * static_cast<double>(angles.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, angles.size() - 1);
    return angles[lo] + (pos - static_cast<double>(lo)) * (angles[hi] - angles[lo]);
  };
  const double a_min = at_percentile(opts.percentile);
  const double a_max = at_percentile(100.0 - opts.percentile);

  constexpr double kMinSpreadRad = 3.0 * M_PI / 180.0;
  if (evals[1] <= 1e-3 * evals[2] || a_max - a_min < kMinSpreadRad) {
    throw Error(ErrorKind::kSingleStain, "single stain");
  }

  Eigen::Vector3d va = std::cos(a_min) * e1 + std::sin(a_min) * e2;
  Eigen::Vector3d vb = std::cos(a_max) * e1 + std::sin(a_max) * e2;
  if (va.sum() < 0) va = -va;
  if (vb.sum() < 0) vb = -vb;
  va.normalize();
  vb.normalize();

  const Eigen::Vector3d ref = Eigen::Vector3d(0.650, 0.704, 0.286).normalized();
  if (vb.dot(ref) > va.dot(ref)) std::swap(va, vb);
  return StainMatrix::from_he(to_vec3(va), to_vec3(vb));
}

RgbImage restain(const RgbImage& img, const StainMatrix& src,
                 const StainMatrix& tgt, const Vec3& gain) {
  // One combined per-pixel map: od * src^-1 * diag(gain) * tgt.
  const Eigen::Matrix3d t = src.inverse() *
                            Eigen::Vector3d(gain[0], gain[1], gain[2]).asDiagonal() *
                            tgt.matrix();
  return od_to_rgb(transform_pixels(rgb_to_od(img), t));
}

Restainer make_matrix_restainer(StainMatrix src, StainMatrix tgt, Vec3 gain) {
  return [src = std::move(src), tgt = std::move(tgt), gain](const RgbImage& img) {
    return restain(img, src, tgt, gain);
  };
}

RgbImage hed_jitter(const RgbImage& img, const StainMatrix& m,
                    const HedJitter& jitter, std::uint64_t seed) {
  Rng rng(seed);
  Vec3 scale = jitter.scale;
  Vec3 shift = jitter.shift;
  for (int s = 0; s < 3; ++s) {
    if (jitter.scale_spread[s] > 0) {
      scale[s] += rng.uniform(-jitter.scale_spread[s], jitter.scale_spread[s]);
    }
    if (jitter.shift_spread[s] > 0) {
      shift[s] += rng.uniform(-jitter.shift_spread[s], jitter.shift_spread[s]);
    }
  }
  ConcentrationMap conc = deconvolve(rgb_to_od(img), m);
  auto c = conc.data();
  for (std::size_t i = 0; i < c.size(); i += 3) {
    for (int s = 0; s < 3; ++s) c[i + s] = c[i + s] * scale[s] + shift[s];
  }
  return od_to_rgb(recombine(conc, m));
}

}  // namespace mitdet
