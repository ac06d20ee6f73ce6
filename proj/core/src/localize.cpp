#include "mitdet/localize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mitdet/error.hpp"

namespace mitdet {

namespace {

using Mask = Raster<std::uint8_t>;

std::vector<std::pair<int, int>> disk_offsets(int radius) {
  std::vector<std::pair<int, int>> out;
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      if (dx * dx + dy * dy <= radius * radius) out.emplace_back(dy, dx);
    }
  }
  return out;
}

// Pixels outside the image count as background for both passes.
Mask erode(const Mask& in, const std::vector<std::pair<int, int>>& se) {
  Mask out(in.height(), in.width(), 1, 0);
  for (int y = 0; y < in.height(); ++y) {
    for (int x = 0; x < in.width(); ++x) {
      if (!in(y, x)) continue;
      bool keep = true;
      for (const auto& [dy, dx] : se) {
        const int yy = y + dy, xx = x + dx;
        if (yy < 0 || xx < 0 || yy >= in.height() || xx >= in.width() ||
            !in(yy, xx)) {
          keep = false;
          break;
        }
      }
      out(y, x) = keep ? 1 : 0;
    }
  }
  return out;
}

Mask dilate(const Mask& in, const std::vector<std::pair<int, int>>& se) {
  Mask out(in.height(), in.width(), 1, 0);
  for (int y = 0; y < in.height(); ++y) {
    for (int x = 0; x < in.width(); ++x) {
      if (!in(y, x)) continue;
      for (const auto& [dy, dx] : se) {
        const int yy = y + dy, xx = x + dx;
        if (yy >= 0 && xx >= 0 && yy < in.height() && xx < in.width()) {
          out(yy, xx) = 1;
        }
      }
    }
  }
  return out;
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

void LocalizeConfig::validate() const {
  if (!(0 < min_area && min_area < max_area)) {
    throw Error(ErrorKind::kInvalidArgument,
                "localize config requires 0 < min_area < max_area");
  }
  if (open_radius < 0) {
    throw Error(ErrorKind::kInvalidArgument, "open_radius must be >= 0");
  }
}

double otsu_threshold(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return lo - 1e-12;

  constexpr int kBins = 256;
  std::vector<double> hist(kBins, 0.0);
  const double width = (hi - lo) / kBins;
  for (double v : values) {
    const int b = std::min(kBins - 1, static_cast<int>((v - lo) / width));
    hist[b] += 1.0;
  }
  const double total = static_cast<double>(values.size());
  double sum_all = 0.0;
  for (int b = 0; b < kBins; ++b) sum_all += b * hist[b];

  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int best_bin = 0;
  for (int b = 0; b < kBins - 1; ++b) {
    w0 += hist[b];
    sum0 += b * hist[b];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0;
    const double m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_bin = b;
    }
  }
  return lo + (best_bin + 1) * width;
}

Mask binarize(const ScalarMap& hmap, const LocalizeConfig& cfg) {
  Mask mask(hmap.height(), hmap.width(), 1, 0);
  double threshold = cfg.fixed_threshold;
  if (cfg.threshold_method == ThresholdMethod::kOtsu) {
    std::vector<double> nonzero;
    for (double v : hmap.data()) {
      if (v > 0.0) nonzero.push_back(v);
    }
    if (nonzero.empty()) return mask;
    threshold = otsu_threshold(nonzero);
  }
  auto src = hmap.data();
  auto dst = mask.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i] = (src[i] > threshold && src[i] > 0.0) ? 1 : 0;
  }
  return mask;
}

Mask morphological_open(const Mask& mask, int radius) {
  if (radius <= 0) return mask;
  const auto se = disk_offsets(radius);
  return dilate(erode(mask, se), se);
}

std::vector<NucleusCandidate> extract_candidates(const ScalarMap& hmap,
                                                 const LocalizeConfig& cfg) {
  cfg.validate();
  const Mask mask = morphological_open(binarize(hmap, cfg), cfg.open_radius);
  const int h = mask.height(), w = mask.width();
  Raster<int> label(h, w, 1, -1);
  std::vector<NucleusCandidate> out;
  std::vector<std::pair<int, int>> stack;

  for (int y0 = 0; y0 < h; ++y0) {
    for (int x0 = 0; x0 < w; ++x0) {
      if (!mask(y0, x0) || label(y0, x0) >= 0) continue;
      long sx = 0, sy = 0;
      int area = 0;
      double od_sum = 0.0;
      stack.clear();
      stack.emplace_back(y0, x0);
      label(y0, x0) = 1;
      while (!stack.empty()) {
        const auto [y, x] = stack.back();
        stack.pop_back();
        ++area;
        sx += x;
        sy += y;
        od_sum += hmap(y, x);
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || xx < 0 || yy >= h || xx >= w) continue;
            if (!mask(yy, xx) || label(yy, xx) >= 0) continue;
            label(yy, xx) = 1;
            stack.emplace_back(yy, xx);
          }
        }
      }
      if (area < cfg.min_area || area > cfg.max_area) continue;
      NucleusCandidate c;
      c.cx = static_cast<int>(std::lround(static_cast<double>(sx) / area));
      c.cy = static_cast<int>(std::lround(static_cast<double>(sy) / area));
      c.area = area;
      c.mean_od = od_sum / area;
      out.push_back(c);
    }
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.cy != b.cy ? a.cy < b.cy : a.cx < b.cx;
  });
  return out;
}

RgbImage crop_reflect(const RgbImage& img, int cx, int cy, int size) {
  RgbImage out(size, size, img.channels());
  const int x0 = cx - size / 2, y0 = cy - size / 2;
  for (int y = 0; y < size; ++y) {
    const int sy = reflect_index(y0 + y, img.height());
    for (int x = 0; x < size; ++x) {
      const int sx = reflect_index(x0 + x, img.width());
      for (int c = 0; c < img.channels(); ++c) out(y, x, c) = img(sy, sx, c);
    }
  }
  return out;
}

std::vector<Patch> crop_patches(const RgbImage& img,
                                const std::vector<NucleusCandidate>& cands,
                                int size, const std::string& image_id) {
  if (size < 16 || size % 2 != 0) {
    throw Error(ErrorKind::kInvalidArgument, "patch size must be even and >= 16");
  }
  std::vector<Patch> out;
  out.reserve(cands.size());
  for (const auto& c : cands) {
    out.push_back(Patch{crop_reflect(img, c.cx, c.cy, size), image_id, c.cx, c.cy});
  }
  return out;
}

double localization_sensitivity(const std::vector<NucleusCandidate>& cands,
                                const std::vector<Point>& gt, double radius) {
  if (!(radius > 0.0)) {
    throw Error(ErrorKind::kInvalidArgument, "radius must be positive");
  }
  if (gt.empty()) return 1.0;
  const double r2 = radius * radius;
  std::size_t covered = 0;
  for (const auto& g : gt) {
    for (const auto& c : cands) {
      const double dx = c.cx - g.x, dy = c.cy - g.y;
      if (dx * dx + dy * dy <= r2) {
        ++covered;
        break;
      }
    }
  }
  return static_cast<double>(covered) / static_cast<double>(gt.size());
}

}  // namespace mitdet
