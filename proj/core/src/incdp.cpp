#include "mitdet/incdp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "mitdet/error.hpp"

namespace mitdet {

namespace {

double clamp_prob(double p) { return std::clamp(p, kProbEps, 1.0 - kProbEps); }

void check_labels(std::size_t n, std::size_t labels) {
  if (n != labels) {
    throw Error(ErrorKind::kShapeMismatch, "label count does not match sample count");
  }
}

// d/dp of -[(1-p)^g log p] for the true class.
double focal_true_grad(double p, double gamma) {
  const double q = 1.0 - p;
  const double qg = std::pow(q, gamma);
  const double dq = gamma > 0.0 ? gamma * std::pow(q, gamma - 1.0) : 0.0;
  return dq * std::log(p) - qg / p;
}

// Stable argsort, ties broken by index.
std::vector<std::size_t> argsort(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  return idx;
}

std::vector<std::size_t> pair_sources(std::span<const double> u,
                                      std::span<const double> v, bool sorted_mode) {
  std::vector<std::size_t> src(u.size());
  if (!sorted_mode) {
    std::iota(src.begin(), src.end(), std::size_t{0});
    return src;
  }
  const auto ou = argsort(u);
  const auto ov = argsort(v);
  for (std::size_t r = 0; r < ou.size(); ++r) src[ou[r]] = ov[r];
  return src;
}

}  // namespace

void InCdpConfig::validate() const {
  if (child_per_parent < 1) throw Error(ErrorKind::kInvalidArgument, "T must be >= 1");
  if (gamma < 0.0) throw Error(ErrorKind::kInvalidArgument, "gamma must be >= 0");
  if (lambda < 0.0) throw Error(ErrorKind::kInvalidArgument, "lambda must be >= 0");
  if (!(center_rate > 0.0 && center_rate <= 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "center_rate must be in (0, 1]");
  }
  if (!(weight_min > 0.0 && weight_min <= 1.0 && weight_max >= 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "weight clip must bracket 1");
  }
}

ChildLabeling generate_child_labels(const FeatureMatrix& features,
                                    const std::vector<int>& parent_labels,
                                    int t, std::uint64_t seed) {
  check_labels(static_cast<std::size_t>(features.rows()), parent_labels.size());
  if (t < 1) throw Error(ErrorKind::kInvalidArgument, "T must be >= 1");
  ChildLabeling out;
  out.labels.assign(parent_labels.size(), -1);
  out.centroids = FeatureMatrix::Zero(2 * t, features.cols());
  for (int parent = 0; parent < 2; ++parent) {
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < parent_labels.size(); ++i) {
      if (parent_labels[i] == parent) rows.push_back(static_cast<Eigen::Index>(i));
    }
    if (static_cast<int>(rows.size()) < t) {
      throw Error(ErrorKind::kTooFewSamples,
                  "parent class has fewer samples than child classes");
    }
    FeatureMatrix sub(static_cast<Eigen::Index>(rows.size()), features.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      sub.row(static_cast<Eigen::Index>(r)) = features.row(rows[r]);
    }
    const ClusterAssignment a = kmeans(sub, t, seed + static_cast<std::uint64_t>(parent));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      out.labels[static_cast<std::size_t>(rows[r])] = parent * t + a.labels[r];
    }
    out.centroids.middleRows(parent * t, t) = a.centroids;
  }
  return out;
}

ChildWeights child_weights(const FeatureMatrix& centroids, int t, double wmin,
                           double wmax) {
  if (centroids.rows() != 2 * t) {
    throw Error(ErrorKind::kShapeMismatch, "expected 2T child centroids");
  }
  const int n = 2 * t;
  std::vector<double> d(n, std::numeric_limits<double>::infinity());
  for (int j = 0; j < n; ++j) {
    const int other = j < t ? t : 0;
    for (int k = other; k < other + t; ++k) {
      d[j] = std::min(d[j], (centroids.row(j) - centroids.row(k)).norm());
    }
  }
  return child_weights_from_distances(d, wmin, wmax);
}

ChildWeights child_weights_from_distances(std::span<const double> d, double wmin,
                                          double wmax) {
  if (d.empty()) throw Error(ErrorKind::kInvalidArgument, "no child distances");
  if (!(wmin > 0.0 && wmin <= 1.0 && wmax >= 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "weight clip must satisfy 0 < w_min <= 1 <= w_max");
  }
  const auto n = static_cast<int>(d.size());
  double mean_d = 0.0;
  for (double v : d) mean_d += v;
  mean_d /= n;
  std::vector<double> raw(d.size());
  for (int j = 0; j < n; ++j) {
    // A coincident opposite centroid always ends at the upper clip.
    raw[j] = d[j] > 0.0 ? mean_d / d[j] : std::numeric_limits<double>::infinity();
  }
  if (mean_d <= 0.0) raw.assign(d.size(), 1.0);

  auto clipped_mean = [&](double s) {
    double acc = 0.0;
    for (double r : raw) acc += std::clamp(s * r, wmin, wmax);
    return acc / n;
  };
  // mean(clip(s * raw)) is non-decreasing in s; bisect for mean 1.
  double lo = 0.0, hi = 1.0;
  while (clipped_mean(hi) < 1.0) hi *= 2.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (clipped_mean(mid) < 1.0 ? lo : hi) = mid;
  }
  ChildWeights out;
  out.weights.resize(d.size());
  for (int j = 0; j < n; ++j) out.weights[j] = std::clamp(hi * raw[j], wmin, wmax);
  // Remove the bisection residual without leaving the clip range.
  const double mean = std::accumulate(out.weights.begin(), out.weights.end(), 0.0) / n;
  for (double& w : out.weights) w = std::clamp(w / mean, wmin, wmax);
  return out;
}

double focal_loss(std::span<const double> probs, std::span<const int> labels,
                  double gamma) {
  check_labels(probs.size(), labels.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = clamp_prob(probs[i]);
    if (labels[i] == 1) {
      loss -= std::pow(1.0 - p, gamma) * std::log(p);
    } else {
      loss -= std::pow(p, gamma) * std::log(1.0 - p);
    }
  }
  return loss;
}

double center_loss(const FeatureMatrix& x, std::span<const int> labels,
                   const FeatureMatrix& centers) {
  return center_loss_grad(x, labels, centers).loss;
}

LogitLoss center_loss_grad(const FeatureMatrix& x, std::span<const int> labels,
                           const FeatureMatrix& centers) {
  check_labels(static_cast<std::size_t>(x.rows()), labels.size());
  if (centers.cols() != x.cols()) {
    throw Error(ErrorKind::kShapeMismatch, "center dimension mismatch");
  }
  LogitLoss out;
  out.grad.resize(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= centers.rows()) {
      throw Error(ErrorKind::kOutOfBounds, "center label out of range");
    }
    out.grad.row(i) = x.row(i) - centers.row(y);
    out.loss += 0.5 * out.grad.row(i).squaredNorm();
  }
  return out;
}

FeatureMatrix update_centers(const FeatureMatrix& centers, const FeatureMatrix& x,
                             std::span<const int> labels, double alpha) {
  check_labels(static_cast<std::size_t>(x.rows()), labels.size());
  FeatureMatrix diff = FeatureMatrix::Zero(centers.rows(), centers.cols());
  std::vector<int> counts(static_cast<std::size_t>(centers.rows()), 0);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= centers.rows()) {
      throw Error(ErrorKind::kOutOfBounds, "center label out of range");
    }
    diff.row(y) += centers.row(y) - x.row(i);
    ++counts[static_cast<std::size_t>(y)];
  }
  FeatureMatrix out = centers;
  for (Eigen::Index j = 0; j < centers.rows(); ++j) {
    const int c = counts[static_cast<std::size_t>(j)];
    if (c > 0) out.row(j) -= alpha * diff.row(j) / c;
  }
  return out;
}

double child_focal_loss(const FeatureMatrix& probs, std::span<const int> labels,
                        const ChildWeights& weights, double gamma) {
  check_labels(static_cast<std::size_t>(probs.rows()), labels.size());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const int j = labels[static_cast<std::size_t>(i)];
    if (j < 0 || j >= probs.cols()) {
      throw Error(ErrorKind::kOutOfBounds, "child label out of range");
    }
    const double w = weights.weights.at(static_cast<std::size_t>(j));
    if (w == 0.0) continue;
    const double p = clamp_prob(probs(i, j));
    loss -= w * std::pow(1.0 - p, gamma) * std::log(p);
  }
  return loss;
}

FeatureMatrix softmax_rows(const FeatureMatrix& logits) {
  FeatureMatrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    double z = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      out(i, j) = std::exp(logits(i, j) - m);
      z += out(i, j);
    }
    out.row(i) /= z;
  }
  return out;
}

LogitLoss focal_loss_logits(const FeatureMatrix& logits, std::span<const int> labels,
                            double gamma) {
  check_labels(static_cast<std::size_t>(logits.rows()), labels.size());
  const FeatureMatrix probs = softmax_rows(logits);
  LogitLoss out;
  out.grad = FeatureMatrix::Zero(logits.rows(), 2);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    // Both branches are the true-class focal term with p_true = p or 1 - p.
    const int y = labels[static_cast<std::size_t>(i)];
    const double pt = clamp_prob(probs(i, y));
    out.loss -= std::pow(1.0 - pt, gamma) * std::log(pt);
    const double dpt = focal_true_grad(pt, gamma);
    for (int k = 0; k < 2; ++k) {
      const double dpt_dz = pt * ((k == y ? 1.0 : 0.0) - probs(i, k));
      out.grad(i, k) = dpt * dpt_dz;
    }
  }
  return out;
}

LogitLoss child_focal_loss_logits(const FeatureMatrix& logits,
                                  std::span<const int> labels,
                                  const ChildWeights& weights, double gamma) {
  check_labels(static_cast<std::size_t>(logits.rows()), labels.size());
  const FeatureMatrix probs = softmax_rows(logits);
  LogitLoss out;
  out.grad = FeatureMatrix::Zero(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int j = labels[static_cast<std::size_t>(i)];
    if (j < 0 || j >= logits.cols()) {
      throw Error(ErrorKind::kOutOfBounds, "child label out of range");
    }
    const double w = weights.weights.at(static_cast<std::size_t>(j));
    const double pt = clamp_prob(probs(i, j));
    out.loss -= w * std::pow(1.0 - pt, gamma) * std::log(pt);
    const double dpt = w * focal_true_grad(pt, gamma);
    for (Eigen::Index k = 0; k < logits.cols(); ++k) {
      out.grad(i, k) = dpt * pt * ((k == j ? 1.0 : 0.0) - probs(i, k));
    }
  }
  return out;
}

EfdmixResult efdmix(std::span<const double> u, std::span<const double> v, double mu,
                    bool sorted_mode) {
  if (u.size() != v.size()) {
    throw Error(ErrorKind::kShapeMismatch, "efdmix operands differ in shape");
  }
  EfdmixResult out;
  out.v_source = pair_sources(u, v, sorted_mode);
  out.value = efdmix_forward(u, v, u, mu, sorted_mode);
  return out;
}

std::vector<double> efdmix_forward(std::span<const double> u,
                                   std::span<const double> v,
                                   std::span<const double> u_detached, double mu,
                                   bool sorted_mode) {
  if (u.size() != v.size() || u.size() != u_detached.size()) {
    throw Error(ErrorKind::kShapeMismatch, "efdmix operands differ in shape");
  }
  if (!(mu >= 0.0 && mu <= 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "mu must be in [0, 1]");
  }
  const auto src = pair_sources(u_detached, v, sorted_mode);
  std::vector<double> w(u.size());
  const double a = 1.0 - mu;
  for (std::size_t i = 0; i < u.size(); ++i) {
    w[i] = u[i] + a * v[src[i]] - a * u_detached[i];
  }
  return w;
}

EfdmixGrad efdmix_backward(std::span<const double> grad_w, const EfdmixResult& fwd,
                           double mu) {
  EfdmixGrad g;
  g.grad_u.assign(grad_w.begin(), grad_w.end());
  g.grad_v.assign(grad_w.size(), 0.0);
  for (std::size_t i = 0; i < grad_w.size(); ++i) {
    g.grad_v[fwd.v_source[i]] += (1.0 - mu) * grad_w[i];
  }
  return g;
}

CamResult cam(std::span<const float> maps, int channels, int height, int width,
              std::span<const float> class_weights, int patch_size) {
  if (static_cast<int>(class_weights.size()) != channels ||
      maps.size() != static_cast<std::size_t>(channels) * height * width) {
    throw Error(ErrorKind::kShapeMismatch, "CAM inputs disagree in shape");
  }
  CamResult r;
  r.heatmap = ScalarMap(height, width, 1, 0.0);
  auto heat = r.heatmap.data();
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int k = 0; k < channels; ++k) {
    const double wk = class_weights[static_cast<std::size_t>(k)];
    const float* m = maps.data() + k * plane;
    for (std::size_t i = 0; i < plane; ++i) heat[i] += wk * m[i];
  }
  const auto [lo, hi] = std::minmax_element(heat.begin(), heat.end());
  r.flat = !(*hi - *lo > 1e-12);
  if (r.flat) {
    r.map_x = width / 2;
    r.map_y = height / 2;
    r.patch_x = patch_size / 2.0;
    r.patch_y = patch_size / 2.0;
    return r;
  }
  const auto best = static_cast<int>(hi - heat.begin());
  r.map_y = best / width;
  r.map_x = best % width;
  const double sy = static_cast<double>(patch_size) / height;
  const double sx = static_cast<double>(patch_size) / width;
  r.patch_x = (r.map_x + 0.5) * sx;
  r.patch_y = (r.map_y + 0.5) * sy;
  return r;
}

}  // namespace mitdet
