#include "mitdet/dgsb.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "mitdet/error.hpp"
#include "mitdet/rng.hpp"

namespace mitdet {

namespace {

void l2_normalize(std::vector<double>& v, std::size_t begin, std::size_t end) {
  double n = 0.0;
  for (std::size_t i = begin; i < end; ++i) n += v[i] * v[i];
  n = std::sqrt(n);
  if (n <= 0.0) return;
  for (std::size_t i = begin; i < end; ++i) v[i] /= n;
}

double squared_distance(const FeatureMatrix& a, Eigen::Index i,
                        const FeatureMatrix& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

// Nearest centroid (lowest index wins ties) and its squared distance.
std::pair<int, double> nearest(const FeatureMatrix& x, Eigen::Index i,
                               const FeatureMatrix& c) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < c.rows(); ++j) {
    const double d = squared_distance(x, i, c, j);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(j);
    }
  }
  return {best, best_d};
}

FeatureMatrix kmeanspp_init(const FeatureMatrix& x, int k, Rng& rng) {
  const Eigen::Index n = x.rows();
  FeatureMatrix c(k, x.cols());
  c.row(0) = x.row(static_cast<Eigen::Index>(rng.index(n)));
  std::vector<double> d2(n);
  for (Eigen::Index i = 0; i < n; ++i) d2[i] = squared_distance(x, i, c, 0);
  for (int j = 1; j < k; ++j) {
    double total = 0.0;
    for (double d : d2) total += d;
    Eigen::Index pick = 0;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double acc = 0.0;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc > r && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.index(n));
    }
    c.row(j) = x.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(x, i, c, j));
    }
  }
  return c;
}

}  // namespace

std::vector<double> DefaultEmbedder::operator()(const Patch& patch) const {
  const RgbImage& img = patch.pixels;
  const int h = img.height(), w = img.width();
  if (h < kGrid || w < kGrid) {
    throw Error(ErrorKind::kInvalidArgument, "patch smaller than embedding grid");
  }
  const ScalarMap hema = hematoxylin_channel(img, stain_);
  std::vector<double> f(kDim, 0.0);
  std::vector<double> counts(kGrid * kGrid, 0.0);
  for (int y = 0; y < h; ++y) {
    const int gy = y * kGrid / h;
    for (int x = 0; x < w; ++x) {
      const int gx = x * kGrid / w;
      const int cell = gy * kGrid + gx;
      const double gray = (img(y, x, 0) + img(y, x, 1) + img(y, x, 2)) / (3.0 * 255.0);
      f[cell] += gray;
      f[kGrid * kGrid + cell] += hema(y, x);
      counts[cell] += 1.0;
      const double hv = std::clamp(hema(y, x), 0.0, kHistMax);
      const int bin = std::min(kBins - 1, static_cast<int>(hv / kHistMax * kBins));
      f[2 * kGrid * kGrid + bin] += 1.0;
    }
  }
  for (int cell = 0; cell < kGrid * kGrid; ++cell) {
    f[cell] /= counts[cell];
    f[kGrid * kGrid + cell] /= counts[cell];
  }
  l2_normalize(f, 0, kGrid * kGrid);
  l2_normalize(f, kGrid * kGrid, 2 * kGrid * kGrid);
  l2_normalize(f, 2 * kGrid * kGrid, kDim);
  return f;
}

FeatureMatrix embed(const std::vector<Patch>& patches, const Embedder& embedder) {
  if (patches.empty()) {
    throw Error(ErrorKind::kInvalidArgument, "embed requires at least one patch");
  }
  FeatureMatrix out;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const std::vector<double> row = embedder(patches[i]);
    if (i == 0) out.resize(static_cast<Eigen::Index>(patches.size()),
                           static_cast<Eigen::Index>(row.size()));
    if (static_cast<Eigen::Index>(row.size()) != out.cols()) {
      throw Error(ErrorKind::kShapeMismatch, "embedder output size changed");
    }
    for (std::size_t j = 0; j < row.size(); ++j) {
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
    }
  }
  return out;
}

std::vector<std::vector<std::size_t>> ClusterAssignment::members() const {
  std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(k()));
  for (std::size_t i = 0; i < labels.size(); ++i) out[labels[i]].push_back(i);
  return out;
}

ClusterAssignment kmeans(const FeatureMatrix& x, int k, std::uint64_t seed,
                         const KMeansOptions& opts) {
  const Eigen::Index n = x.rows();
  if (k < 1) throw Error(ErrorKind::kInvalidArgument, "k must be >= 1");
  if (n < k) {
    throw Error(ErrorKind::kTooFewSamples, "kmeans requires at least k samples");
  }
  Rng rng(seed);
  ClusterAssignment out;
  out.centroids = kmeanspp_init(x, k, rng);
  out.labels.assign(static_cast<std::size_t>(n), 0);
  std::vector<double> dist(static_cast<std::size_t>(n), 0.0);

  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    double inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto [label, d] = nearest(x, i, out.centroids);
      out.labels[i] = label;
      dist[i] = d;
      inertia += d;
    }
    out.inertia = inertia;
    out.inertia_history.push_back(inertia);
    out.iterations = iter + 1;

    FeatureMatrix next = FeatureMatrix::Zero(k, x.cols());
    std::vector<int> counts(k, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      next.row(out.labels[i]) += x.row(i);
      ++counts[out.labels[i]];
    }
    for (int j = 0; j < k; ++j) {
      if (counts[j] > 0) {
        next.row(j) /= counts[j];
        continue;
      }
      // Refill from the worst-fit point, then drop it from further refills.
      const auto far = static_cast<Eigen::Index>(
          std::max_element(dist.begin(), dist.end()) - dist.begin());
      next.row(j) = x.row(far);
      dist[far] = -1.0;
    }
    const double shift = (next - out.centroids).rowwise().norm().maxCoeff();
    out.centroids = std::move(next);
    if (shift < opts.tolerance) break;
  }

  // Final assignment against the final centroids.
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto [label, d] = nearest(x, i, out.centroids);
    out.labels[i] = label;
    inertia += d;
  }
  out.inertia = inertia;
  out.inertia_history.push_back(inertia);
  return out;
}

std::vector<std::size_t> sample_balanced(const ClusterAssignment& assign, int m,
                                         std::uint64_t seed) {
  if (m < 1) throw Error(ErrorKind::kInvalidArgument, "m must be >= 1");
  Rng rng(seed);
  std::vector<std::size_t> out;
  for (auto& members : assign.members()) {
    const std::size_t take = std::min<std::size_t>(m, members.size());
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + rng.index(members.size() - i);
      std::swap(members[i], members[j]);
      out.push_back(members[i]);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> difficulty_filter(const std::vector<double>& pos_probs,
                                           double epsilon) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < pos_probs.size(); ++i) {
    if (pos_probs[i] >= epsilon) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> top_up_hardest(const std::vector<double>& pos_probs,
                                        const std::vector<int>& clusters,
                                        std::vector<std::size_t> retained, std::size_t quota) {
  if (pos_probs.size() != clusters.size()) {
    throw Error(ErrorKind::kShapeMismatch, "probabilities and clusters differ in length");
  }
  std::vector<bool> kept(pos_probs.size(), false);
  for (std::size_t i : retained) {
    if (i >= kept.size()) throw Error(ErrorKind::kOutOfBounds, "retained index out of range");
    kept[i] = true;
  }
  // Per cluster, unretained candidates from hardest to easiest.
  std::map<int, std::vector<std::size_t>> queues;
  for (std::size_t i = 0; i < pos_probs.size(); ++i) {
    if (!kept[i]) queues[clusters[i]].push_back(i);
  }
  for (auto& [c, q] : queues) {
    std::stable_sort(q.begin(), q.end(), [&](std::size_t a, std::size_t b) {
      return pos_probs[a] > pos_probs[b];
    });
  }
  std::vector<std::size_t> heads(queues.size(), 0);
  bool progress = true;
  while (retained.size() < quota && progress) {
    progress = false;
    std::size_t qi = 0;
    for (auto& [c, q] : queues) {
      if (retained.size() >= quota) break;
      if (heads[qi] < q.size()) {
        retained.push_back(q[heads[qi]++]);
        progress = true;
      }
      ++qi;
    }
  }
  std::sort(retained.begin(), retained.end());
  return retained;
}

void DgsbConfig::validate() const {
  if (k < 1) throw Error(ErrorKind::kInvalidArgument, "dgsb.k must be >= 1");
  if (m < 0) throw Error(ErrorKind::kInvalidArgument, "dgsb.m must be >= 0");
  if (!(pool_factor > 0.0)) throw Error(ErrorKind::kInvalidArgument, "dgsb.pool_factor must be > 0");
  if (!(epsilon > 0.0 && epsilon < 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "dgsb.epsilon must be in (0, 1)");
  }
}

int DgsbConfig::samples_per_cluster(std::size_t positives) const {
  if (m > 0) return m;
  return std::max(1, static_cast<int>(std::ceil(pool_factor * static_cast<double>(positives) /
                                                 static_cast<double>(k) - 1e-9)));
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::kShapeMismatch, "label vectors differ in length");
  }
  const double n = static_cast<double>(a.size());
  if (a.size() < 2) return 1.0;
  std::map<std::pair<int, int>, double> table;
  std::map<int, double> rows, cols;
  for (std::size_t i = 0; i < a.size(); ++i) {
    table[{a[i], b[i]}] += 1.0;
    rows[a[i]] += 1.0;
    cols[b[i]] += 1.0;
  }
  auto c2 = [](double v) { return v * (v - 1.0) / 2.0; };
  double index = 0.0, sum_r = 0.0, sum_c = 0.0;
  for (const auto& [_, v] : table) index += c2(v);
  for (const auto& [_, v] : rows) sum_r += c2(v);
  for (const auto& [_, v] : cols) sum_c += c2(v);
  const double expected = sum_r * sum_c / c2(n);
  const double max_index = 0.5 * (sum_r + sum_c);
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

}  // namespace mitdet
