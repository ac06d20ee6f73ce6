#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Core>

#include "mitdet/localize.hpp"
#include "mitdet/stain.hpp"

namespace mitdet {

using FeatureMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Embedder = std::function<std::vector<double>(const Patch&)>;

/// Training-free patch descriptor: 8x8 pooled grayscale, 8x8 pooled
/// hematoxylin concentration and a 32-bin hematoxylin histogram, each block
/// L2-normalized (d = 160).
class DefaultEmbedder {
 public:
  static constexpr int kGrid = 8;
  static constexpr int kBins = 32;
  static constexpr int kDim = 2 * kGrid * kGrid + kBins;
  static constexpr double kHistMax = 1.6;

  explicit DefaultEmbedder(StainMatrix stain = StainMatrix::default_he())
      : stain_(std::move(stain)) {}

  std::vector<double> operator()(const Patch& patch) const;

 private:
  StainMatrix stain_;
};

/// Row i is embedder(patches[i]). Throws on an empty list or ragged output.
FeatureMatrix embed(const std::vector<Patch>& patches, const Embedder& embedder);

struct ClusterAssignment {
  std::vector<int> labels;
  FeatureMatrix centroids;
  double inertia = 0.0;
  int iterations = 0;
  /// Inertia after each assignment step.
  std::vector<double> inertia_history;

  int k() const { return static_cast<int>(centroids.rows()); }
  std::vector<std::vector<std::size_t>> members() const;
};

struct KMeansOptions {
  int max_iterations = 300;
  double tolerance = 1e-6;
};

/// Lloyd iterations from k-means++ seeding. Empty clusters are refilled with
/// the point farthest from its centroid.
ClusterAssignment kmeans(const FeatureMatrix& features, int k, std::uint64_t seed,
                         const KMeansOptions& opts = {});

/// Per cluster, min(m, size) indices drawn without replacement; sorted.
std::vector<std::size_t> sample_balanced(const ClusterAssignment& assign, int m,
                                         std::uint64_t seed);

/// Indices i with pos_probs[i] >= epsilon (confident negatives are dropped).
std::vector<std::size_t> difficulty_filter(const std::vector<double>& pos_probs,
                                           double epsilon);

/// Adds the hardest (highest-probability) unretained candidates to `retained`,
/// one per cluster in turn, until `quota` indices are kept or candidates run
/// out. Retained indices are never dropped. Output sorted.
std::vector<std::size_t> top_up_hardest(const std::vector<double>& pos_probs,
                                        const std::vector<int>& clusters,
                                        std::vector<std::size_t> retained, std::size_t quota);

struct DgsbConfig {
  int k = 10;
  int m = 0;  // 0 selects ceil(pool_factor * |positives| / k)
  double pool_factor = 2.0;
  double epsilon = 0.5;
  /// Refill the difficulty-filtered negatives up to |positives|.
  bool top_up = true;
  std::uint64_t seed = 0;

  void validate() const;
  int samples_per_cluster(std::size_t positives) const;
};

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

}  // namespace mitdet
