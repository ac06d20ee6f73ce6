#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mitdet/dgsb.hpp"

namespace mitdet {

struct InCdpConfig {
  int child_per_parent = 4;   // T
  double gamma = 2.0;
  double lambda = 0.5;
  double center_rate = 0.5;   // alpha in the center update
  double mix_beta = 0.1;      // mu ~ Beta(mix_beta, mix_beta)
  double mix_probability = 0.5;
  bool mix_sorted = true;
  double weight_min = 0.25;
  double weight_max = 4.0;

  void validate() const;
};

/// Probability clamp used in every log term.
inline constexpr double kProbEps = 1e-7;

// ---------------------------------------------------------------------------
// Child classes

struct ChildLabeling {
  /// Negatives map to [0, T), positives to [T, 2T).
  std::vector<int> labels;
  /// 2T x d k-means centroids, rows indexed by child id.
  FeatureMatrix centroids;
};

/// k-means with k = T inside each parent class. Throws kTooFewSamples when a
/// parent class has fewer than T members.
ChildLabeling generate_child_labels(const FeatureMatrix& features,
                                    const std::vector<int>& parent_labels,
                                    int child_per_parent, std::uint64_t seed);

struct ChildWeights {
  std::vector<double> weights;
};

/// Inverse nearest-opposite-centroid distance, scaled to mean 1 inside the
/// clip range: w_j = clip(s * mean(d) / d_j, w_min, w_max) with s solved so
/// that mean(w) = 1.
ChildWeights child_weights(const FeatureMatrix& child_centroids,
                           int child_per_parent, double weight_min = 0.25,
                           double weight_max = 4.0);
/// Same rule from precomputed nearest-opposite distances d_j.
ChildWeights child_weights_from_distances(std::span<const double> distances,
                                          double weight_min = 0.25, double weight_max = 4.0);

// ---------------------------------------------------------------------------
// Losses. All sums run over samples, not means.

/// Binary focal loss over positive-class probabilities.
double focal_loss(std::span<const double> pos_probs, std::span<const int> labels,
                  double gamma);

/// 0.5 * sum ||x_i - c_{y_i}||^2.
double center_loss(const FeatureMatrix& features, std::span<const int> labels,
                   const FeatureMatrix& centers);

/// c_j <- c_j - alpha * mean_{i in j}(c_j - x_i) for classes in the batch.
FeatureMatrix update_centers(const FeatureMatrix& centers,
                             const FeatureMatrix& features,
                             std::span<const int> labels, double alpha);

/// Weighted focal loss over the true child class probabilities.
/// child_probs is n x 2T, rows are softmax outputs.
double child_focal_loss(const FeatureMatrix& child_probs,
                        std::span<const int> child_labels,
                        const ChildWeights& weights, double gamma);

inline double joint_loss(double focal_parent, double center_parent,
                         double focal_child, double center_child, double lambda) {
  return focal_parent + center_parent + lambda * (focal_child + center_child);
}

/// Loss value plus gradient with respect to the logits (n x classes).
struct LogitLoss {
  double loss = 0.0;
  FeatureMatrix grad;
};

/// Focal loss through a 2-way softmax; logits are n x 2, class 1 positive.
LogitLoss focal_loss_logits(const FeatureMatrix& logits, std::span<const int> labels,
                            double gamma);

/// Weighted child focal loss through a 2T-way softmax.
LogitLoss child_focal_loss_logits(const FeatureMatrix& logits,
                                  std::span<const int> child_labels,
                                  const ChildWeights& weights, double gamma);

/// Center loss and its gradient x_i - c_{y_i}.
LogitLoss center_loss_grad(const FeatureMatrix& features, std::span<const int> labels,
                           const FeatureMatrix& centers);

FeatureMatrix softmax_rows(const FeatureMatrix& logits);

// ---------------------------------------------------------------------------
// EFDMix: w_i = u_i + (1 - mu) v_i - (1 - mu) <u_i>, <.> = stop-gradient.

struct EfdmixResult {
  std::vector<double> value;
  /// Index of the v element that feeds w_i with coefficient (1 - mu).
  std::vector<std::size_t> v_source;
};

/// Mixes one channel. In sorted mode the i-th order statistic of u is paired
/// with the i-th order statistic of v and scattered back through u's order.
EfdmixResult efdmix(std::span<const double> u, std::span<const double> v, double mu,
                    bool sorted_mode);

/// Forward with the stop-gradient operand passed explicitly; u_detached is
/// treated as a constant and also fixes the sort order in sorted mode.
std::vector<double> efdmix_forward(std::span<const double> u,
                                   std::span<const double> v,
                                   std::span<const double> u_detached, double mu,
                                   bool sorted_mode);

struct EfdmixGrad {
  std::vector<double> grad_u;
  std::vector<double> grad_v;
};

/// Backward pass: dL/du = dL/dw, dL/dv[v_source[i]] += (1 - mu) dL/dw_i.
EfdmixGrad efdmix_backward(std::span<const double> grad_w, const EfdmixResult& fwd,
                           double mu);

// ---------------------------------------------------------------------------
// Class activation maps

struct CamResult {
  ScalarMap heatmap;  // h x w, unclamped
  int map_x = 0;
  int map_y = 0;
  double patch_x = 0.0;
  double patch_y = 0.0;
  bool flat = false;
};

/// heatmap = sum_k weights[k] * maps[k]; maps is K x h x w row-major. The
/// argmax is scaled to patch coordinates by patch_size / h (cell centers);
/// a flat heatmap falls back to the patch center.
CamResult cam(std::span<const float> maps, int channels, int height, int width,
              std::span<const float> class_weights, int patch_size);

}  // namespace mitdet
