#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mitdet/incdp.hpp"
#include "mitdet/localize.hpp"
#include "mitdet/nn.hpp"

namespace mitdet {

struct ModelOutput {
  nn::Tensor maps;            // backbone output, n x K x h x w
  FeatureMatrix features;     // GAP features, n x K
  FeatureMatrix parent_logits;
  FeatureMatrix child_logits; // empty without a child head
};

/// Backbone -> global average pooling -> parent head (2 logits) and an
/// optional child head (2T logits). Also owns the class centers and child
/// weights used by the losses, so a checkpoint is self-contained.
class MitosisClassifier {
 public:
  MitosisClassifier();
  explicit MitosisClassifier(std::unique_ptr<nn::Backbone> backbone);
  MitosisClassifier(const MitosisClassifier& other);
  MitosisClassifier& operator=(const MitosisClassifier& other);
  MitosisClassifier(MitosisClassifier&&) noexcept = default;
  MitosisClassifier& operator=(MitosisClassifier&&) noexcept = default;

  void init(std::uint64_t seed);
  /// Adds a 2T-way child head initialized from seed.
  void enable_child_head(int child_per_parent, std::uint64_t seed);
  bool has_child_head() const { return child_head_ != nullptr; }
  int child_per_parent() const { return child_per_parent_; }
  int feature_dim() const { return backbone_->out_channels(); }

  /// Training mode uses batch statistics in normalization layers; the
  /// predict/extract helpers always run in inference mode.
  void set_training(bool on) { backbone_->set_training(on); }
  ModelOutput forward(const nn::Tensor& input, const nn::MixPlan* mix = nullptr);
  /// Backpropagates gradients w.r.t. features and both logit sets into
  /// parameter gradients. Call after forward on the same batch.
  void backward(const ModelOutput& out, const FeatureMatrix& grad_features,
                const FeatureMatrix& grad_parent_logits,
                const FeatureMatrix& grad_child_logits);

  std::vector<nn::Param*> params();
  void zero_grad();

  /// Positive-class probability per patch, batched.
  std::vector<double> predict_proba(const std::vector<RgbImage>& patches,
                                    int batch_size = 64);
  /// GAP features per patch.
  FeatureMatrix extract_features(const std::vector<RgbImage>& patches,
                                 int batch_size = 64);

  struct Prediction {
    double probability = 0.0;
    CamResult cam;
  };
  std::vector<Prediction> predict_with_cam(const std::vector<RgbImage>& patches,
                                           int batch_size = 64);

  FeatureMatrix parent_centers;
  FeatureMatrix child_centers;
  ChildWeights weights;
  std::string config_snapshot;
  std::uint64_t seed = 0;

  void save(const std::string& path) const;
  static MitosisClassifier load(const std::string& path);

 private:
  std::unique_ptr<nn::Backbone> backbone_;
  std::unique_ptr<nn::Linear> parent_head_;
  std::unique_ptr<nn::Linear> child_head_;
  int child_per_parent_ = 0;
};

/// Patch intensities to an optical-density input tensor (1 x 3 x S x S).
void patch_to_input(const RgbImage& patch, nn::Tensor& batch, int index);
nn::Tensor patches_to_tensor(const std::vector<const RgbImage*>& patches);

}  // namespace mitdet
