#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mitdet/rng.hpp"

namespace mitdet::nn {

/// NCHW float tensor.
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<float> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, float fill = 0.0f)
      : n(n_), c(c_), h(h_), w(w_),
        data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t sample_size() const { return static_cast<std::size_t>(c) * h * w; }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  float* sample(int i) { return data.data() + i * sample_size(); }
  const float* sample(int i) const { return data.data() + i * sample_size(); }
};

struct Param {
  std::string name;
  std::vector<float> value;
  std::vector<float> grad;
  bool decay = true;
  /// Buffers (running statistics) are serialized but never stepped.
  bool trainable = true;

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }
};

/// 3x3 convolution, padding 1.
class Conv2d {
 public:
  Conv2d(std::string name, int in_channels, int out_channels, int stride);

  void init(Rng& rng);
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);
  std::vector<Param*> params() { return {&weight_, &bias_}; }

 private:
  int in_, out_, stride_;
  Param weight_;  // out x (in * 9)
  Param bias_;
  int in_h_ = 0, in_w_ = 0, out_h_ = 0, out_w_ = 0, batch_ = 0;
  std::vector<float> cols_;  // per-sample im2col buffers, concatenated
};

class Relu {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out) const;

 private:
  std::vector<std::uint8_t> mask_;
};

/// Per-channel batch normalization. Training mode normalizes with batch
/// statistics and updates the running averages used in inference mode.
class BatchNorm2d {
 public:
  BatchNorm2d(std::string name, int channels, double momentum = 0.1, double eps = 1e-5);

  void init();
  Tensor forward(const Tensor& x, bool training);
  Tensor backward(const Tensor& grad_out);
  std::vector<Param*> params() { return {&gamma_, &beta_, &running_mean_, &running_var_}; }

 private:
  int channels_;
  double momentum_, eps_;
  Param gamma_, beta_, running_mean_, running_var_;
  Tensor xhat_;
  std::vector<float> inv_std_;
  bool batch_stats_ = false;
};

/// 2x2 max pooling, stride 2.
class MaxPool2 {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out) const;

 private:
  std::vector<std::uint32_t> argmax_;
  int in_n_ = 0, in_c_ = 0, in_h_ = 0, in_w_ = 0;
};

/// Fully connected layer over row vectors (n x in -> n x out).
class Linear {
 public:
  Linear(std::string name, int in_features, int out_features);

  void init(Rng& rng);
  std::vector<float> forward(const std::vector<float>& x, int n);
  std::vector<float> backward(const std::vector<float>& grad_out, int n);
  std::vector<Param*> params() { return {&weight_, &bias_}; }

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  /// Row `cls` of the weight matrix.
  std::vector<float> class_weights(int cls) const;

 private:
  int in_, out_;
  Param weight_;  // out x in
  Param bias_;
  std::vector<float> input_;
};

/// Per-sample EFDMix instruction for one batch.
struct MixPlan {
  std::vector<int> partner;
  std::vector<double> mu;
  bool sorted = true;
};

/// Feature extractor producing K x h x w maps for a global-average-pooling
/// head. Implementations cache activations between forward and backward.
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual void init(Rng& rng) = 0;
  virtual Tensor forward(const Tensor& x, const MixPlan* mix) = 0;
  virtual Tensor backward(const Tensor& grad_maps) = 0;
  virtual std::vector<Param*> params() = 0;
  virtual int out_channels() const = 0;
  virtual std::string name() const = 0;
  virtual std::unique_ptr<Backbone> clone() const = 0;
  /// Selects batch statistics (training) or running statistics (inference).
  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }

 protected:
  bool training_ = false;
};

/// Three conv-BN-ReLU blocks: 3->16 (stride 2) + pool, 16->32 + pool, 32->64.
/// EFDMix, when planned, runs after the second block.
class TinyCnn final : public Backbone {
 public:
  TinyCnn();

  void init(Rng& rng) override;
  Tensor forward(const Tensor& x, const MixPlan* mix) override;
  Tensor backward(const Tensor& grad_maps) override;
  std::vector<Param*> params() override;
  int out_channels() const override { return 64; }
  std::string name() const override { return "tiny_cnn"; }
  std::unique_ptr<Backbone> clone() const override;

 private:
  Tensor mix_forward(const Tensor& x, const MixPlan& mix);
  Tensor mix_backward(const Tensor& grad) const;

  Conv2d conv1_, conv2_, conv3_;
  BatchNorm2d bn1_, bn2_, bn3_;
  Relu relu1_, relu2_, relu3_;
  MaxPool2 pool1_, pool2_;
  // Cached mixing state for backward.
  bool mixed_ = false;
  MixPlan plan_;
  std::vector<std::vector<std::size_t>> v_source_;  // per (sample, channel)
  int mix_c_ = 0;
  std::size_t mix_plane_ = 0;
};

/// Mean over spatial positions: n x c x h x w -> n x c.
std::vector<float> global_average_pool(const Tensor& x);
Tensor global_average_pool_backward(const std::vector<float>& grad, const Tensor& like);

/// Plain SGD with L2 weight decay on parameters flagged for decay.
struct Sgd {
  double learning_rate = 1e-3;
  double momentum = 0.0;
  double weight_decay = 5e-4;

  void step(const std::vector<Param*>& params);

 private:
  std::vector<std::vector<float>> velocity_;
};

}  // namespace mitdet::nn
