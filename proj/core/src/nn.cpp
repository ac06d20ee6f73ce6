#include "mitdet/nn.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "mitdet/error.hpp"
#include "mitdet/incdp.hpp"

namespace mitdet::nn {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void he_init(Param& p, int fan_in, Rng& rng) {
  const double std = std::sqrt(2.0 / fan_in);
  for (float& v : p.value) v = static_cast<float>(rng.normal(0.0, std));
}

Param make_param(std::string name, std::size_t size, bool decay) {
  Param p;
  p.name = std::move(name);
  p.value.assign(size, 0.0f);
  p.grad.assign(size, 0.0f);
  p.decay = decay;
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int stride)
    : in_(in_channels), out_(out_channels), stride_(stride),
      weight_(make_param(name + ".weight",
                         static_cast<std::size_t>(out_channels) * in_channels * 9, true)),
      bias_(make_param(name + ".bias", static_cast<std::size_t>(out_channels), false)) {}

void Conv2d::init(Rng& rng) {
  he_init(weight_, in_ * 9, rng);
  std::fill(bias_.value.begin(), bias_.value.end(), 0.0f);
}

Tensor Conv2d::forward(const Tensor& x) {
  if (x.c != in_) throw Error(ErrorKind::kShapeMismatch, "conv input channels");
  batch_ = x.n;
  in_h_ = x.h;
  in_w_ = x.w;
  out_h_ = (x.h + 2 - 3) / stride_ + 1;
  out_w_ = (x.w + 2 - 3) / stride_ + 1;
  const int k = in_ * 9;
  const int p = out_h_ * out_w_;
  cols_.assign(static_cast<std::size_t>(batch_) * k * p, 0.0f);
  Tensor out(x.n, out_, out_h_, out_w_);
  const ConstMapMat w(weight_.value.data(), out_, k);
  const Eigen::Map<const Eigen::VectorXf> b(bias_.value.data(), out_);

  for (int s = 0; s < x.n; ++s) {
    float* cols = cols_.data() + static_cast<std::size_t>(s) * k * p;
    const float* in = x.sample(s);
    for (int c = 0; c < in_; ++c) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          float* row = cols + ((c * 3 + ky) * 3 + kx) * p;
          for (int oy = 0; oy < out_h_; ++oy) {
            const int iy = oy * stride_ + ky - 1;
            if (iy < 0 || iy >= in_h_) continue;
            const float* src = in + (c * in_h_ + iy) * in_w_;
            for (int ox = 0; ox < out_w_; ++ox) {
              const int ix = ox * stride_ + kx - 1;
              if (ix >= 0 && ix < in_w_) row[oy * out_w_ + ox] = src[ix];
            }
          }
        }
      }
    }
    MapMat o(out.sample(s), out_, p);
    o.noalias() = w * ConstMapMat(cols, k, p);
    o.colwise() += b;
  }
  return out;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  const int k = in_ * 9;
  const int p = out_h_ * out_w_;
  Tensor grad_in(batch_, in_, in_h_, in_w_);
  MapMat dw(weight_.grad.data(), out_, k);
  Eigen::Map<Eigen::VectorXf> db(bias_.grad.data(), out_);
  const ConstMapMat w(weight_.value.data(), out_, k);
  RowMat dcols(k, p);

  for (int s = 0; s < batch_; ++s) {
    const ConstMapMat g(grad_out.sample(s), out_, p);
    const ConstMapMat cols(cols_.data() + static_cast<std::size_t>(s) * k * p, k, p);
    dw.noalias() += g * cols.transpose();
    db += g.rowwise().sum();
    dcols.noalias() = w.transpose() * g;
    float* gi = grad_in.sample(s);
    for (int c = 0; c < in_; ++c) {
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const float* row = dcols.data() + ((c * 3 + ky) * 3 + kx) * p;
          for (int oy = 0; oy < out_h_; ++oy) {
            const int iy = oy * stride_ + ky - 1;
            if (iy < 0 || iy >= in_h_) continue;
            float* dst = gi + (c * in_h_ + iy) * in_w_;
            for (int ox = 0; ox < out_w_; ++ox) {
              const int ix = ox * stride_ + kx - 1;
              if (ix >= 0 && ix < in_w_) dst[ix] += row[oy * out_w_ + ox];
            }
          }
        }
      }
    }
  }
  return grad_in;
}

// ---------------------------------------------------------------------------

BatchNorm2d::BatchNorm2d(std::string name, int channels, double momentum, double eps)
    : channels_(channels), momentum_(momentum), eps_(eps),
      gamma_(make_param(name + ".gamma", static_cast<std::size_t>(channels), false)),
      beta_(make_param(name + ".beta", static_cast<std::size_t>(channels), false)),
      running_mean_(make_param(name + ".running_mean", static_cast<std::size_t>(channels), false)),
      running_var_(make_param(name + ".running_var", static_cast<std::size_t>(channels), false)) {
  running_mean_.trainable = false;
  running_var_.trainable = false;
  init();
}

void BatchNorm2d::init() {
  std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0f);
  std::fill(beta_.value.begin(), beta_.value.end(), 0.0f);
  std::fill(running_mean_.value.begin(), running_mean_.value.end(), 0.0f);
  std::fill(running_var_.value.begin(), running_var_.value.end(), 1.0f);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
  if (x.c != channels_) throw Error(ErrorKind::kShapeMismatch, "batchnorm channels");
  const std::size_t plane = x.plane();
  const double count = static_cast<double>(x.n) * static_cast<double>(plane);
  Tensor out(x.n, x.c, x.h, x.w);
  xhat_ = Tensor(x.n, x.c, x.h, x.w);
  inv_std_.assign(static_cast<std::size_t>(channels_), 0.0f);
  batch_stats_ = training;
  for (int c = 0; c < channels_; ++c) {
    double mean = running_mean_.value[c], var = running_var_.value[c];
    if (training) {
      double s = 0.0, s2 = 0.0;
      for (int n = 0; n < x.n; ++n) {
        const float* p = x.sample(n) + c * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      mean = s / count;
      for (int n = 0; n < x.n; ++n) {
        const float* p = x.sample(n) + c * plane;
        for (std::size_t i = 0; i < plane; ++i) s2 += (p[i] - mean) * (p[i] - mean);
      }
      var = s2 / count;
      const double unbiased = count > 1.0 ? s2 / (count - 1.0) : var;
      running_mean_.value[c] =
          static_cast<float>((1.0 - momentum_) * running_mean_.value[c] + momentum_ * mean);
      running_var_.value[c] =
          static_cast<float>((1.0 - momentum_) * running_var_.value[c] + momentum_ * unbiased);
    }
    const double inv = 1.0 / std::sqrt(var + eps_);
    inv_std_[c] = static_cast<float>(inv);
    const float g = gamma_.value[c], b = beta_.value[c];
    for (int n = 0; n < x.n; ++n) {
      const float* p = x.sample(n) + c * plane;
      float* xh = xhat_.sample(n) + c * plane;
      float* o = out.sample(n) + c * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = static_cast<float>((p[i] - mean) * inv);
        o[i] = g * xh[i] + b;
      }
    }
  }
  return out;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out) {
  const std::size_t plane = grad_out.plane();
  const double count = static_cast<double>(grad_out.n) * static_cast<double>(plane);
  Tensor g(grad_out.n, grad_out.c, grad_out.h, grad_out.w);
  auto& dgamma = gamma_.grad;
  auto& dbeta = beta_.grad;
  for (int c = 0; c < channels_; ++c) {
    double sg = 0.0, sgx = 0.0;
    for (int n = 0; n < grad_out.n; ++n) {
      const float* go = grad_out.sample(n) + c * plane;
      const float* xh = xhat_.sample(n) + c * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sg += go[i];
        sgx += go[i] * xh[i];
      }
    }
    dgamma[c] += static_cast<float>(sgx);
    dbeta[c] += static_cast<float>(sg);
    const double scale = gamma_.value[c] * inv_std_[c];
    for (int n = 0; n < grad_out.n; ++n) {
      const float* go = grad_out.sample(n) + c * plane;
      const float* xh = xhat_.sample(n) + c * plane;
      float* gi = g.sample(n) + c * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        gi[i] = batch_stats_
                    ? static_cast<float>(scale * (go[i] - sg / count - xh[i] * sgx / count))
                    : static_cast<float>(scale * go[i]);
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

Tensor Relu::forward(const Tensor& x) {
  Tensor out = x;
  mask_.resize(x.data.size());
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    mask_[i] = out.data[i] > 0.0f;
    if (!mask_[i]) out.data[i] = 0.0f;
  }
  return out;
}

Tensor Relu::backward(const Tensor& grad_out) const {
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    if (!mask_[i]) g.data[i] = 0.0f;
  }
  return g;
}

Tensor MaxPool2::forward(const Tensor& x) {
  in_n_ = x.n;
  in_c_ = x.c;
  in_h_ = x.h;
  in_w_ = x.w;
  const int oh = x.h / 2, ow = x.w / 2;
  Tensor out(x.n, x.c, oh, ow);
  argmax_.assign(out.data.size(), 0);
  std::size_t o = 0;
  for (int s = 0; s < x.n; ++s) {
    for (int c = 0; c < x.c; ++c) {
      const std::size_t base = (static_cast<std::size_t>(s) * x.c + c) * x.plane();
      for (int y = 0; y < oh; ++y) {
        for (int xx = 0; xx < ow; ++xx, ++o) {
          std::size_t best = base + static_cast<std::size_t>(2 * y) * x.w + 2 * xx;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t idx =
                  base + static_cast<std::size_t>(2 * y + dy) * x.w + 2 * xx + dx;
              if (x.data[idx] > x.data[best]) best = idx;
            }
          }
          out.data[o] = x.data[best];
          argmax_[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return out;
}

Tensor MaxPool2::backward(const Tensor& grad_out) const {
  Tensor g(in_n_, in_c_, in_h_, in_w_);
  for (std::size_t o = 0; o < grad_out.data.size(); ++o) {
    g.data[argmax_[o]] += grad_out.data[o];
  }
  return g;
}

// ---------------------------------------------------------------------------

Linear::Linear(std::string name, int in_features, int out_features)
    : in_(in_features), out_(out_features),
      weight_(make_param(name + ".weight",
                         static_cast<std::size_t>(in_features) * out_features, true)),
      bias_(make_param(name + ".bias", static_cast<std::size_t>(out_features), false)) {}

void Linear::init(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
  for (float& v : weight_.value) v = static_cast<float>(rng.uniform(-bound, bound));
  std::fill(bias_.value.begin(), bias_.value.end(), 0.0f);
}

std::vector<float> Linear::forward(const std::vector<float>& x, int n) {
  input_ = x;
  std::vector<float> out(static_cast<std::size_t>(n) * out_);
  const ConstMapMat in(x.data(), n, in_);
  const ConstMapMat w(weight_.value.data(), out_, in_);
  MapMat o(out.data(), n, out_);
  o.noalias() = in * w.transpose();
  const Eigen::Map<const Eigen::RowVectorXf> b(bias_.value.data(), out_);
  o.rowwise() += b;
  return out;
}

std::vector<float> Linear::backward(const std::vector<float>& grad_out, int n) {
  const ConstMapMat g(grad_out.data(), n, out_);
  const ConstMapMat in(input_.data(), n, in_);
  MapMat dw(weight_.grad.data(), out_, in_);
  dw.noalias() += g.transpose() * in;
  Eigen::Map<Eigen::RowVectorXf> db(bias_.grad.data(), out_);
  db += g.colwise().sum();
  std::vector<float> grad_in(static_cast<std::size_t>(n) * in_);
  MapMat gi(grad_in.data(), n, in_);
  const ConstMapMat w(weight_.value.data(), out_, in_);
  gi.noalias() = g * w;
  return grad_in;
}

std::vector<float> Linear::class_weights(int cls) const {
  const auto begin = weight_.value.begin() + static_cast<std::ptrdiff_t>(cls) * in_;
  return {begin, begin + in_};
}

// ---------------------------------------------------------------------------

TinyCnn::TinyCnn()
    : conv1_("conv1", 3, 16, 2), conv2_("conv2", 16, 32, 1), conv3_("conv3", 32, 64, 1),
      bn1_("bn1", 16), bn2_("bn2", 32), bn3_("bn3", 64) {}

void TinyCnn::init(Rng& rng) {
  conv1_.init(rng);
  conv2_.init(rng);
  conv3_.init(rng);
  bn1_.init();
  bn2_.init();
  bn3_.init();
}

std::vector<Param*> TinyCnn::params() {
  std::vector<Param*> out;
  for (auto* layer : {&conv1_, &conv2_, &conv3_}) {
    for (Param* p : layer->params()) out.push_back(p);
  }
  for (auto* layer : {&bn1_, &bn2_, &bn3_}) {
    for (Param* p : layer->params()) out.push_back(p);
  }
  return out;
}

std::unique_ptr<Backbone> TinyCnn::clone() const {
  return std::make_unique<TinyCnn>(*this);
}

Tensor TinyCnn::forward(const Tensor& x, const MixPlan* mix) {
  Tensor h = pool1_.forward(relu1_.forward(bn1_.forward(conv1_.forward(x), training_)));
  h = pool2_.forward(relu2_.forward(bn2_.forward(conv2_.forward(h), training_)));
  mixed_ = mix != nullptr;
  if (mixed_) h = mix_forward(h, *mix);
  return relu3_.forward(bn3_.forward(conv3_.forward(h), training_));
}

Tensor TinyCnn::backward(const Tensor& grad_maps) {
  Tensor g = conv3_.backward(bn3_.backward(relu3_.backward(grad_maps)));
  if (mixed_) g = mix_backward(g);
  g = conv2_.backward(bn2_.backward(relu2_.backward(pool2_.backward(g))));
  return conv1_.backward(bn1_.backward(relu1_.backward(pool1_.backward(g))));
}

Tensor TinyCnn::mix_forward(const Tensor& x, const MixPlan& mix) {
  if (static_cast<int>(mix.partner.size()) != x.n ||
      static_cast<int>(mix.mu.size()) != x.n) {
    throw Error(ErrorKind::kShapeMismatch, "mix plan does not match batch");
  }
  plan_ = mix;
  mix_c_ = x.c;
  mix_plane_ = x.plane();
  v_source_.assign(static_cast<std::size_t>(x.n) * x.c, {});
  Tensor out = x;
  std::vector<double> u(mix_plane_), v(mix_plane_);
  for (int s = 0; s < x.n; ++s) {
    const int partner = mix.partner[static_cast<std::size_t>(s)];
    for (int c = 0; c < x.c; ++c) {
      const float* pu = x.sample(s) + c * mix_plane_;
      const float* pv = x.sample(partner) + c * mix_plane_;
      std::copy(pu, pu + mix_plane_, u.begin());
      std::copy(pv, pv + mix_plane_, v.begin());
      EfdmixResult r = efdmix(u, v, mix.mu[static_cast<std::size_t>(s)], mix.sorted);
      float* po = out.sample(s) + c * mix_plane_;
      for (std::size_t i = 0; i < mix_plane_; ++i) po[i] = static_cast<float>(r.value[i]);
      v_source_[static_cast<std::size_t>(s) * x.c + c] = std::move(r.v_source);
    }
  }
  return out;
}

Tensor TinyCnn::mix_backward(const Tensor& grad) const {
  // The stop-gradient term passes dL/dw straight to u; v gets (1 - mu) dL/dw.
  Tensor g = grad;
  for (int s = 0; s < grad.n; ++s) {
    const int partner = plan_.partner[static_cast<std::size_t>(s)];
    const float a = static_cast<float>(1.0 - plan_.mu[static_cast<std::size_t>(s)]);
    for (int c = 0; c < mix_c_; ++c) {
      const auto& src = v_source_[static_cast<std::size_t>(s) * mix_c_ + c];
      const float* gw = grad.sample(s) + c * mix_plane_;
      float* gv = g.sample(partner) + c * mix_plane_;
      for (std::size_t i = 0; i < mix_plane_; ++i) gv[src[i]] += a * gw[i];
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

std::vector<float> global_average_pool(const Tensor& x) {
  std::vector<float> out(static_cast<std::size_t>(x.n) * x.c);
  const std::size_t plane = x.plane();
  for (int s = 0; s < x.n; ++s) {
    for (int c = 0; c < x.c; ++c) {
      const float* p = x.sample(s) + c * plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      out[static_cast<std::size_t>(s) * x.c + c] = static_cast<float>(acc / plane);
    }
  }
  return out;
}

Tensor global_average_pool_backward(const std::vector<float>& grad, const Tensor& like) {
  Tensor g(like.n, like.c, like.h, like.w);
  const std::size_t plane = like.plane();
  const float inv = 1.0f / static_cast<float>(plane);
  for (int s = 0; s < like.n; ++s) {
    for (int c = 0; c < like.c; ++c) {
      const float v = grad[static_cast<std::size_t>(s) * like.c + c] * inv;
      float* p = g.sample(s) + c * plane;
      std::fill(p, p + plane, v);
    }
  }
  return g;
}

void Sgd::step(const std::vector<Param*>& params) {
  if (momentum > 0.0 && velocity_.size() != params.size()) {
    velocity_.clear();
    for (const Param* p : params) velocity_.emplace_back(p->value.size(), 0.0f);
  }
  const auto lr = static_cast<float>(learning_rate);
  const auto wd = static_cast<float>(weight_decay);
  const auto mom = static_cast<float>(momentum);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param& p = *params[k];
    if (!p.trainable) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      float g = p.grad[i];
      if (p.decay) g += wd * p.value[i];
      if (momentum > 0.0) {
        velocity_[k][i] = mom * velocity_[k][i] + g;
        g = velocity_[k][i];
      }
      p.value[i] -= lr * g;
    }
  }
}

}  // namespace mitdet::nn
