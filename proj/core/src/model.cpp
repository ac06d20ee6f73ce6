#include "mitdet/model.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "mitdet/error.hpp"
#include "mitdet/stain.hpp"

namespace mitdet {

namespace {

constexpr char kMagic[8] = {'M', 'I', 'T', 'D', 'E', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_raw(std::ostream& os, const T* data, std::size_t count) {
  os.write(reinterpret_cast<const char*>(data),
           static_cast<std::streamsize>(count * sizeof(T)));
}

template <typename T>
void read_raw(std::istream& is, T* data, std::size_t count) {
  is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
  if (!is) throw Error(ErrorKind::kIo, "truncated checkpoint");
}

std::unique_ptr<nn::Backbone> make_backbone(const std::string& name) {
  if (name == "tiny_cnn") return std::make_unique<nn::TinyCnn>();
  throw Error(ErrorKind::kInvalidArgument, "unknown backbone: " + name);
}

FeatureMatrix to_features(const std::vector<float>& v, int n, int d) {
  FeatureMatrix m(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) m(i, j) = v[static_cast<std::size_t>(i) * d + j];
  }
  return m;
}

std::vector<float> to_floats(const FeatureMatrix& m) {
  std::vector<float> v(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      v[static_cast<std::size_t>(i * m.cols() + j)] = static_cast<float>(m(i, j));
    }
  }
  return v;
}

// Runs a block in inference mode and restores the previous mode.
class InferenceScope {
 public:
  explicit InferenceScope(nn::Backbone& b) : backbone_(b), was_(b.training()) {
    b.set_training(false);
  }
  ~InferenceScope() { backbone_.set_training(was_); }
  InferenceScope(const InferenceScope&) = delete;
  InferenceScope& operator=(const InferenceScope&) = delete;

 private:
  nn::Backbone& backbone_;
  bool was_;
};

}  // namespace

void patch_to_input(const RgbImage& patch, nn::Tensor& batch, int index) {
  static const std::array<float, 256> table = [] {
    std::array<float, 256> t{};
    for (int i = 0; i < 256; ++i) {
      t[i] = static_cast<float>(intensity_to_od(static_cast<std::uint8_t>(i)));
    }
    return t;
  }();
  float* dst = batch.sample(index);
  const std::size_t plane = batch.plane();
  for (int y = 0; y < patch.height(); ++y) {
    for (int x = 0; x < patch.width(); ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * patch.width() + x;
      for (int c = 0; c < 3; ++c) dst[c * plane + p] = table[patch(y, x, c)];
    }
  }
}

nn::Tensor patches_to_tensor(const std::vector<const RgbImage*>& patches) {
  if (patches.empty()) return {};
  const int s = patches.front()->height();
  nn::Tensor t(static_cast<int>(patches.size()), 3, s, patches.front()->width());
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (patches[i]->height() != t.h || patches[i]->width() != t.w) {
      throw Error(ErrorKind::kShapeMismatch, "patches differ in size");
    }
    patch_to_input(*patches[i], t, static_cast<int>(i));
  }
  return t;
}

MitosisClassifier::MitosisClassifier()
    : MitosisClassifier(std::make_unique<nn::TinyCnn>()) {}

MitosisClassifier::MitosisClassifier(std::unique_ptr<nn::Backbone> backbone)
    : backbone_(std::move(backbone)) {
  parent_head_ = std::make_unique<nn::Linear>("parent_head", backbone_->out_channels(), 2);
  parent_centers = FeatureMatrix::Zero(2, backbone_->out_channels());
}

MitosisClassifier::MitosisClassifier(const MitosisClassifier& other)
    : parent_centers(other.parent_centers), child_centers(other.child_centers),
      weights(other.weights), config_snapshot(other.config_snapshot), seed(other.seed),
      backbone_(other.backbone_->clone()),
      parent_head_(std::make_unique<nn::Linear>(*other.parent_head_)),
      child_head_(other.child_head_ ? std::make_unique<nn::Linear>(*other.child_head_)
                                    : nullptr),
      child_per_parent_(other.child_per_parent_) {}

MitosisClassifier& MitosisClassifier::operator=(const MitosisClassifier& other) {
  if (this != &other) *this = MitosisClassifier(other);
  return *this;
}

void MitosisClassifier::init(std::uint64_t s) {
  seed = s;
  Rng rng(mix_seed(s, 101));
  backbone_->init(rng);
  parent_head_->init(rng);
  parent_centers = FeatureMatrix::Zero(2, feature_dim());
}

void MitosisClassifier::enable_child_head(int t, std::uint64_t s) {
  if (t < 1) throw Error(ErrorKind::kInvalidArgument, "T must be >= 1");
  child_per_parent_ = t;
  child_head_ = std::make_unique<nn::Linear>("child_head", feature_dim(), 2 * t);
  Rng rng(mix_seed(s, 102));
  child_head_->init(rng);
  child_centers = FeatureMatrix::Zero(2 * t, feature_dim());
  weights.weights.assign(static_cast<std::size_t>(2 * t), 1.0);
}

ModelOutput MitosisClassifier::forward(const nn::Tensor& input, const nn::MixPlan* mix) {
  ModelOutput out;
  out.maps = backbone_->forward(input, mix);
  const int n = input.n, d = feature_dim();
  const std::vector<float> pooled = nn::global_average_pool(out.maps);
  out.features = to_features(pooled, n, d);
  out.parent_logits = to_features(parent_head_->forward(pooled, n), n, 2);
  if (child_head_) {
    out.child_logits =
        to_features(child_head_->forward(pooled, n), n, child_head_->out_features());
  }
  return out;
}

void MitosisClassifier::backward(const ModelOutput& out, const FeatureMatrix& grad_features,
                                 const FeatureMatrix& grad_parent_logits,
                                 const FeatureMatrix& grad_child_logits) {
  const int n = out.maps.n;
  std::vector<float> g = to_floats(grad_features);
  const std::vector<float> gp = parent_head_->backward(to_floats(grad_parent_logits), n);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += gp[i];
  if (child_head_ && grad_child_logits.size() > 0) {
    const std::vector<float> gc = child_head_->backward(to_floats(grad_child_logits), n);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += gc[i];
  }
  backbone_->backward(nn::global_average_pool_backward(g, out.maps));
}

std::vector<nn::Param*> MitosisClassifier::params() {
  std::vector<nn::Param*> out = backbone_->params();
  for (nn::Param* p : parent_head_->params()) out.push_back(p);
  if (child_head_) {
    for (nn::Param* p : child_head_->params()) out.push_back(p);
  }
  return out;
}

void MitosisClassifier::zero_grad() {
  for (nn::Param* p : params()) p->zero_grad();
}

std::vector<double> MitosisClassifier::predict_proba(const std::vector<RgbImage>& patches,
                                                     int batch_size) {
  InferenceScope scope(*backbone_);
  std::vector<double> out;
  out.reserve(patches.size());
  for (std::size_t b = 0; b < patches.size(); b += static_cast<std::size_t>(batch_size)) {
    std::vector<const RgbImage*> chunk;
    for (std::size_t i = b; i < std::min(patches.size(), b + batch_size); ++i) {
      chunk.push_back(&patches[i]);
    }
    const ModelOutput o = forward(patches_to_tensor(chunk));
    const FeatureMatrix p = softmax_rows(o.parent_logits);
    for (Eigen::Index i = 0; i < p.rows(); ++i) out.push_back(p(i, 1));
  }
  return out;
}

FeatureMatrix MitosisClassifier::extract_features(const std::vector<RgbImage>& patches,
                                                  int batch_size) {
  InferenceScope scope(*backbone_);
  FeatureMatrix out(static_cast<Eigen::Index>(patches.size()), feature_dim());
  for (std::size_t b = 0; b < patches.size(); b += static_cast<std::size_t>(batch_size)) {
    std::vector<const RgbImage*> chunk;
    for (std::size_t i = b; i < std::min(patches.size(), b + batch_size); ++i) {
      chunk.push_back(&patches[i]);
    }
    const ModelOutput o = forward(patches_to_tensor(chunk));
    out.middleRows(static_cast<Eigen::Index>(b), o.features.rows()) = o.features;
  }
  return out;
}

std::vector<MitosisClassifier::Prediction> MitosisClassifier::predict_with_cam(
    const std::vector<RgbImage>& patches, int batch_size) {
  InferenceScope scope(*backbone_);
  std::vector<Prediction> out;
  out.reserve(patches.size());
  const std::vector<float> w = parent_head_->class_weights(1);
  for (std::size_t b = 0; b < patches.size(); b += static_cast<std::size_t>(batch_size)) {
    std::vector<const RgbImage*> chunk;
    for (std::size_t i = b; i < std::min(patches.size(), b + batch_size); ++i) {
      chunk.push_back(&patches[i]);
    }
    const ModelOutput o = forward(patches_to_tensor(chunk));
    const FeatureMatrix p = softmax_rows(o.parent_logits);
    const auto& m = o.maps;
    for (int i = 0; i < m.n; ++i) {
      Prediction pred;
      pred.probability = p(i, 1);
      pred.cam = cam(std::span<const float>(m.sample(i), m.sample_size()), m.c, m.h, m.w,
                     w, chunk[static_cast<std::size_t>(i)]->height());
      out.push_back(std::move(pred));
    }
  }
  return out;
}

void MitosisClassifier::save(const std::string& path) const {
  auto* self = const_cast<MitosisClassifier*>(this);
  nlohmann::json header;
  header["backbone"] = backbone_->name();
  header["child_per_parent"] = child_per_parent_;
  header["seed"] = seed;
  header["config"] = config_snapshot;
  header["feature_dim"] = feature_dim();
  nlohmann::json names = nlohmann::json::array();
  for (const nn::Param* p : self->params()) {
    names.push_back({{"name", p->name}, {"size", p->value.size()}});
  }
  header["params"] = names;
  header["weights"] = weights.weights.size();
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::kIo, "cannot write checkpoint: " + path);
  os.write(kMagic, sizeof(kMagic));
  write_raw(os, &kVersion, 1);
  const auto len = static_cast<std::uint64_t>(text.size());
  write_raw(os, &len, 1);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const nn::Param* p : self->params()) write_raw(os, p->value.data(), p->value.size());
  write_raw(os, parent_centers.data(), static_cast<std::size_t>(parent_centers.size()));
  write_raw(os, child_centers.data(), static_cast<std::size_t>(child_centers.size()));
  write_raw(os, weights.weights.data(), weights.weights.size());
  if (!os) throw Error(ErrorKind::kIo, "failed writing checkpoint: " + path);
}

MitosisClassifier MitosisClassifier::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::kMissingFile, "cannot open checkpoint: " + path);
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorKind::kIo, "not a checkpoint: " + path);
  }
  std::uint32_t version = 0;
  read_raw(is, &version, 1);
  if (version != kVersion) throw Error(ErrorKind::kIo, "unsupported checkpoint version");
  std::uint64_t len = 0;
  read_raw(is, &len, 1);
  std::string text(len, '\0');
  read_raw(is, text.data(), len);
  const auto header = nlohmann::json::parse(text);

  MitosisClassifier model(make_backbone(header.at("backbone").get<std::string>()));
  model.seed = header.at("seed").get<std::uint64_t>();
  model.config_snapshot = header.at("config").get<std::string>();
  const int t = header.at("child_per_parent").get<int>();
  if (t > 0) model.enable_child_head(t, 0);
  const auto params = model.params();
  const auto& names = header.at("params");
  if (names.size() != params.size()) throw Error(ErrorKind::kIo, "parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (names[i].at("size").get<std::size_t>() != params[i]->value.size()) {
      throw Error(ErrorKind::kIo, "parameter size mismatch: " + params[i]->name);
    }
    read_raw(is, params[i]->value.data(), params[i]->value.size());
  }
  read_raw(is, model.parent_centers.data(),
           static_cast<std::size_t>(model.parent_centers.size()));
  read_raw(is, model.child_centers.data(), static_cast<std::size_t>(model.child_centers.size()));
  model.weights.weights.assign(header.at("weights").get<std::size_t>(), 0.0);
  read_raw(is, model.weights.weights.data(), model.weights.weights.size());
  return model;
}

}  // namespace mitdet
