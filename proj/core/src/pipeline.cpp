#include "mitdet/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>

#include "mitdet/error.hpp"
#include "mitdet/rng.hpp"

namespace mitdet {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Matching and metrics

MatchReport& MatchReport::operator+=(const MatchReport& other) {
  tp += other.tp;
  fp += other.fp;
  fn += other.fn;
  matches.insert(matches.end(), other.matches.begin(), other.matches.end());
  return *this;
}

MatchReport match_detections(const std::vector<Detection>& pred,
                             const std::vector<Point>& gt, double radius) {
  if (!(radius > 0.0)) throw Error(ErrorKind::kInvalidArgument, "radius must be > 0");
  std::vector<Match> pairs;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    for (std::size_t j = 0; j < gt.size(); ++j) {
      const double d = std::hypot(pred[i].x - gt[j].x, pred[i].y - gt[j].y);
      if (d <= radius) pairs.push_back({i, j, d});
    }
  }
  std::sort(pairs.begin(), pairs.end(), [](const Match& a, const Match& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    if (a.pred != b.pred) return a.pred < b.pred;
    return a.gt < b.gt;
  });
  std::vector<bool> pred_used(pred.size(), false), gt_used(gt.size(), false);
  MatchReport r;
  for (const Match& m : pairs) {
    if (pred_used[m.pred] || gt_used[m.gt]) continue;
    pred_used[m.pred] = gt_used[m.gt] = true;
    r.matches.push_back(m);
  }
  r.tp = r.matches.size();
  r.fp = pred.size() - r.tp;
  r.fn = gt.size() - r.tp;
  return r;
}

double f1_score(double precision, double recall) {
  const double s = precision + recall;
  return s > 0.0 ? 2.0 * precision * recall / s : 0.0;
}

Metrics prf1(const MatchReport& report) {
  Metrics m;
  const double tp = static_cast<double>(report.tp);
  const double pd = tp + static_cast<double>(report.fp);
  const double rd = tp + static_cast<double>(report.fn);
  m.precision = pd > 0.0 ? tp / pd : 0.0;
  m.recall = rd > 0.0 ? tp / rd : 0.0;
  m.f1 = f1_score(m.precision, m.recall);
  return m;
}

// ---------------------------------------------------------------------------
// Data

std::vector<const LabeledImage*> Dataset::split(const std::string& name) const {
  std::vector<const LabeledImage*> out;
  for (const auto& img : images) {
    const ImageEntry* e = annotations.find_image(img.id);
    if (name.empty() || (e != nullptr && e->split == name)) out.push_back(&img);
  }
  return out;
}

Dataset Dataset::from_synthetic(SyntheticDataset ds) {
  Dataset out;
  out.annotations = std::move(ds.annotations);
  for (auto& img : ds.images) out.images.push_back({img.id, std::move(img.image)});
  return out;
}

Dataset Dataset::load(const std::string& dir) {
  Dataset out;
  out.annotations = load_annotations((fs::path(dir) / "annotations.json").string());
  for (const auto& e : out.annotations.images) {
    const std::string file = e.file.empty() ? "images/" + e.id + ".png" : e.file;
    RgbImage img = read_png((fs::path(dir) / file).string());
    if (img.width() != e.width || img.height() != e.height) {
      throw Error(ErrorKind::kShapeMismatch, "image size disagrees with annotations: " + e.id);
    }
    out.images.push_back({e.id, std::move(img)});
  }
  return out;
}

std::vector<TrainingSample> collect_samples(const std::vector<const LabeledImage*>& images,
                                            const AnnotationSet& annotations,
                                            const Config& cfg) {
  std::vector<TrainingSample> out;
  const double r2 = cfg.pipeline.label_radius * cfg.pipeline.label_radius;
  for (const LabeledImage* img : images) {
    const ScalarMap hmap = hematoxylin_channel(img->image, cfg.stain.source);
    const auto cands = extract_candidates(hmap, cfg.localize);
    const auto points = annotations.points_for(img->id);
    for (const auto& c : cands) {
      TrainingSample s;
      s.patch = crop_reflect(img->image, c.cx, c.cy, cfg.pipeline.patch_size);
      s.image_id = img->id;
      s.cx = c.cx;
      s.cy = c.cy;
      double best_any = std::numeric_limits<double>::infinity();
      for (const AnnotatedPoint* p : points) {
        const double d2 = (p->x - c.cx) * (p->x - c.cx) + (p->y - c.cy) * (p->y - c.cy);
        if (d2 > r2) continue;
        if (p->label == PointLabel::kMitosis) s.parent = 1;
        if (d2 < best_any) {
          best_any = d2;
          s.kind = p->kind.empty() ? to_string(p->label) : p->kind;
        }
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

namespace {

// One of the 8 dihedral transforms of a square patch.
RgbImage dihedral(const RgbImage& src, int code) {
  if (code == 0) return src;
  const int n = src.height();
  RgbImage out(n, n, src.channels());
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      int sx = x, sy = y;
      if (code & 4) std::swap(sx, sy);
      if (code & 1) sx = n - 1 - sx;
      if (code & 2) sy = n - 1 - sy;
      for (int c = 0; c < src.channels(); ++c) out(y, x, c) = src(sy, sx, c);
    }
  }
  return out;
}

bool hed_active(const HedJitter& h) {
  for (int s = 0; s < 3; ++s) {
    if (h.scale_spread[s] > 0.0 || h.shift_spread[s] > 0.0) return true;
  }
  return false;
}

}  // namespace

std::vector<EpochLoss> fit(MitosisClassifier& model, const std::vector<const RgbImage*>& patches,
                           const std::vector<int>& parents, const Config& cfg,
                           const FitOptions& opts, std::uint64_t seed, int first_epoch) {
  if (patches.size() != parents.size()) {
    throw Error(ErrorKind::kShapeMismatch, "patch and label counts differ");
  }
  const bool joint = !opts.child_labels.empty();
  if (joint && (opts.child_labels.size() != parents.size() || !model.has_child_head())) {
    throw Error(ErrorKind::kShapeMismatch, "child labels require a child head per sample");
  }
  const auto& pc = cfg.pipeline;
  const auto& ic = cfg.incdp;
  nn::Sgd sgd;
  sgd.learning_rate = pc.learning_rate;
  sgd.momentum = pc.momentum;
  sgd.weight_decay = pc.weight_decay;
  Rng rng(seed);
  const bool jitter = hed_active(cfg.stain.hed);
  std::vector<EpochLoss> history;
  const std::size_t n = patches.size();
  model.set_training(true);

  for (int e = 0; e < opts.epochs; ++e) {
    EpochLoss row;
    row.epoch = first_epoch + e;
    if (joint) {
      row.focal_child = 0.0;
      row.center_child = 0.0;
    }
    const auto order = rng.permutation(n);
    for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(pc.batch_size)) {
      const std::size_t end = std::min(n, b + static_cast<std::size_t>(pc.batch_size));
      const int bs = static_cast<int>(end - b);
      std::vector<RgbImage> batch;
      std::vector<int> labels, child;
      batch.reserve(static_cast<std::size_t>(bs));
      for (std::size_t k = b; k < end; ++k) {
        const std::size_t idx = order[k];
        RgbImage p = pc.augment_flips ? dihedral(*patches[idx], static_cast<int>(rng.index(8)))
                                      : *patches[idx];
        if (jitter) p = hed_jitter(p, cfg.stain.source, cfg.stain.hed, rng.engine()());
        batch.push_back(std::move(p));
        labels.push_back(parents[idx]);
        if (joint) child.push_back(opts.child_labels[idx]);
      }
      std::vector<const RgbImage*> ptrs;
      for (const auto& p : batch) ptrs.push_back(&p);
      const nn::Tensor input = patches_to_tensor(ptrs);

      std::optional<nn::MixPlan> plan;
      if (opts.mix && bs > 1 && rng.bernoulli(ic.mix_probability)) {
        nn::MixPlan mp;
        mp.sorted = ic.mix_sorted;
        for (std::size_t v : rng.permutation(static_cast<std::size_t>(bs))) {
          mp.partner.push_back(static_cast<int>(v));
        }
        for (int i = 0; i < bs; ++i) mp.mu.push_back(rng.beta(ic.mix_beta, ic.mix_beta));
        plan = std::move(mp);
      }

      const ModelOutput out = model.forward(input, plan ? &*plan : nullptr);
      const LogitLoss fp = focal_loss_logits(out.parent_logits, labels, ic.gamma);
      const LogitLoss cp = center_loss_grad(out.features, labels, model.parent_centers);
      FeatureMatrix grad_features = cp.grad;
      FeatureMatrix grad_child;
      double fc = 0.0, cc = 0.0;
      if (joint) {
        LogitLoss f = child_focal_loss_logits(out.child_logits, child, model.weights, ic.gamma);
        const LogitLoss c = center_loss_grad(out.features, child, model.child_centers);
        grad_features += ic.lambda * c.grad;
        grad_child = ic.lambda * f.grad;
        fc = f.loss;
        cc = c.loss;
      }

      model.zero_grad();
      model.backward(out, grad_features, fp.grad, grad_child);
      sgd.step(model.params());
      model.parent_centers =
          update_centers(model.parent_centers, out.features, labels, ic.center_rate);
      if (joint) {
        model.child_centers =
            update_centers(model.child_centers, out.features, child, ic.center_rate);
      }

      row.focal_parent += fp.loss;
      row.center_parent += cp.loss;
      if (joint) {
        *row.focal_child += fc;
        *row.center_child += cc;
      }
      row.total += joint_loss(fp.loss, cp.loss, fc, cc, joint ? ic.lambda : 0.0);
    }
    history.push_back(row);
  }
  model.set_training(false);
  return history;
}

SamplingReport sample_training_set(const std::vector<TrainingSample>& samples,
                                   const Config& cfg, std::uint64_t seed) {
  SamplingReport r;
  std::vector<std::size_t> negatives;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    (samples[i].parent == 1 ? r.positives : negatives).push_back(i);
  }
  if (r.positives.empty() || negatives.empty()) {
    throw Error(ErrorKind::kSingleClass, "training data must contain both classes");
  }

  if (!cfg.pipeline.flags.dgsb) {
    Rng rng(mix_seed(seed, 11));
    auto perm = rng.permutation(negatives.size());
    perm.resize(std::min(negatives.size(), r.positives.size()));
    for (std::size_t p : perm) r.negatives.push_back(negatives[p]);
    std::sort(r.negatives.begin(), r.negatives.end());
    return r;
  }

  // 1st sampler: cluster negatives and draw evenly from every cluster.
  std::vector<Patch> patches;
  patches.reserve(negatives.size());
  for (std::size_t i : negatives) {
    patches.push_back({samples[i].patch, samples[i].image_id, samples[i].cx, samples[i].cy});
  }
  const FeatureMatrix feats = embed(patches, DefaultEmbedder(cfg.stain.source));
  const int k = std::min<int>(cfg.dgsb.k, static_cast<int>(negatives.size()));
  const ClusterAssignment assign = kmeans(feats, k, mix_seed(seed, 12));
  const int m = cfg.dgsb.samples_per_cluster(r.positives.size());
  const auto chosen = sample_balanced(assign, m, mix_seed(seed, 13));
  r.all_negatives = negatives;
  r.negative_cluster = assign.labels;
  for (std::size_t c : chosen) r.first_sampler.push_back(negatives[c]);

  // 2nd sampler: a briefly trained classifier drops confident negatives.
  MitosisClassifier fdiff;
  fdiff.init(mix_seed(seed, 14));
  std::vector<const RgbImage*> train_patches;
  std::vector<int> labels;
  for (std::size_t i : r.first_sampler) {
    train_patches.push_back(&samples[i].patch);
    labels.push_back(0);
  }
  for (std::size_t i : r.positives) {
    train_patches.push_back(&samples[i].patch);
    labels.push_back(1);
  }
  fit(fdiff, train_patches, labels, cfg, FitOptions{cfg.pipeline.fdiff_epochs, false, {}},
      mix_seed(seed, 15));
  std::vector<RgbImage> neg_patches;
  for (std::size_t i : r.first_sampler) neg_patches.push_back(samples[i].patch);
  r.difficulty_probs = fdiff.predict_proba(neg_patches);
  auto kept = difficulty_filter(r.difficulty_probs, cfg.dgsb.epsilon);
  if (cfg.dgsb.top_up) {
    std::vector<int> clusters;
    for (std::size_t c : chosen) clusters.push_back(assign.labels[c]);
    kept = top_up_hardest(r.difficulty_probs, clusters, std::move(kept), r.positives.size());
  }
  for (std::size_t i : kept) r.negatives.push_back(r.first_sampler[i]);
  return r;
}

TrainResult train(const std::vector<TrainingSample>& samples, const Config& cfg,
                  std::uint64_t seed) {
  cfg.validate();
  TrainResult result;
  result.sampling = sample_training_set(samples, cfg, seed);
  const auto& flags = cfg.pipeline.flags;

  std::vector<std::size_t> selected = result.sampling.positives;
  selected.insert(selected.end(), result.sampling.negatives.begin(),
                  result.sampling.negatives.end());
  std::sort(selected.begin(), selected.end());

  // Stain enhancement at the data level: each patch plus one restained copy
  // per target domain.
  std::vector<RgbImage> augmented;
  std::vector<const RgbImage*> patches;
  std::vector<int> parents;
  if (flags.se) {
    augmented.reserve(selected.size() * cfg.stain.domains.size());
  }
  for (std::size_t i : selected) {
    patches.push_back(&samples[i].patch);
    parents.push_back(samples[i].parent);
  }
  if (flags.se) {
    for (std::size_t d = 0; d < cfg.stain.domains.size(); ++d) {
      for (std::size_t i : selected) {
        Rng rng(mix_seed(seed, 1000 + i * 64 + d));
        Vec3 gain{};
        for (double& g : gain) {
          g = 1.0 + rng.uniform(-cfg.stain.gain_jitter, cfg.stain.gain_jitter);
        }
        augmented.push_back(
            restain(samples[i].patch, cfg.stain.source, cfg.stain.domains[d].second, gain));
      }
    }
    for (std::size_t d = 0; d < cfg.stain.domains.size(); ++d) {
      for (std::size_t k = 0; k < selected.size(); ++k) {
        patches.push_back(&augmented[d * selected.size() + k]);
        parents.push_back(samples[selected[k]].parent);
      }
    }
  }

  MitosisClassifier& model = result.model;
  model.init(mix_seed(seed, 21));
  model.config_snapshot = cfg.to_text();

  if (!flags.incdp) {
    result.history = fit(model, patches, parents, cfg,
                         FitOptions{cfg.pipeline.epochs, flags.se, {}}, mix_seed(seed, 22));
    return result;
  }

  result.history = fit(model, patches, parents, cfg,
                       FitOptions{cfg.pipeline.parent_epochs, flags.se, {}},
                       mix_seed(seed, 23));
  std::vector<RgbImage> owned;
  owned.reserve(patches.size());
  for (const RgbImage* p : patches) owned.push_back(*p);
  const FeatureMatrix feats = model.extract_features(owned);
  const int t = cfg.incdp.child_per_parent;
  const ChildLabeling children = generate_child_labels(feats, parents, t, mix_seed(seed, 24));
  model.enable_child_head(t, mix_seed(seed, 25));
  model.child_centers = children.centroids;
  model.weights =
      child_weights(children.centroids, t, cfg.incdp.weight_min, cfg.incdp.weight_max);
  auto joint = fit(model, patches, parents, cfg,
                   FitOptions{cfg.pipeline.epochs, flags.se, children.labels},
                   mix_seed(seed, 26), cfg.pipeline.parent_epochs + 1);
  result.history.insert(result.history.end(), joint.begin(), joint.end());
  return result;
}

// ---------------------------------------------------------------------------
// Inference

DetectionResult detect(const RgbImage& img, const std::string& image_id,
                       MitosisClassifier& model, const Config& cfg) {
  DetectionResult result;
  result.image_id = image_id;
  const ScalarMap hmap = hematoxylin_channel(img, cfg.stain.source);
  const auto cands = extract_candidates(hmap, cfg.localize);
  if (cands.empty()) return result;
  const int s = cfg.pipeline.patch_size;
  std::vector<RgbImage> patches;
  patches.reserve(cands.size());
  for (const auto& c : cands) patches.push_back(crop_reflect(img, c.cx, c.cy, s));
  const auto preds = model.predict_with_cam(patches);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (preds[i].probability < cfg.pipeline.score_threshold) continue;
    const double x = cands[i].cx - s / 2 + preds[i].cam.patch_x;
    const double y = cands[i].cy - s / 2 + preds[i].cam.patch_y;
    result.points.push_back({std::clamp(x, 0.0, img.width() - 1.0),
                             std::clamp(y, 0.0, img.height() - 1.0),
                             preds[i].probability});
  }
  return result;
}

EvalReport evaluate_detections(const std::vector<DetectionResult>& detections,
                               const AnnotationSet& annotations, const Config& cfg) {
  EvalReport report;
  report.detections = detections;
  for (const auto& d : detections) {
    report.match += match_detections(d.points, annotations.mitoses(d.image_id),
                                     cfg.pipeline.match_radius);
  }
  report.metrics = prf1(report.match);
  return report;
}

EvalReport evaluate(MitosisClassifier& model, const Dataset& data, const std::string& split,
                    const Config& cfg) {
  std::vector<DetectionResult> dets;
  std::size_t gt_total = 0;
  double covered = 0.0;
  for (const LabeledImage* img : data.split(split)) {
    dets.push_back(detect(img->image, img->id, model, cfg));
    const auto gt = data.annotations.mitoses(img->id);
    if (gt.empty()) continue;
    const auto cands =
        extract_candidates(hematoxylin_channel(img->image, cfg.stain.source), cfg.localize);
    covered += localization_sensitivity(cands, gt, cfg.pipeline.match_radius) *
               static_cast<double>(gt.size());
    gt_total += gt.size();
  }
  EvalReport report = evaluate_detections(dets, data.annotations, cfg);
  report.sensitivity = gt_total > 0 ? covered / static_cast<double>(gt_total) : 1.0;
  return report;
}

std::vector<AblationRow> run_ablation(const Dataset& data,
                                      const std::vector<AblationFlags>& variants,
                                      const Config& cfg, std::uint64_t seed) {
  if (variants.empty()) throw Error(ErrorKind::kInvalidArgument, "no ablation variants");
  const auto samples = collect_samples(data.split("train"), data.annotations, cfg);
  std::vector<AblationRow> rows;
  for (const AblationFlags& flags : variants) {
    Config variant = cfg;
    variant.pipeline.flags = flags;
    TrainResult tr = train(samples, variant, seed);
    const EvalReport ev = evaluate(tr.model, data, "test", variant);
    rows.push_back({flags, ev.metrics, ev.match});
  }
  return rows;
}

}  // namespace mitdet
