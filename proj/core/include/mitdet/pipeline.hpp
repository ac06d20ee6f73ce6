#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mitdet/data.hpp"
#include "mitdet/dgsb.hpp"
#include "mitdet/incdp.hpp"
#include "mitdet/localize.hpp"
#include "mitdet/model.hpp"
#include "mitdet/stain.hpp"

namespace mitdet {

// ---------------------------------------------------------------------------
// Configuration

struct AblationFlags {
  bool dgsb = true;
  bool se = true;
  bool incdp = true;

  std::string label() const;
  static AblationFlags parse(const std::string& text);
  bool operator==(const AblationFlags&) const = default;
};

struct PipelineConfig {
  int patch_size = 80;
  double match_radius = 30.0;
  double score_threshold = 0.5;
  /// A candidate is a positive training patch when a mitosis lies this close.
  double label_radius = 12.0;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch_size = 16;
  int epochs = 20;
  /// Parent-only epochs before child pseudo-labels are generated.
  int parent_epochs = 10;
  /// Training budget of the difficulty classifier (2nd sampler).
  int fdiff_epochs = 5;
  bool augment_flips = true;
  AblationFlags flags;

  void validate() const;
};

struct StainConfig {
  StainMatrix source = StainMatrix::default_he();
  std::vector<std::pair<std::string, StainMatrix>> domains;
  /// Uniform half-width of the per-stain concentration gain in restaining.
  double gain_jitter = 0.1;
  HedJitter hed{{1, 1, 1}, {0, 0, 0}, {0.05, 0.05, 0.0}, {0.01, 0.01, 0.0}};

  StainConfig();
};

/// Every tunable in one place; serialized as flat key=value text.
struct Config {
  StainConfig stain;
  LocalizeConfig localize;
  DgsbConfig dgsb;
  InCdpConfig incdp;
  PipelineConfig pipeline;
  SyntheticConfig synth;
  std::uint64_t seed = 7;

  static Config parse(const std::string& text);
  static Config load(const std::string& path);
  /// Applies one key=value pair; throws kInvalidArgument on unknown keys.
  void set(const std::string& key, const std::string& value);
  std::string to_text() const;
  void validate() const;
};

// ---------------------------------------------------------------------------
// Detection and evaluation

struct Detection {
  double x = 0.0;
  double y = 0.0;
  double score = 0.0;

  bool operator==(const Detection&) const = default;
};

struct DetectionResult {
  std::string image_id;
  std::vector<Detection> points;
};

struct Match {
  std::size_t pred = 0;
  std::size_t gt = 0;
  double distance = 0.0;
};

struct MatchReport {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::vector<Match> matches;

  MatchReport& operator+=(const MatchReport& other);
};

struct Metrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Greedy one-to-one matching: all pairs within radius, ascending distance,
/// ties by (pred, gt).
MatchReport match_detections(const std::vector<Detection>& pred,
                             const std::vector<Point>& gt, double radius);

Metrics prf1(const MatchReport& report);
/// F1 from precision and recall (0 when both are 0).
double f1_score(double precision, double recall);

// ---------------------------------------------------------------------------
// Training data

struct LabeledImage {
  std::string id;
  RgbImage image;
};

struct Dataset {
  std::vector<LabeledImage> images;
  AnnotationSet annotations;

  /// Images whose split tag matches; an empty split selects all images.
  std::vector<const LabeledImage*> split(const std::string& name) const;
  static Dataset from_synthetic(SyntheticDataset ds);
  /// Reads <dir>/annotations.json and the image files it references.
  static Dataset load(const std::string& dir);
};

struct TrainingSample {
  RgbImage patch;
  int parent = 0;
  std::string image_id;
  int cx = 0;
  int cy = 0;
  /// Provenance of the nearest annotation, if any ("impostor", ...).
  std::string kind;
};

/// Localizes, crops and labels candidates from the given images.
std::vector<TrainingSample> collect_samples(const std::vector<const LabeledImage*>& images,
                                            const AnnotationSet& annotations,
                                            const Config& cfg);

struct SamplingReport {
  std::vector<std::size_t> positives;
  /// Negatives after sampling (the set used for training).
  std::vector<std::size_t> negatives;
  /// DGSB bookkeeping, empty when DGSB is off.
  std::vector<std::size_t> all_negatives;
  std::vector<int> negative_cluster;        // aligned with all_negatives
  std::vector<std::size_t> first_sampler;   // indices into samples
  std::vector<double> difficulty_probs;     // aligned with first_sampler
};

/// DGSB (clustered sampling + difficulty filter) or random balanced sampling.
SamplingReport sample_training_set(const std::vector<TrainingSample>& samples,
                                   const Config& cfg, std::uint64_t seed);

struct EpochLoss {
  int epoch = 0;
  double focal_parent = 0.0;
  double center_parent = 0.0;
  std::optional<double> focal_child;
  std::optional<double> center_child;
  double total = 0.0;
};

struct TrainResult {
  MitosisClassifier model;
  std::vector<EpochLoss> history;
  SamplingReport sampling;
};

/// Runs the stages selected by cfg.pipeline.flags. Deterministic in seed.
TrainResult train(const std::vector<TrainingSample>& samples, const Config& cfg,
                  std::uint64_t seed);

/// Trains a classifier on explicit patches and labels with the parent-only
/// (and, with child labels, joint) objective. Used by train() and by the
/// difficulty sampler.
struct FitOptions {
  int epochs = 1;
  bool mix = false;
  std::vector<int> child_labels;  // empty: parent-only objective
};
std::vector<EpochLoss> fit(MitosisClassifier& model, const std::vector<const RgbImage*>& patches,
                           const std::vector<int>& parents, const Config& cfg,
                           const FitOptions& opts, std::uint64_t seed, int first_epoch = 1);

DetectionResult detect(const RgbImage& img, const std::string& image_id,
                       MitosisClassifier& model, const Config& cfg);

struct EvalReport {
  MatchReport match;
  Metrics metrics;
  double sensitivity = 0.0;
  std::vector<DetectionResult> detections;
};

EvalReport evaluate(MitosisClassifier& model, const Dataset& data, const std::string& split,
                    const Config& cfg);
/// Scores existing detections against the annotations.
EvalReport evaluate_detections(const std::vector<DetectionResult>& detections,
                               const AnnotationSet& annotations, const Config& cfg);

struct AblationRow {
  AblationFlags flags;
  Metrics metrics;
  MatchReport match;
};

std::vector<AblationRow> run_ablation(const Dataset& data,
                                      const std::vector<AblationFlags>& variants,
                                      const Config& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Serialization helpers shared by the CLI

std::string detections_to_json(const std::vector<DetectionResult>& detections);
std::vector<DetectionResult> detections_from_json(const std::string& text);
std::string metrics_to_json(const EvalReport& report);
std::string history_to_csv(const std::vector<EpochLoss>& history);
std::string ablation_to_table(const std::vector<AblationRow>& rows);
std::string ablation_to_json(const std::vector<AblationRow>& rows);

}  // namespace mitdet
