#include "mitdet/cli.hpp"

#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mitdet/error.hpp"
#include "mitdet/pipeline.hpp"
#include "mitdet/plot.hpp"

namespace mitdet {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;

  Config load() const {
    Config cfg = config_path.empty() ? Config{} : Config::load(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) {
        throw Error(ErrorKind::kInvalidArgument, "--set expects key=value: " + kv);
      }
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) {
      cfg.seed = *seed;
      cfg.synth.seed = *seed;
    }
    cfg.validate();
    return cfg;
  }
};

void write_text(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error(ErrorKind::kIo, "cannot write " + path);
  f << text;
}

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::kMissingFile, "cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<AblationFlags> default_variants() {
  return {AblationFlags::parse("baseline"), AblationFlags::parse("dgsb"),
          AblationFlags::parse("se"),       AblationFlags::parse("incdp"),
          AblationFlags::parse("dgsb+se"),  AblationFlags::parse("dgsb+incdp"),
          AblationFlags::parse("se+incdp"), AblationFlags::parse("all")};
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mitosis detection pipeline"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config_path, "key=value configuration file");
  app.add_option("--seed", g.seed, "Base seed (overrides the config)");
  app.add_option("--set", g.overrides, "Override one config key (key=value)");

  std::string data_dir, out_path, split, model_path, det_path, history_path, flags_text;
  std::string json_path;
  std::vector<std::string> variants;

  auto* synth = app.add_subcommand("synth", "Generate the synthetic dataset");
  synth->add_option("--out", out_path, "Output directory")->required();

  auto* localize = app.add_subcommand("localize", "Emit nucleus candidates as JSON");
  localize->add_option("--data", data_dir, "Dataset directory")->required();
  localize->add_option("--split", split, "Restrict to one split");
  localize->add_option("--out", out_path, "Output file (default stdout)");

  auto* build = app.add_subcommand("build", "Run sample balancing and write the manifest");
  build->add_option("--data", data_dir, "Dataset directory")->required();
  build->add_option("--split", split, "Training split")->capture_default_str();
  build->add_option("--out", out_path, "Output file (default stdout)");

  auto* train = app.add_subcommand("train", "Train a classifier checkpoint");
  train->add_option("--data", data_dir, "Dataset directory")->required();
  train->add_option("--split", split, "Training split");
  train->add_option("--out", out_path, "Checkpoint path")->required();
  train->add_option("--history", history_path, "Loss history CSV");
  train->add_option("--flags", flags_text, "Stages: all, baseline or e.g. dgsb+se");

  auto* detect = app.add_subcommand("detect", "Detect mitoses with a checkpoint");
  detect->add_option("--data", data_dir, "Dataset directory")->required();
  detect->add_option("--model", model_path, "Checkpoint")->required();
  detect->add_option("--split", split, "Split to process");
  detect->add_option("--out", out_path, "Output file (default stdout)");

  auto* eval = app.add_subcommand("eval", "Score detections against annotations");
  eval->add_option("--data", data_dir, "Dataset directory")->required();
  eval->add_option("--detections", det_path, "Detections JSON")->required();
  eval->add_option("--out", out_path, "Output file (default stdout)");

  auto* ablate = app.add_subcommand("ablate", "Train and score stage combinations");
  ablate->add_option("--data", data_dir, "Dataset directory")->required();
  ablate->add_option("--variant", variants, "Variant (repeatable); default all eight");
  ablate->add_option("--json", json_path, "Also write rows as JSON");
  ablate->add_option("--out", out_path, "Table output (default stdout)");

  auto* plot = app.add_subcommand("plot-features", "Scatter plot of patch features");
  plot->add_option("--data", data_dir, "Dataset directory")->required();
  plot->add_option("--model", model_path, "Checkpoint (default: handcrafted embedding)");
  plot->add_option("--split", split, "Split to plot");
  plot->add_option("--out", out_path, "PNG path")->required();

  std::vector<std::string> rev(args.begin() + (args.empty() ? 0 : 1), args.end());
  std::reverse(rev.begin(), rev.end());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    const Config cfg = g.load();
    const std::uint64_t seed = cfg.seed;

    if (*synth) {
      write_dataset(generate_synthetic(cfg.synth, cfg.stain.source), out_path);
      return 0;
    }

    const Dataset data = Dataset::load(data_dir);

    if (*localize) {
      json doc = json::array();
      for (const LabeledImage* img : data.split(split)) {
        const auto cands =
            extract_candidates(hematoxylin_channel(img->image, cfg.stain.source), cfg.localize);
        for (const auto& c : cands) {
          doc.push_back({{"image_id", img->id}, {"cx", c.cx}, {"cy", c.cy}, {"area", c.area}});
        }
      }
      write_text(out_path, doc.dump(2) + "\n", out);
    } else if (*build) {
      const auto samples =
          collect_samples(data.split(split.empty() ? "train" : split), data.annotations, cfg);
      const SamplingReport r = sample_training_set(samples, cfg, seed);
      std::vector<int> cluster(samples.size(), -1);
      for (std::size_t k = 0; k < r.all_negatives.size(); ++k) {
        cluster[r.all_negatives[k]] = r.negative_cluster[k];
      }
      std::vector<std::size_t> chosen = r.positives;
      chosen.insert(chosen.end(), r.negatives.begin(), r.negatives.end());
      std::sort(chosen.begin(), chosen.end());
      json doc = json::array();
      for (std::size_t i : chosen) {
        const auto& s = samples[i];
        const std::string id = s.image_id + ":" + std::to_string(s.cx) + ":" + std::to_string(s.cy);
        doc.push_back({{"patch_id", id}, {"parent_label", s.parent}, {"cluster", cluster[i]}});
      }
      write_text(out_path, doc.dump(2) + "\n", out);
    } else if (*train) {
      Config tc = cfg;
      if (!flags_text.empty()) tc.pipeline.flags = AblationFlags::parse(flags_text);
      const auto samples =
          collect_samples(data.split(split.empty() ? "train" : split), data.annotations, tc);
      TrainResult r = mitdet::train(samples, tc, seed);
      r.model.save(out_path);
      if (!history_path.empty()) write_text(history_path, history_to_csv(r.history), out);
    } else if (*detect) {
      MitosisClassifier model = MitosisClassifier::load(model_path);
      std::vector<DetectionResult> dets;
      for (const LabeledImage* img : data.split(split)) {
        dets.push_back(mitdet::detect(img->image, img->id, model, cfg));
      }
      write_text(out_path, detections_to_json(dets), out);
    } else if (*eval) {
      const auto dets = detections_from_json(read_text(det_path));
      for (const auto& d : dets) {
        if (data.annotations.find_image(d.image_id) == nullptr) {
          throw Error(ErrorKind::kMalformedJson, "detections for unknown image " + d.image_id);
        }
      }
      write_text(out_path, metrics_to_json(evaluate_detections(dets, data.annotations, cfg)), out);
    } else if (*ablate) {
      std::vector<AblationFlags> list;
      for (const auto& v : variants) list.push_back(AblationFlags::parse(v));
      if (list.empty()) list = default_variants();
      const auto rows = run_ablation(data, list, cfg, seed);
      write_text(out_path, ablation_to_table(rows), out);
      if (!json_path.empty()) write_text(json_path, ablation_to_json(rows), out);
    } else if (*plot) {
      const auto samples =
          collect_samples(data.split(split.empty() ? "test" : split), data.annotations, cfg);
      std::vector<RgbImage> patches;
      std::vector<Patch> raw;
      std::vector<int> labels;
      for (const auto& s : samples) {
        patches.push_back(s.patch);
        raw.push_back({s.patch, s.image_id, s.cx, s.cy});
        labels.push_back(s.parent);
      }
      FeatureMatrix feats;
      if (model_path.empty()) {
        feats = embed(raw, DefaultEmbedder(cfg.stain.source));
      } else {
        MitosisClassifier model = MitosisClassifier::load(model_path);
        feats = model.extract_features(patches);
      }
      write_png(render_scatter(pca_2d(feats), labels), out_path);
    }
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace mitdet
