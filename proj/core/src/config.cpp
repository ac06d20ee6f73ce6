#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mitdet/error.hpp"
#include "mitdet/pipeline.hpp"

namespace mitdet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<double> parse_numbers(const std::string& key, const std::string& value,
                                  std::size_t expected) {
  std::istringstream is(value);
  std::vector<double> out;
  std::string tok;
  while (is >> tok) {
    std::replace(tok.begin(), tok.end(), ',', ' ');
    std::istringstream ts(tok);
    double v;
    while (ts >> v) out.push_back(v);
  }
  if (out.size() != expected) {
    throw Error(ErrorKind::kInvalidArgument,
                key + " expects " + std::to_string(expected) + " numbers");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  return parse_numbers(key, value, 1)[0];
}

int parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return static_cast<int>(v);
  } catch (const std::exception&) {
    throw Error(ErrorKind::kInvalidArgument, key + " expects an integer");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  std::string v = value;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw Error(ErrorKind::kInvalidArgument, key + " expects a boolean");
}

Vec3 parse_vec3(const std::string& key, const std::string& value) {
  const auto v = parse_numbers(key, value, 3);
  return {v[0], v[1], v[2]};
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string fmt(const Vec3& v) { return fmt(v[0]) + " " + fmt(v[1]) + " " + fmt(v[2]); }

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

}  // namespace

StainConfig::StainConfig() {
  domains = {
      {"scanner_a", StainMatrix::from_he({0.490, 0.769, 0.410}, {0.046, 0.842, 0.538})},
      {"scanner_b", StainMatrix::from_he({0.5626, 0.7201, 0.4062}, {0.2159, 0.8012, 0.5581})},
      {"scanner_c", StainMatrix::from_he({0.700, 0.660, 0.270}, {0.150, 0.950, 0.270})},
  };
}

std::string AblationFlags::label() const {
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += "+";
    out += name;
  };
  add(dgsb, "dgsb");
  add(se, "se");
  add(incdp, "incdp");
  return out.empty() ? "baseline" : out;
}

AblationFlags AblationFlags::parse(const std::string& text) {
  AblationFlags f{false, false, false};
  if (text == "baseline" || text == "none" || text.empty()) return f;
  if (text == "all") return {};
  std::istringstream is(text);
  std::string tok;
  while (std::getline(is, tok, '+')) {
    tok = trim(tok);
    if (tok == "dgsb") f.dgsb = true;
    else if (tok == "se") f.se = true;
    else if (tok == "incdp") f.incdp = true;
    else throw Error(ErrorKind::kInvalidArgument, "unknown ablation flag: " + tok);
  }
  return f;
}

void PipelineConfig::validate() const {
  if (patch_size < 16 || patch_size % 2 != 0) {
    throw Error(ErrorKind::kInvalidArgument, "patch_size must be even and >= 16");
  }
  if (!(match_radius > 0.0)) throw Error(ErrorKind::kInvalidArgument, "match_radius must be > 0");
  if (!(score_threshold > 0.0 && score_threshold < 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "score_threshold must be in (0, 1)");
  }
  if (batch_size < 1 || epochs < 0 || parent_epochs < 0 || fdiff_epochs < 0) {
    throw Error(ErrorKind::kInvalidArgument, "invalid training budget");
  }
}

void Config::validate() const {
  localize.validate();
  dgsb.validate();
  incdp.validate();
  pipeline.validate();
  synth.validate();
}

void Config::set(const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  auto& p = pipeline;
  if (key == "seed") {
    seed = static_cast<std::uint64_t>(parse_int(key, value));
  } else if (key == "stain.h") {
    stain.source = StainMatrix::from_he(parse_vec3(key, value), stain.source.row(1));
  } else if (key == "stain.e") {
    stain.source = StainMatrix::from_he(stain.source.row(0), parse_vec3(key, value));
  } else if (key.rfind("stain.domains.", 0) == 0) {
    const std::string name = key.substr(std::string("stain.domains.").size());
    const auto v = parse_numbers(key, value, 9);
    std::array<double, 9> a{};
    std::copy(v.begin(), v.end(), a.begin());
    auto m = StainMatrix::from_row_major(a);
    auto it = std::find_if(stain.domains.begin(), stain.domains.end(),
                           [&](const auto& d) { return d.first == name; });
    if (it != stain.domains.end()) it->second = m;
    else stain.domains.emplace_back(name, m);
  } else if (key == "stain.gain_jitter") {
    stain.gain_jitter = parse_double(key, value);
  } else if (key == "stain.hed.scale_spread") {
    stain.hed.scale_spread = parse_vec3(key, value);
  } else if (key == "stain.hed.shift_spread") {
    stain.hed.shift_spread = parse_vec3(key, value);
  } else if (key == "localize.threshold_method") {
    if (value == "otsu") localize.threshold_method = ThresholdMethod::kOtsu;
    else if (value == "fixed") localize.threshold_method = ThresholdMethod::kFixed;
    else throw Error(ErrorKind::kInvalidArgument, "threshold_method must be otsu|fixed");
  } else if (key == "localize.fixed_threshold") {
    localize.fixed_threshold = parse_double(key, value);
  } else if (key == "localize.min_area") {
    localize.min_area = parse_int(key, value);
  } else if (key == "localize.max_area") {
    localize.max_area = parse_int(key, value);
  } else if (key == "localize.open_radius") {
    localize.open_radius = parse_int(key, value);
  } else if (key == "dgsb.k") {
    dgsb.k = parse_int(key, value);
  } else if (key == "dgsb.m") {
    dgsb.m = parse_int(key, value);
  } else if (key == "dgsb.pool_factor") {
    dgsb.pool_factor = parse_double(key, value);
  } else if (key == "dgsb.epsilon") {
    dgsb.epsilon = parse_double(key, value);
  } else if (key == "dgsb.top_up") {
    dgsb.top_up = parse_bool(key, value);
  } else if (key == "incdp.T") {
    incdp.child_per_parent = parse_int(key, value);
  } else if (key == "incdp.gamma") {
    incdp.gamma = parse_double(key, value);
  } else if (key == "incdp.lambda") {
    incdp.lambda = parse_double(key, value);
  } else if (key == "incdp.center_rate") {
    incdp.center_rate = parse_double(key, value);
  } else if (key == "incdp.mix_beta") {
    incdp.mix_beta = parse_double(key, value);
  } else if (key == "incdp.mix_probability") {
    incdp.mix_probability = parse_double(key, value);
  } else if (key == "incdp.mix_sorted") {
    incdp.mix_sorted = parse_bool(key, value);
  } else if (key == "incdp.weight_min") {
    incdp.weight_min = parse_double(key, value);
  } else if (key == "incdp.weight_max") {
    incdp.weight_max = parse_double(key, value);
  } else if (key == "pipeline.patch_size") {
    p.patch_size = parse_int(key, value);
  } else if (key == "pipeline.match_radius") {
    p.match_radius = parse_double(key, value);
  } else if (key == "pipeline.score_threshold") {
    p.score_threshold = parse_double(key, value);
  } else if (key == "pipeline.label_radius") {
    p.label_radius = parse_double(key, value);
  } else if (key == "pipeline.learning_rate") {
    p.learning_rate = parse_double(key, value);
  } else if (key == "pipeline.momentum") {
    p.momentum = parse_double(key, value);
  } else if (key == "pipeline.weight_decay") {
    p.weight_decay = parse_double(key, value);
  } else if (key == "pipeline.batch_size") {
    p.batch_size = parse_int(key, value);
  } else if (key == "pipeline.epochs") {
    p.epochs = parse_int(key, value);
  } else if (key == "pipeline.parent_epochs") {
    p.parent_epochs = parse_int(key, value);
  } else if (key == "pipeline.fdiff_epochs") {
    p.fdiff_epochs = parse_int(key, value);
  } else if (key == "pipeline.augment_flips") {
    p.augment_flips = parse_bool(key, value);
  } else if (key == "pipeline.dgsb") {
    p.flags.dgsb = parse_bool(key, value);
  } else if (key == "pipeline.se") {
    p.flags.se = parse_bool(key, value);
  } else if (key == "pipeline.incdp") {
    p.flags.incdp = parse_bool(key, value);
  } else if (key == "synth.image_count") {
    synth.image_count = parse_int(key, value);
  } else if (key == "synth.image_size") {
    synth.image_size = parse_int(key, value);
  } else if (key == "synth.normal_nuclei") {
    synth.normal_nuclei = parse_int(key, value);
  } else if (key == "synth.mitoses") {
    synth.mitoses = parse_int(key, value);
  } else if (key == "synth.impostors") {
    synth.impostors = parse_int(key, value);
  } else if (key == "synth.radius_min") {
    synth.radius_min = parse_double(key, value);
  } else if (key == "synth.radius_max") {
    synth.radius_max = parse_double(key, value);
  } else if (key == "synth.min_separation") {
    synth.min_separation = parse_double(key, value);
  } else if (key == "synth.low_intensity_fraction") {
    synth.low_intensity_fraction = parse_double(key, value);
  } else if (key == "synth.train_fraction") {
    synth.train_fraction = parse_double(key, value);
  } else if (key == "synth.stain_jitter_deg") {
    synth.stain_jitter_deg = parse_double(key, value);
  } else {
    throw Error(ErrorKind::kInvalidArgument, "unknown config key: " + key);
  }
}

Config Config::parse(const std::string& text) {
  Config cfg;
  bool domains_seen = false;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::kInvalidArgument,
                  "config line " + std::to_string(lineno) + " has no '='");
    }
    const std::string key = trim(line.substr(0, eq));
    // Domains listed in a file replace the built-in set.
    if (key.rfind("stain.domains.", 0) == 0 && !domains_seen) {
      cfg.stain.domains.clear();
      domains_seen = true;
    }
    cfg.set(key, line.substr(eq + 1));
  }
  cfg.synth.seed = cfg.seed;
  cfg.dgsb.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

Config Config::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::kMissingFile, "cannot open config: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

std::string Config::to_text() const {
  std::ostringstream os;
  const auto& p = pipeline;
  os << "seed = " << seed << "\n\n";
  os << "# stain basis rows (unit norm); residual is the cross product\n";
  os << "stain.h = " << fmt(stain.source.row(0)) << "\n";
  os << "stain.e = " << fmt(stain.source.row(1)) << "\n";
  os << "# target stain domains for augmentation, 9 numbers row-major\n";
  for (const auto& [name, m] : stain.domains) {
    const auto v = m.row_major();
    os << "stain.domains." << name << " =";
    for (double x : v) os << " " << fmt(x);
    os << "\n";
  }
  os << "stain.gain_jitter = " << fmt(stain.gain_jitter) << "\n";
  os << "stain.hed.scale_spread = " << fmt(stain.hed.scale_spread) << "\n";
  os << "stain.hed.shift_spread = " << fmt(stain.hed.shift_spread) << "\n\n";

  os << "localize.threshold_method = "
     << (localize.threshold_method == ThresholdMethod::kOtsu ? "otsu" : "fixed") << "\n";
  os << "localize.fixed_threshold = " << fmt(localize.fixed_threshold) << "\n";
  os << "localize.min_area = " << localize.min_area << "\n";
  os << "localize.max_area = " << localize.max_area << "\n";
  os << "localize.open_radius = " << localize.open_radius << "\n\n";

  os << "# k negative clusters; m per cluster (0 = derived from pool_factor)\n";
  os << "dgsb.k = " << dgsb.k << "\n";
  os << "dgsb.m = " << dgsb.m << "\n";
  os << "# pool_factor: with m = 0, m = ceil(pool_factor * |positives| / k)\n";
  os << "dgsb.pool_factor = " << fmt(dgsb.pool_factor) << "\n";
  os << "# epsilon: negatives predicted below this are dropped as easy\n";
  os << "dgsb.epsilon = " << fmt(dgsb.epsilon) << "\n";
  os << "# top_up: refill kept negatives to |positives|, hardest first per cluster\n";
  os << "dgsb.top_up = " << fmt_bool(dgsb.top_up) << "\n\n";

  os << "# T child classes per parent; lambda weights the child losses\n";
  os << "incdp.T = " << incdp.child_per_parent << "\n";
  os << "incdp.gamma = " << fmt(incdp.gamma) << "\n";
  os << "incdp.lambda = " << fmt(incdp.lambda) << "\n";
  os << "incdp.center_rate = " << fmt(incdp.center_rate) << "\n";
  os << "incdp.mix_beta = " << fmt(incdp.mix_beta) << "\n";
  os << "incdp.mix_probability = " << fmt(incdp.mix_probability) << "\n";
  os << "incdp.mix_sorted = " << fmt_bool(incdp.mix_sorted) << "\n";
  os << "incdp.weight_min = " << fmt(incdp.weight_min) << "\n";
  os << "incdp.weight_max = " << fmt(incdp.weight_max) << "\n\n";

  os << "# patch size 80x80; SGD with weight decay 5e-4 and learning rate 1e-3\n";
  os << "pipeline.patch_size = " << p.patch_size << "\n";
  os << "pipeline.match_radius = " << fmt(p.match_radius) << "\n";
  os << "pipeline.score_threshold = " << fmt(p.score_threshold) << "\n";
  os << "pipeline.label_radius = " << fmt(p.label_radius) << "\n";
  os << "pipeline.learning_rate = " << fmt(p.learning_rate) << "\n";
  os << "pipeline.momentum = " << fmt(p.momentum) << "\n";
  os << "pipeline.weight_decay = " << fmt(p.weight_decay) << "\n";
  os << "pipeline.batch_size = " << p.batch_size << "\n";
  os << "pipeline.epochs = " << p.epochs << "\n";
  os << "pipeline.parent_epochs = " << p.parent_epochs << "\n";
  os << "pipeline.fdiff_epochs = " << p.fdiff_epochs << "\n";
  os << "pipeline.augment_flips = " << fmt_bool(p.augment_flips) << "\n";
  os << "pipeline.dgsb = " << fmt_bool(p.flags.dgsb) << "\n";
  os << "pipeline.se = " << fmt_bool(p.flags.se) << "\n";
  os << "pipeline.incdp = " << fmt_bool(p.flags.incdp) << "\n\n";

  os << "synth.image_count = " << synth.image_count << "\n";
  os << "synth.image_size = " << synth.image_size << "\n";
  os << "synth.normal_nuclei = " << synth.normal_nuclei << "\n";
  os << "synth.mitoses = " << synth.mitoses << "\n";
  os << "synth.impostors = " << synth.impostors << "\n";
  os << "synth.radius_min = " << fmt(synth.radius_min) << "\n";
  os << "synth.radius_max = " << fmt(synth.radius_max) << "\n";
  os << "synth.min_separation = " << fmt(synth.min_separation) << "\n";
  os << "synth.low_intensity_fraction = " << fmt(synth.low_intensity_fraction) << "\n";
  os << "synth.train_fraction = " << fmt(synth.train_fraction) << "\n";
  os << "synth.stain_jitter_deg = " << fmt(synth.stain_jitter_deg) << "\n";
  return os.str();
}

}  // namespace mitdet
