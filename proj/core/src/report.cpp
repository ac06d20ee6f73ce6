#include <cstdio>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mitdet/error.hpp"
#include "mitdet/pipeline.hpp"

namespace mitdet {

using nlohmann::json;

std::string detections_to_json(const std::vector<DetectionResult>& detections) {
  json doc = json::array();
  for (const auto& d : detections) {
    json pts = json::array();
    for (const auto& p : d.points) pts.push_back({{"x", p.x}, {"y", p.y}, {"score", p.score}});
    doc.push_back({{"image_id", d.image_id}, {"points", std::move(pts)}});
  }
  return doc.dump(2) + "\n";
}

std::vector<DetectionResult> detections_from_json(const std::string& text) {
  std::vector<DetectionResult> out;
  try {
    const json doc = json::parse(text);
    for (const auto& e : doc) {
      DetectionResult d;
      d.image_id = e.at("image_id").get<std::string>();
      for (const auto& p : e.at("points")) {
        d.points.push_back({p.at("x").get<double>(), p.at("y").get<double>(),
                            p.at("score").get<double>()});
      }
      out.push_back(std::move(d));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kMalformedJson, e.what());
  }
  return out;
}

std::string metrics_to_json(const EvalReport& report) {
  json doc = {{"precision", report.metrics.precision},
              {"recall", report.metrics.recall},
              {"f1", report.metrics.f1},
              {"tp", report.match.tp},
              {"fp", report.match.fp},
              {"fn", report.match.fn}};
  return doc.dump(2) + "\n";
}

std::string history_to_csv(const std::vector<EpochLoss>& history) {
  std::ostringstream os;
  os << "epoch,L_focal_p,L_center_p,L_focal_c,L_center_c,total\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
  };
  for (const auto& h : history) {
    os << h.epoch << "," << num(h.focal_parent) << "," << num(h.center_parent) << ","
       << (h.focal_child ? num(*h.focal_child) : "") << ","
       << (h.center_child ? num(*h.center_child) : "") << "," << num(h.total) << "\n";
  }
  return os.str();
}

std::string ablation_to_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-6s %-4s %-5s %-8s %-8s %-8s\n", "DGSB", "SE", "InCDP",
                "F1", "Recall", "Prec");
  os << buf;
  auto mark = [](bool b) { return b ? "x" : "-"; };
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-6s %-4s %-5s %-8.4f %-8.4f %-8.4f\n", mark(r.flags.dgsb),
                  mark(r.flags.se), mark(r.flags.incdp), r.metrics.f1, r.metrics.recall,
                  r.metrics.precision);
    os << buf;
  }
  return os.str();
}

std::string ablation_to_json(const std::vector<AblationRow>& rows) {
  json doc = json::array();
  for (const auto& r : rows) {
    doc.push_back({{"dgsb", r.flags.dgsb},
                   {"se", r.flags.se},
                   {"incdp", r.flags.incdp},
                   {"precision", r.metrics.precision},
                   {"recall", r.metrics.recall},
                   {"f1", r.metrics.f1},
                   {"tp", r.match.tp},
                   {"fp", r.match.fp},
                   {"fn", r.match.fn}});
  }
  return doc.dump(2) + "\n";
}

}  // namespace mitdet
