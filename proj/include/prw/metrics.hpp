#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "prw/config.hpp"

namespace prw {

inline ojson metrics_to_json(const MetricsRecord& r, bool with_wall_time) {
  ojson j;
  j["step"] = r.step;
  j["stage"] = r.stage;
  j["l_task"] = r.l_task;
  j["l_veteran"] = r.l_veteran;
  j["u_hard"] = r.u_hard;
  j["u_soft"] = r.u_soft;
  j["expert_histogram"] = r.expert_histogram;
  if (with_wall_time) j["wall_ms"] = r.wall_ms;
  return j;
}

inline MetricsRecord metrics_from_json(const ojson& j) {
  MetricsRecord r;
  r.step = j.at("step");
  r.stage = j.at("stage");
  r.l_task = j.at("l_task");
  r.l_veteran = j.at("l_veteran");
  r.u_hard = j.at("u_hard");
  r.u_soft = j.at("u_soft");
  r.expert_histogram = j.at("expert_histogram").get<std::vector<double>>();
  if (j.contains("wall_ms")) r.wall_ms = j.at("wall_ms");
  return r;
}

// Appends one JSON object per line and flushes so partial runs stay parseable.
// Wall time is excluded unless requested, keeping reruns byte-identical.
class MetricsWriter {
 public:
  MetricsWriter(const fs::path& path, bool with_wall_time, bool append = false)
      : out_(path, append ? std::ios::app : std::ios::trunc), wall_(with_wall_time), path_(path) {
    if (!out_) throw IoError("cannot open metrics file " + path.string());
  }

  void write(const MetricsRecord& r) {
    double sum = 0.0;
    for (double h : r.expert_histogram) sum += h;
    if (std::fabs(sum - 1.0) > 1e-9) throw Error("metrics: expert histogram sums to " + std::to_string(sum));
    out_ << metrics_to_json(r, wall_).dump() << '\n';
    out_.flush();
    if (!out_) throw IoError("write failed: " + path_.string());
  }

 private:
  std::ofstream out_;
  bool wall_;
  fs::path path_;
};

inline std::vector<MetricsRecord> read_metrics(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file " + path.string());
  std::vector<MetricsRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(metrics_from_json(ojson::parse(line)));
    } catch (const ojson::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

// Trailing moving average with the given window.
inline std::vector<double> moving_average(const std::vector<double>& xs, std::size_t window) {
  std::vector<double> out;
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    acc += xs[i];
    if (i >= window) acc -= xs[i - window];
    out.push_back(acc / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

}  // namespace prw
