#pragma once

// Per-step metrics rows, written as CSV (header + one row per line) and as a
// mirrored JSON-lines stream.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

namespace vila {

struct MetricsRow {
  std::size_t step = 0;
  std::string split;
  std::optional<double> loss_vqa;
  std::optional<double> loss_distill;
  std::optional<double> accuracy;
  std::optional<double> keyframe_recall;
  std::optional<double> selection_overlap;
  std::optional<double> tau;
  std::optional<double> lr;
  std::optional<double> wallclock_ms;
};

inline const char* metrics_header() {
  return "step,split,loss_vqa,loss_distill,accuracy,keyframe_recall,selection_overlap,tau,lr,wallclock_ms";
}

/// RFC 4180 field quoting.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::string to_csv(const MetricsRow& r) {
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  return std::to_string(r.step) + "," + csv_field(r.split) + "," + opt(r.loss_vqa) + "," + opt(r.loss_distill) + "," +
         opt(r.accuracy) + "," + opt(r.keyframe_recall) + "," + opt(r.selection_overlap) + "," + opt(r.tau) + "," +
         opt(r.lr) + "," + opt(r.wallclock_ms);
}

inline nlohmann::json to_json(const MetricsRow& r) {
  nlohmann::json j{{"step", r.step}, {"split", r.split}};
  auto put = [&](const char* k, const std::optional<double>& v) { j[k] = v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  put("loss_vqa", r.loss_vqa);
  put("loss_distill", r.loss_distill);
  put("accuracy", r.accuracy);
  put("keyframe_recall", r.keyframe_recall);
  put("selection_overlap", r.selection_overlap);
  put("tau", r.tau);
  put("lr", r.lr);
  put("wallclock_ms", r.wallclock_ms);
  return j;
}

/// Appends rows to <stem>.csv and <stem>.jsonl. Disabled when constructed
/// with an empty stem.
class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::filesystem::path& stem, bool append = false) {
    const auto csv = stem.string() + ".csv";
    const bool fresh = !append || !std::filesystem::exists(csv);
    csv_.open(csv, fresh ? std::ios::trunc : std::ios::app);
    jsonl_.open(stem.string() + ".jsonl", fresh ? std::ios::trunc : std::ios::app);
    if (!csv_ || !jsonl_) throw std::runtime_error("cannot open metrics files at " + stem.string());
    if (fresh) csv_ << metrics_header() << "\n";
  }

  void write(const MetricsRow& r) {
    if (!csv_.is_open()) return;
    csv_ << to_csv(r) << "\n";
    jsonl_ << to_json(r).dump() << "\n";
  }

  /// JSON-lines only: events that are not metrics rows (clipping, timing).
  void event(const nlohmann::json& j) {
    if (jsonl_.is_open()) jsonl_ << j.dump() << "\n";
  }

  void flush() {
    if (csv_.is_open()) csv_.flush();
    if (jsonl_.is_open()) jsonl_.flush();
  }

 private:
  std::ofstream csv_;
  std::ofstream jsonl_;
};

}  // namespace vila
