#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace ssmcyto {

// Rows are true classes, columns predicted classes.
using Confusion = std::vector<std::vector<std::uint64_t>>;

Confusion confusion_matrix(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t n_classes);

struct ClassMetrics {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  std::uint64_t support = 0;
};

struct MetricsReport {
  double accuracy = 0.0;
  double weighted_precision = 0.0;
  double weighted_sensitivity = 0.0;
  double weighted_f1 = 0.0;
  std::vector<ClassMetrics> per_class;
  Confusion confusion;
  std::vector<std::string> notes;
};

// Support-weighted averages of the per-class metrics. A class nobody predicts
// gets precision 0, recorded in notes. Throws ContractError for N == 0.
MetricsReport weighted_metrics(const Confusion& confusion, const std::vector<std::string>& class_names = {});

struct ReportContext {
  std::vector<std::string> classes;
  std::string model;  // checkpoint or ensemble identifier
  std::string split;
  std::string timestamp;  // injected so reruns are byte-identical
};

nlohmann::json report_json(const MetricsReport& r, const ReportContext& ctx);
MetricsReport report_from_json(const nlohmann::json& j);
// Sorted keys, two-space indentation.
void emit_report(const MetricsReport& r, const ReportContext& ctx, const std::string& path);
// Header row of predicted class names, one line per true class.
void write_confusion_csv(const Confusion& c, const std::vector<std::string>& classes, const std::string& path);

// ISO-8601 UTC, second resolution.
std::string utc_timestamp();

}  // namespace ssmcyto
