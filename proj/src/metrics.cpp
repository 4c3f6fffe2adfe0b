#include "ssmcyto/metrics.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>

#include "ssmcyto/error.hpp"

namespace fs = std::filesystem;

namespace ssmcyto {

Confusion confusion_matrix(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t n_classes) {
  if (truth.size() != predicted.size()) throw ContractError("confusion_matrix: label vectors differ in length");
  Confusion m(n_classes, std::vector<std::uint64_t>(n_classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (int v : {truth[i], predicted[i]})
      if (v < 0 || static_cast<std::size_t>(v) >= n_classes) {
        throw ContractError("confusion_matrix: label " + std::to_string(v) + " outside [0, " +
                            std::to_string(n_classes) + ")");
      }
    ++m[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predicted[i])];
  }
  return m;
}

MetricsReport weighted_metrics(const Confusion& confusion, const std::vector<std::string>& class_names) {
  const std::size_t k = confusion.size();
  for (const auto& row : confusion)
    if (row.size() != k) throw ContractError("weighted_metrics: confusion matrix is not square");
  MetricsReport r;
  r.confusion = confusion;
  std::uint64_t total = 0, trace = 0;
  std::vector<std::uint64_t> col(k, 0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      total += confusion[i][j];
      col[j] += confusion[i][j];
      if (i == j) trace += confusion[i][j];
    }
  if (total == 0) throw ContractError("weighted_metrics: no samples were evaluated");
  const double n = static_cast<double>(total);
  r.accuracy = static_cast<double>(trace) / n;
  r.per_class.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    ClassMetrics& m = r.per_class[c];
    for (std::uint64_t v : confusion[c]) m.support += v;
    const double tp = static_cast<double>(confusion[c][c]);
    const std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
    if (col[c] > 0) {
      m.precision = tp / static_cast<double>(col[c]);
    } else {
      r.notes.push_back("class '" + name + "' was never predicted; precision set to 0");
    }
    if (m.support > 0) m.recall = tp / static_cast<double>(m.support);
    m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    const double w = static_cast<double>(m.support) / n;
    r.weighted_precision += w * m.precision;
    r.weighted_sensitivity += w * m.recall;
    r.weighted_f1 += w * m.f1;
  }
  return r;
}

nlohmann::json report_json(const MetricsReport& r, const ReportContext& ctx) {
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& m = r.per_class[c];
    per_class.push_back({{"class", c < ctx.classes.size() ? ctx.classes[c] : std::to_string(c)},
                         {"precision", m.precision},
                         {"recall", m.recall},
                         {"f1", m.f1},
                         {"support", m.support}});
  }
  return {{"accuracy", r.accuracy},
          {"weighted_precision", r.weighted_precision},
          {"weighted_sensitivity", r.weighted_sensitivity},
          {"weighted_f1", r.weighted_f1},
          {"per_class", per_class},
          {"confusion", r.confusion},
          {"notes", r.notes},
          {"classes", ctx.classes},
          {"model", ctx.model},
          {"split", ctx.split},
          {"timestamp", ctx.timestamp}};
}

MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  try {
    r.accuracy = j.at("accuracy").get<double>();
    r.weighted_precision = j.at("weighted_precision").get<double>();
    r.weighted_sensitivity = j.at("weighted_sensitivity").get<double>();
    r.weighted_f1 = j.at("weighted_f1").get<double>();
    r.confusion = j.at("confusion").get<Confusion>();
    r.notes = j.at("notes").get<std::vector<std::string>>();
    for (const auto& pc : j.at("per_class")) {
      r.per_class.push_back({pc.at("precision").get<double>(), pc.at("recall").get<double>(), pc.at("f1").get<double>(),
                             pc.at("support").get<std::uint64_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics report: ") + e.what());
  }
  return r;
}

namespace {

std::ofstream open_output(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  return out;
}

}  // namespace

void emit_report(const MetricsReport& r, const ReportContext& ctx, const std::string& path) {
  std::ofstream out = open_output(path);
  // nlohmann::json objects are std::map backed, so keys come out sorted.
  out << report_json(r, ctx).dump(2) << "\n";
  if (!out) throw IoError("failed writing " + path);
}

void write_confusion_csv(const Confusion& c, const std::vector<std::string>& classes, const std::string& path) {
  std::ofstream out = open_output(path);
  auto name = [&](std::size_t i) { return i < classes.size() ? classes[i] : std::to_string(i); };
  out << "true\\predicted";
  for (std::size_t j = 0; j < c.size(); ++j) out << ',' << name(j);
  out << '\n';
  for (std::size_t i = 0; i < c.size(); ++i) {
    out << name(i);
    for (std::uint64_t v : c[i]) out << ',' << v;
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path);
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace ssmcyto
