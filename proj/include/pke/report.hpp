#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pke/common.hpp"

namespace pke {

/// One table row. Missing cells (a metric that does not apply) render as "-",
/// mirroring the usual results-table convention.
struct MethodRow {
  std::string method;
  std::optional<double> winrate;
  std::optional<double> rouge_l;
  std::optional<double> asr_baseline;
  std::optional<double> asr_adaptive;
};

struct ReportMeta {
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string judge_kind;
  std::string dataset_hash;
};

struct EvalReport {
  std::vector<MethodRow> rows;
  ReportMeta meta;
};

enum class ReportFormat { markdown, json };

namespace detail {
inline void validate_report(const EvalReport& report) {
  if (report.rows.empty())
    throw ValueError("report: no method rows");
  for (const MethodRow& row : report.rows) {
    if (row.method.empty()) throw ValueError("report: row with empty method name");
    for (const auto& cell :
         {row.winrate, row.rouge_l, row.asr_baseline, row.asr_adaptive})
      if (cell && (*cell < 0.0 || *cell > 1.0))
        throw ValueError("report: proportion outside [0,1] in row " + row.method);
  }
}

inline std::string cell(const std::optional<double>& v) {
  return v ? format_percent(*v) : std::string("-");
}

inline nlohmann::json cell_json(const std::optional<double>& v) {
  if (!v) return nullptr;
  return *v;
}

inline std::optional<double> cell_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}
}  // namespace detail

inline nlohmann::json report_to_json(const EvalReport& report) {
  detail::validate_report(report);
  nlohmann::json rows = nlohmann::json::array();
  for (const MethodRow& row : report.rows) {
    rows.push_back({{"method", row.method},
                    {"winrate", detail::cell_json(row.winrate)},
                    {"rouge_l", detail::cell_json(row.rouge_l)},
                    {"asr_baseline", detail::cell_json(row.asr_baseline)},
                    {"asr_adaptive", detail::cell_json(row.asr_adaptive)}});
  }
  return nlohmann::json{{"rows", rows},
                        {"meta",
                         {{"seed", report.meta.seed},
                          {"config_hash", report.meta.config_hash},
                          {"judge_kind", report.meta.judge_kind},
                          {"dataset_hash", report.meta.dataset_hash}}}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport report;
  try {
    for (const auto& r : j.at("rows")) {
      MethodRow row;
      row.method = r.at("method").get<std::string>();
      row.winrate = detail::cell_from_json(r.at("winrate"));
      row.rouge_l = detail::cell_from_json(r.at("rouge_l"));
      row.asr_baseline = detail::cell_from_json(r.at("asr_baseline"));
      row.asr_adaptive = detail::cell_from_json(r.at("asr_adaptive"));
      report.rows.push_back(std::move(row));
    }
    const auto& meta = j.at("meta");
    report.meta.seed = meta.at("seed").get<std::uint64_t>();
    report.meta.config_hash = meta.at("config_hash").get<std::string>();
    report.meta.judge_kind = meta.at("judge_kind").get<std::string>();
    report.meta.dataset_hash = meta.at("dataset_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("report: ") + e.what());
  }
  detail::validate_report(report);
  return report;
}

/// Markdown grid with the canonical column order: Winrate, Rouge-L, ASR
/// baseline, ASR adaptive. Percentages carry two decimals ("67.00%").
inline std::string render_report_markdown(const EvalReport& report) {
  detail::validate_report(report);
  std::string out;
  out += "| Method | Winrate | Rouge-L | ASR (baseline) | ASR (adaptive) |\n";
  out += "|---|---|---|---|---|\n";
  for (const MethodRow& row : report.rows) {
    out += "| " + row.method + " | " + detail::cell(row.winrate) + " | " +
           detail::cell(row.rouge_l) + " | " + detail::cell(row.asr_baseline) +
           " | " + detail::cell(row.asr_adaptive) + " |\n";
  }
  out += "\n";
  out += "judge: " + report.meta.judge_kind +
         ", config: " + report.meta.config_hash +
         ", dataset: " + report.meta.dataset_hash +
         ", seed: " + std::to_string(report.meta.seed) + "\n";
  return out;
}

inline std::string render_report(const EvalReport& report, ReportFormat format) {
  if (format == ReportFormat::markdown) return render_report_markdown(report);
  return report_to_json(report).dump(2) + "\n";
}

}  // namespace pke
