#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crossmark/common.hpp"

namespace crossmark {

// One attacked-path measurement. psnr_db here is the distortion the attack
// itself inflicts, i.e. PSNR(marked, attacked), averaged over the images.
struct MetricEntry {
  std::string noise;
  double level = 0.0;
  double brr_percent = 0.0;
  double psnr_db = 0.0;  // +inf allowed
};

// Evaluation result. Top-level psnr_db is embedding fidelity PSNR(cover,
// marked) and brr_percent the clean-path recovery rate; entries hold the
// per-(noise, level) attacked results. BRR aggregates matching bits across
// the whole dataset before taking the percentage.
struct MetricReport {
  double psnr_db = 0.0;
  double brr_percent = 0.0;
  std::vector<MetricEntry> entries;

  nlohmann::json to_json() const;
  // Header noise,level,brr_percent,psnr_db; first data row is the clean path
  // (noise "none"), then one row per entry. +inf serializes as "inf".
  std::string to_csv() const;

  static MetricReport from_json(const nlohmann::json& j);
};

// Schema check for report JSON ("crossmark-report-v1"); ConfigError on any
// violation. Documented in docs/formats.md.
void validate_report_json(const nlohmann::json& j);

// Schema check for the CSV rendering (header, row shape, numeric fields).
void validate_report_csv(const std::string& csv);

// Writes both renderings (json_path/csv_path skipped when empty).
void write_report(const MetricReport& report, const std::string& json_path,
                  const std::string& csv_path);

}  // namespace crossmark
