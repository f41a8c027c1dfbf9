#pragma once

// Report emission from a run manifest: markdown summary, comparison table as
// CSV and JSON, loss curves as SVG, sample grids as PNG and GIF.

#include <filesystem>
#include <string>
#include <vector>

#include "pose/runner.hpp"

namespace pose {

struct ReportResult {
  std::vector<std::filesystem::path> files;  // relative to the output directory
  std::vector<std::string> warnings;
  size_t table_rows = 0;
  bool empty = false;
};

ReportResult emit_report(const RunManifest& manifest, const std::filesystem::path& root,
                         const std::filesystem::path& out_dir);

// Reads root/manifest.json; a missing manifest yields a "no runs" report.
ReportResult emit_report(const std::filesystem::path& root, const std::filesystem::path& out_dir);

// Two-column loss plot(s) of every numeric key except "step".
std::string loss_curve_svg(const std::vector<nlohmann::json>& rows, const std::string& title);

}  // namespace pose
