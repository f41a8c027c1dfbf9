#include "pose/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "pose/image.hpp"
#include "pose/train_common.hpp"

namespace pose {

namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

std::string slug(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' ? c : '_';
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

struct Column {
  const char* name;
  std::optional<double> EvalReport::*field;
};

const Column kColumns[] = {
    {"composite", &EvalReport::composite},
    {"sliced_wasserstein", &EvalReport::sliced_wasserstein},
    {"mmd_rbf", &EvalReport::mmd_rbf},
    {"feature_sw", &EvalReport::feature_sw},
    {"feature_mmd", &EvalReport::feature_mmd},
    {"motion_smoothness", &EvalReport::motion_smoothness},
    {"subject_consistency", &EvalReport::subject_consistency},
    {"condition_mse", &EvalReport::condition_mse},
    {"dynamic_degree", &EvalReport::dynamic_degree},
};

// Higher composite first; rows without one keep manifest order at the end.
std::vector<const ComparisonRow*> ranked(const ComparisonTable& table, const std::string& group) {
  std::vector<const ComparisonRow*> rows;
  for (const auto& r : table.rows) {
    if (r.group == group) rows.push_back(&r);
  }
  std::stable_sort(rows.begin(), rows.end(), [](const ComparisonRow* a, const ComparisonRow* b) {
    const auto& ca = a->median.composite;
    const auto& cb = b->median.composite;
    if (ca && cb) return *ca > *cb;
    return ca.has_value() && !cb.has_value();
  });
  return rows;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

std::string summary_markdown(const RunManifest& manifest, const ComparisonTable& table,
                             const std::vector<std::string>& groups, const std::vector<std::string>& warnings,
                             const std::vector<fs::path>& figures) {
  std::ostringstream md;
  md << "# Run summary\n\n";
  md << "- spec hash: `" << manifest.spec_hash << "`\n";
  md << "- code version: `" << manifest.code_version << "`\n";
  if (manifest.reference) {
    md << "- composite normalisers (teacher reference): sw " << num(manifest.reference->sw)
       << ", smoothness " << num(manifest.reference->smoothness) << ", condition mse "
       << num(manifest.reference->condition_mse) << "\n";
  }
  md << "\nValues are medians over seeds. Rows are ranked by composite score.\n";
  for (const auto& g : groups) {
    md << "\n## " << g << "\n\n";
    md << "| rank | method | NFE | seeds | composite | SW | MMD | feature SW | smoothness | consistency | cond. MSE | dynamic | time (s) |\n";
    md << "|---:|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|---:|\n";
    int rank = 0;
    for (const auto* r : ranked(table, g)) {
      const auto& m = r->median;
      md << "| " << ++rank << " | " << r->label << " | " << r->nfe << " | " << r->seeds.size() << " | "
         << num(m.composite) << " | " << num(m.sliced_wasserstein) << " | " << num(m.mmd_rbf) << " | "
         << num(m.feature_sw) << " | " << num(m.motion_smoothness) << " | " << num(m.subject_consistency) << " | "
         << num(m.condition_mse) << " | " << num(m.dynamic_degree) << " | " << num(m.wall_time_s) << " |\n";
    }
  }
  if (!figures.empty()) {
    md << "\n## Figures\n\n";
    for (const auto& f : figures) md << "- [" << f.generic_string() << "](" << f.generic_string() << ")\n";
  }
  if (!warnings.empty()) {
    md << "\n## Warnings\n\n";
    for (const auto& w : warnings) md << "- " << w << "\n";
  }
  return md.str();
}

}  // namespace

std::string loss_curve_svg(const std::vector<nlohmann::json>& rows, const std::string& title) {
  std::vector<std::string> keys;
  for (const auto& row : rows) {
    for (const auto& [k, v] : row.items()) {
      if (k != "step" && v.is_number() && std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    }
  }
  std::sort(keys.begin(), keys.end());
  const int width = 640, panel = 140, top = 30;
  const int height = top + panel * static_cast<int>(std::max<size_t>(keys.size(), 1));
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"monospace\" font-size=\"11\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"10\" y=\"18\" font-size=\"13\">" << title << "</text>\n";
  for (size_t p = 0; p < keys.size(); ++p) {
    std::vector<std::pair<double, double>> pts;
    for (size_t i = 0; i < rows.size(); ++i) {
      const auto it = rows[i].find(keys[p]);
      if (it == rows[i].end() || !it->is_number()) continue;
      const double y = it->get<double>();
      if (!std::isfinite(y)) continue;
      const double x = rows[i].contains("step") ? rows[i]["step"].get<double>() : static_cast<double>(i);
      pts.emplace_back(x, y);
    }
    const int y0 = top + static_cast<int>(p) * panel;
    const double left = 70, right = width - 10, ptop = y0 + 16, pbot = y0 + panel - 16;
    svg << "<text x=\"10\" y=\"" << y0 + 12 << "\">" << keys[p] << "</text>\n";
    svg << "<rect x=\"" << left << "\" y=\"" << ptop << "\" width=\"" << right - left << "\" height=\"" << pbot - ptop
        << "\" fill=\"none\" stroke=\"#999\"/>\n";
    if (pts.empty()) continue;
    double xmin = pts.front().first, xmax = xmin, ymin = pts.front().second, ymax = ymin;
    for (const auto& [x, y] : pts) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    svg << "<text x=\"4\" y=\"" << ptop + 10 << "\">" << num(ymax) << "</text>\n";
    svg << "<text x=\"4\" y=\"" << pbot << "\">" << num(ymin) << "</text>\n";
    svg << "<polyline fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"1\" points=\"";
    const size_t stride = std::max<size_t>(1, pts.size() / 600);
    char buf[48];
    for (size_t i = 0; i < pts.size(); i += stride) {
      const double sx = left + (pts[i].first - xmin) / (xmax - xmin) * (right - left);
      const double sy = pbot - (pts[i].second - ymin) / (ymax - ymin) * (pbot - ptop);
      std::snprintf(buf, sizeof(buf), "%.1f,%.1f ", sx, sy);
      svg << buf;
    }
    svg << "\"/>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

ReportResult emit_report(const RunManifest& manifest, const fs::path& root, const fs::path& out_dir) {
  ReportResult result;
  fs::create_directories(out_dir);
  auto table = build_table(manifest, root, &result.warnings);
  result.table_rows = table.rows.size();
  if (table.rows.empty()) {
    result.empty = true;
    write_text(out_dir / "summary.md", "# Run summary\n\nno runs\n");
    write_text(out_dir / "comparison.csv", "group,label,nfe,seeds\n");
    write_text(out_dir / "comparison.json", nlohmann::json{{"status", "no runs"}, {"rows", nlohmann::json::array()}}.dump(2) + "\n");
    result.files = {"summary.md", "comparison.csv", "comparison.json"};
    return result;
  }

  std::vector<std::string> groups;
  for (const auto& r : table.rows) {
    if (std::find(groups.begin(), groups.end(), r.group) == groups.end()) groups.push_back(r.group);
  }

  // Comparison table.
  std::ostringstream csv;
  csv << "group,label,nfe,seeds";
  for (const auto& c : kColumns) csv << "," << c.name;
  csv << ",wall_time_s\n";
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& g : groups) {
    for (const auto* r : ranked(table, g)) {
      csv << csv_field(r->group) << "," << csv_field(r->label) << "," << r->nfe << "," << r->seeds.size();
      for (const auto& c : kColumns) csv << "," << num(r->median.*(c.field));
      csv << "," << num(r->median.wall_time_s) << "\n";
      nlohmann::json per_seed = nlohmann::json::array();
      for (size_t i = 0; i < r->per_seed.size(); ++i) {
        per_seed.push_back({{"seed", r->seeds[i]}, {"report", r->per_seed[i]}});
      }
      rows.push_back({{"group", r->group}, {"label", r->label}, {"nfe", r->nfe}, {"median", r->median}, {"per_seed", per_seed}});
    }
  }

  // Figures: loss curves of every training stage, samples of every evaluation.
  std::vector<fs::path> figures;
  std::map<std::tuple<std::string, std::string, uint64_t>, const ManifestEntry*> trained;
  std::map<std::tuple<std::string, std::string, int64_t>, const ManifestEntry*> evaluated;
  for (const auto& e : manifest.entries) {
    if (e.spec_hash != manifest.spec_hash || (e.status != "done" && e.status != "cached")) continue;
    if (!e.metrics.empty()) trained[{e.stage, e.label, e.seed}] = &e;
    if (e.stage == "eval" && !e.samples.empty()) {
      const auto k = std::make_tuple(e.group, e.label, e.nfe);
      const auto it = evaluated.find(k);
      if (it == evaluated.end() || e.seed < it->second->seed) evaluated[k] = &e;
    }
  }
  if (!trained.empty()) fs::create_directories(out_dir / "curves");
  for (const auto& [k, e] : trained) {
    const auto path = root / e->metrics;
    if (!fs::exists(path)) {
      result.warnings.push_back("missing metrics for " + e->stage + " " + e->label + ": " + e->metrics);
      continue;
    }
    const auto name = fs::path("curves") / (slug(e->stage + "-" + e->label) + "-seed" + std::to_string(e->seed) + ".svg");
    write_text(out_dir / name, loss_curve_svg(read_metrics(path), e->stage + " / " + e->label + " / seed " + std::to_string(e->seed)));
    figures.push_back(name);
  }
  if (!evaluated.empty()) fs::create_directories(out_dir / "samples");
  for (const auto& [k, e] : evaluated) {
    const auto path = root / e->samples;
    if (!fs::exists(path)) {
      result.warnings.push_back("missing samples for " + e->label + ": " + e->samples);
      continue;
    }
    torch::Tensor clips;
    torch::load(clips, path.string());
    const auto stem = slug(e->group + "-" + e->label) + "-nfe" + std::to_string(e->nfe);
    write_png_grid(out_dir / "samples" / (stem + ".png"), clips);
    write_gif(out_dir / "samples" / (stem + ".gif"), clips);
    figures.push_back(fs::path("samples") / (stem + ".png"));
    figures.push_back(fs::path("samples") / (stem + ".gif"));
  }

  write_text(out_dir / "comparison.csv", csv.str());
  write_text(out_dir / "comparison.json",
             nlohmann::json{{"spec_hash", manifest.spec_hash},
                            {"code_version", manifest.code_version},
                            {"reference", manifest.reference ? nlohmann::json(*manifest.reference) : nlohmann::json(nullptr)},
                            {"rows", rows},
                            {"warnings", result.warnings}}
                     .dump(2) +
                 "\n");
  write_text(out_dir / "summary.md", summary_markdown(manifest, table, groups, result.warnings, figures));
  result.files = {"summary.md", "comparison.csv", "comparison.json"};
  result.files.insert(result.files.end(), figures.begin(), figures.end());
  return result;
}

ReportResult emit_report(const fs::path& root, const fs::path& out_dir) {
  if (!fs::exists(root / "manifest.json")) return emit_report(RunManifest{}, root, out_dir);
  return emit_report(load_manifest(root / "manifest.json"), root, out_dir);
}

}  // namespace pose
