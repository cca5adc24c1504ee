#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "advg/features.hpp"
#include "advg/model.hpp"

namespace advg {

struct RocPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
};

// Exact ROC from sweeping every distinct score as a threshold (predict
// malware iff score >= threshold). Points are ordered by ascending fpr and
// always include (0,0) at threshold +inf and (1,1) at the minimum score.
struct RocCurve {
  std::vector<RocPoint> points;
};

RocCurve roc(std::span<const std::pair<double, std::uint8_t>> scored);

// Best tpr among points with fpr <= target_fpr, with its threshold. If no
// real threshold qualifies the result is the (tpr 0, threshold +inf) anchor.
std::pair<double, double> tpr_at_fpr(const RocCurve& curve, double target_fpr);

// Misclassification percentage at the p_M >= 0.5 rule (majority vote for
// ensembles).
double test_error_pct(std::span<const MlpModel> target, const LabeledDataset& data,
                      kernels::Exec ex = kernels::default_exec());

// Scores for ROC evaluation: p_M per sample (mean over ensemble members).
std::vector<std::pair<double, std::uint8_t>> score_dataset(
    std::span<const MlpModel> target, const LabeledDataset& data,
    kernels::Exec ex = kernels::default_exec());

// A named (x, y) series for CSV/SVG rendering.
struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

std::string roc_to_csv(const RocCurve& curve);
RocCurve roc_from_csv(const std::string& text);

// Self-contained SVG line plot. log_x clamps x values below 1e-6.
std::string render_svg(std::span<const Series> series, const std::string& title,
                       const std::string& x_label, const std::string& y_label,
                       bool log_x);

void emit_roc_csv(const RocCurve& curve, const std::filesystem::path& path);
void emit_roc_svg(const RocCurve& curve, const std::string& title,
                  const std::filesystem::path& path, bool log_x = true);
void emit_series_csv(std::span<const Series> series, const std::string& x_name,
                     const std::string& y_name, const std::filesystem::path& path);
void emit_series_svg(std::span<const Series> series, const std::string& title,
                     const std::string& x_label, const std::string& y_label,
                     const std::filesystem::path& path, bool log_x = false);

}  // namespace advg
