#include "advg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "advg/errors.hpp"
#include "advg/io_util.hpp"
#include "advg/train.hpp"

namespace advg {

RocCurve roc(std::span<const std::pair<double, std::uint8_t>> scored) {
  std::size_t n_pos = 0, n_neg = 0;
  for (const auto& [score, label] : scored) (label ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0)
    throw ContractError("roc: both classes must be present");

  std::vector<std::pair<double, std::uint8_t>> sorted(scored.begin(), scored.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });

  RocCurve curve;
  curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < sorted.size()) {
    const double threshold = sorted[i].first;
    // Absorb the whole tie group: predictions use score >= threshold.
    while (i < sorted.size() && sorted[i].first == threshold) {
      (sorted[i].second ? tp : fp)++;
      ++i;
    }
    curve.points.push_back({threshold,
                            static_cast<double>(fp) / static_cast<double>(n_neg),
                            static_cast<double>(tp) / static_cast<double>(n_pos)});
  }
  return curve;
}

std::pair<double, double> tpr_at_fpr(const RocCurve& curve, double target_fpr) {
  if (!(target_fpr >= 0.0 && target_fpr <= 1.0))
    throw ContractError("tpr_at_fpr: target must be in [0,1]");
  if (curve.points.empty()) throw ContractError("tpr_at_fpr: empty curve");
  double best_tpr = 0.0;
  double best_threshold = std::numeric_limits<double>::infinity();
  for (const auto& p : curve.points) {
    if (p.fpr > target_fpr) continue;
    if (p.tpr > best_tpr || (p.tpr == best_tpr && p.threshold < best_threshold)) {
      best_tpr = p.tpr;
      best_threshold = p.threshold;
    }
  }
  return {best_tpr, best_threshold};
}

std::vector<std::pair<double, std::uint8_t>> score_dataset(
    std::span<const MlpModel> target, const LabeledDataset& data,
    kernels::Exec ex) {
  if (target.empty()) throw ContractError("score_dataset: empty target");
  std::vector<std::pair<double, std::uint8_t>> scored(data.size());
  const auto n = static_cast<std::int64_t>(data.size());
  auto score_one = [&](std::int64_t i) {
    const auto& x = data.vectors[static_cast<std::size_t>(i)];
    double pm = 0.0;
    for (const auto& m : target) pm += forward(m, x).p_malware();
    pm /= static_cast<double>(target.size());
    scored[static_cast<std::size_t>(i)] = {pm, data.labels[static_cast<std::size_t>(i)]};
  };
  if (ex == kernels::Exec::parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) score_one(i);
  } else {
    for (std::int64_t i = 0; i < n; ++i) score_one(i);
  }
  return scored;
}

double test_error_pct(std::span<const MlpModel> target, const LabeledDataset& data,
                      kernels::Exec ex) {
  if (target.empty()) throw ContractError("test_error_pct: empty target");
  if (data.size() == 0) throw ContractError("test_error_pct: empty split");
  std::vector<std::uint8_t> wrong(data.size(), 0);
  const auto n = static_cast<std::int64_t>(data.size());
  auto judge = [&](std::int64_t i) {
    const auto& x = data.vectors[static_cast<std::size_t>(i)];
    bool malware;
    if (target.size() == 1)
      malware = forward(target[0], x).p_malware() >= 0.5;
    else
      malware = predict_ensemble(target, x).malware;
    wrong[static_cast<std::size_t>(i)] =
        malware != (data.labels[static_cast<std::size_t>(i)] != 0);
  };
  if (ex == kernels::Exec::parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) judge(i);
  } else {
    for (std::int64_t i = 0; i < n; ++i) judge(i);
  }
  std::size_t count = 0;
  for (auto w : wrong) count += w;
  return 100.0 * static_cast<double>(count) / static_cast<double>(data.size());
}

std::string roc_to_csv(const RocCurve& curve) {
  if (curve.points.empty()) throw ContractError("roc_to_csv: empty curve");
  std::string out = "threshold,fpr,tpr\n";
  for (const auto& p : curve.points) {
    out += fmt_double(p.threshold);
    out += ',';
    out += fmt_double(p.fpr);
    out += ',';
    out += fmt_double(p.tpr);
    out += '\n';
  }
  return out;
}

RocCurve roc_from_csv(const std::string& text) {
  RocCurve curve;
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1) {
      if (line != "threshold,fpr,tpr") throw ParseError("bad ROC CSV header");
      continue;
    }
    const auto fields = split(line, ',');
    if (fields.size() != 3) throw ParseError("bad ROC CSV row");
    curve.points.push_back(
        {parse_double(fields[0]), parse_double(fields[1]), parse_double(fields[2])});
  }
  return curve;
}

namespace {

constexpr double kLogFloor = 1e-6;

struct PlotBox {
  double x0, x1, y0, y1;                  // data range
  double px0 = 70, px1 = 620, py0 = 40, py1 = 420;  // pixel range (y flipped)
  bool log_x = false;

  double map_x(double x) const {
    double t;
    if (log_x) {
      const double lo = std::log10(x0), hi = std::log10(x1);
      t = (std::log10(std::max(x, kLogFloor)) - lo) / (hi - lo);
    } else {
      t = (x - x0) / (x1 - x0);
    }
    return px0 + t * (px1 - px0);
  }
  double map_y(double y) const {
    const double t = (y - y0) / (y1 - y0);
    return py1 - t * (py1 - py0);
  }
};

std::string fmt_coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string fmt_tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                          "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};

}  // namespace

std::string render_svg(std::span<const Series> series, const std::string& title,
                       const std::string& x_label, const std::string& y_label,
                       bool log_x) {
  if (series.empty()) throw ContractError("render_svg: no series");
  for (const auto& s : series)
    if (s.points.empty()) throw ContractError("render_svg: empty series");

  PlotBox box{std::numeric_limits<double>::infinity(),
              -std::numeric_limits<double>::infinity(),
              std::numeric_limits<double>::infinity(),
              -std::numeric_limits<double>::infinity()};
  box.log_x = log_x;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      const double cx = log_x ? std::max(x, kLogFloor) : x;
      box.x0 = std::min(box.x0, cx);
      box.x1 = std::max(box.x1, cx);
      box.y0 = std::min(box.y0, y);
      box.y1 = std::max(box.y1, y);
    }
  if (box.x0 == box.x1) box.x1 = box.x0 + 1.0;
  if (box.y0 == box.y1) box.y1 = box.y0 + 1.0;

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"660\" height=\"480\" "
         "viewBox=\"0 0 660 480\">\n";
  svg += "<rect width=\"660\" height=\"480\" fill=\"white\"/>\n";
  svg += "<text x=\"330\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"15\">" + title + "</text>\n";

  // Axes.
  svg += "<line x1=\"" + fmt_coord(box.px0) + "\" y1=\"" + fmt_coord(box.py1) +
         "\" x2=\"" + fmt_coord(box.px1) + "\" y2=\"" + fmt_coord(box.py1) +
         "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + fmt_coord(box.px0) + "\" y1=\"" + fmt_coord(box.py0) +
         "\" x2=\"" + fmt_coord(box.px0) + "\" y2=\"" + fmt_coord(box.py1) +
         "\" stroke=\"black\"/>\n";

  // Ticks: decades when log, 5 equal steps otherwise.
  if (log_x) {
    const int lo = static_cast<int>(std::floor(std::log10(box.x0)));
    const int hi = static_cast<int>(std::ceil(std::log10(box.x1)));
    for (int e = lo; e <= hi; ++e) {
      const double x = std::pow(10.0, e);
      if (x < box.x0 * 0.999 || x > box.x1 * 1.001) continue;
      const double px = box.map_x(x);
      svg += "<line x1=\"" + fmt_coord(px) + "\" y1=\"" + fmt_coord(box.py1) +
             "\" x2=\"" + fmt_coord(px) + "\" y2=\"" + fmt_coord(box.py1 + 5) +
             "\" stroke=\"black\"/>\n";
      svg += "<text x=\"" + fmt_coord(px) + "\" y=\"" + fmt_coord(box.py1 + 18) +
             "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" +
             fmt_tick(x) + "</text>\n";
    }
  } else {
    for (int i = 0; i <= 5; ++i) {
      const double x = box.x0 + (box.x1 - box.x0) * i / 5.0;
      const double px = box.map_x(x);
      svg += "<line x1=\"" + fmt_coord(px) + "\" y1=\"" + fmt_coord(box.py1) +
             "\" x2=\"" + fmt_coord(px) + "\" y2=\"" + fmt_coord(box.py1 + 5) +
             "\" stroke=\"black\"/>\n";
      svg += "<text x=\"" + fmt_coord(px) + "\" y=\"" + fmt_coord(box.py1 + 18) +
             "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" +
             fmt_tick(x) + "</text>\n";
    }
  }
  for (int i = 0; i <= 5; ++i) {
    const double y = box.y0 + (box.y1 - box.y0) * i / 5.0;
    const double py = box.map_y(y);
    svg += "<line x1=\"" + fmt_coord(box.px0 - 5) + "\" y1=\"" + fmt_coord(py) +
           "\" x2=\"" + fmt_coord(box.px0) + "\" y2=\"" + fmt_coord(py) +
           "\" stroke=\"black\"/>\n";
    svg += "<text x=\"" + fmt_coord(box.px0 - 9) + "\" y=\"" + fmt_coord(py + 4) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
           fmt_tick(y) + "</text>\n";
  }
  svg += "<text x=\"" + fmt_coord((box.px0 + box.px1) / 2) + "\" y=\"460\" "
         "text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" +
         x_label + "</text>\n";
  svg += "<text x=\"18\" y=\"" + fmt_coord((box.py0 + box.py1) / 2) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
         "transform=\"rotate(-90 18 " + fmt_coord((box.py0 + box.py1) / 2) +
         ")\">" + y_label + "</text>\n";

  for (std::size_t si = 0; si < series.size(); ++si) {
    const char* color = kPalette[si % (sizeof(kPalette) / sizeof(kPalette[0]))];
    std::string pts;
    for (auto [x, y] : series[si].points) {
      pts += fmt_coord(box.map_x(log_x ? std::max(x, kLogFloor) : x));
      pts += ',';
      pts += fmt_coord(box.map_y(y));
      pts += ' ';
    }
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
           "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    // Legend.
    const double ly = 50.0 + 16.0 * static_cast<double>(si);
    svg += "<line x1=\"480\" y1=\"" + fmt_coord(ly) + "\" x2=\"505\" y2=\"" +
           fmt_coord(ly) + "\" stroke=\"" + color + "\" stroke-width=\"1.5\"/>\n";
    svg += "<text x=\"510\" y=\"" + fmt_coord(ly + 4) +
           "\" font-family=\"sans-serif\" font-size=\"11\">" + series[si].label +
           "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

void emit_roc_csv(const RocCurve& curve, const std::filesystem::path& path) {
  write_text_file(path, roc_to_csv(curve));
}

void emit_roc_svg(const RocCurve& curve, const std::string& title,
                  const std::filesystem::path& path, bool log_x) {
  if (curve.points.empty()) throw ContractError("emit_roc_svg: empty curve");
  Series s;
  s.label = "ROC";
  for (const auto& p : curve.points) s.points.push_back({p.fpr, p.tpr});
  write_text_file(path, render_svg({&s, 1}, title, "false positive rate",
                                   "true positive rate", log_x));
}

void emit_series_csv(std::span<const Series> series, const std::string& x_name,
                     const std::string& y_name, const std::filesystem::path& path) {
  if (series.empty()) throw ContractError("emit_series_csv: no series");
  std::string out = "series," + x_name + "," + y_name + "\n";
  for (const auto& s : series) {
    if (s.points.empty()) throw ContractError("emit_series_csv: empty series");
    for (auto [x, y] : s.points) {
      out += s.label;
      out += ',';
      out += fmt_double(x);
      out += ',';
      out += fmt_double(y);
      out += '\n';
    }
  }
  write_text_file(path, out);
}

void emit_series_svg(std::span<const Series> series, const std::string& title,
                     const std::string& x_label, const std::string& y_label,
                     const std::filesystem::path& path, bool log_x) {
  write_text_file(path, render_svg(series, title, x_label, y_label, log_x));
}

}  // namespace advg
