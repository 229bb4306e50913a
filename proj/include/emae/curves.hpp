#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "emae/binary_io.hpp"
#include "emae/errors.hpp"
#include "emae/text.hpp"
#include "emae/training.hpp"

namespace emae {

inline constexpr std::string_view kRunLogHeader = "epoch,lr,train_loss,val_loss,wall_ms";

namespace detail {

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  return text::format_double(v);
}

}  // namespace detail

/// RunLog as CSV. With include_timing=false the wall_ms column is written as
/// 0 so that files from identical runs are byte-identical.
inline std::string runlog_csv(const RunLog& log, bool include_timing = true) {
  std::string out(kRunLogHeader);
  out += '\n';
  for (const auto& r : log.epochs) {
    out += std::to_string(r.epoch) + ',' + detail::csv_number(r.lr) + ',' + detail::csv_number(r.train_loss) + ',' +
           detail::csv_number(r.val_loss) + ',' + (include_timing ? text::format_fixed(r.wall_ms, 3) : "0") + '\n';
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& content) {
  io::write_file(path, std::vector<char>(content.begin(), content.end()));
}

struct CurveSeries {
  std::string label;
  /// One value per epoch; NaN entries are skipped.
  std::vector<double> values;
};

/// Series from a RunLog: validation loss if every epoch has one, train loss otherwise.
inline CurveSeries curve_from_log(const RunLog& log, const std::string& label) {
  CurveSeries s{label, {}};
  const bool has_val =
      !log.epochs.empty() && std::none_of(log.epochs.begin(), log.epochs.end(), [](const EpochRecord& r) {
        return std::isnan(r.val_loss);
      });
  for (const auto& r : log.epochs) s.values.push_back(has_val ? r.val_loss : r.train_loss);
  return s;
}

inline std::string curve_label(double ratio, const std::string& decoder) {
  return "r=" + text::format_double(ratio) + "," + decoder;
}

/// Static SVG line chart: epoch on x, loss on y, one polyline per series.
inline std::string render_curves_svg(const std::vector<CurveSeries>& series, const std::string& y_label = "loss") {
  if (series.empty()) throw ContractError("emit_curves needs at least one run log");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t max_len = 0;
  for (const auto& s : series) {
    max_len = std::max(max_len, s.values.size());
    for (double v : s.values) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (max_len == 0 || !std::isfinite(lo)) throw ContractError("emit_curves needs at least one finite loss value");
  if (hi == lo) {
    lo -= 0.5;
    hi += 0.5;
  }
  constexpr double W = 640, H = 400, L = 70, R = 180, T = 20, B = 50;
  const double pw = W - L - R, ph = H - T - B;
  const double x_span = max_len > 1 ? static_cast<double>(max_len - 1) : 1.0;
  auto fx = [&](std::size_t e) { return L + pw * static_cast<double>(e) / x_span; };
  auto fy = [&](double v) { return T + ph * (hi - v) / (hi - lo); };
  auto num = [](double v) { return text::format_fixed(v, 2); };
  static constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" viewBox=\"0 0 640 400\">\n";
  svg += "<rect x=\"0\" y=\"0\" width=\"640\" height=\"400\" fill=\"white\"/>\n";
  svg += "<g stroke=\"black\" stroke-width=\"1\">\n";
  svg += "<line x1=\"" + num(L) + "\" y1=\"" + num(T + ph) + "\" x2=\"" + num(L + pw) + "\" y2=\"" + num(T + ph) + "\"/>\n";
  svg += "<line x1=\"" + num(L) + "\" y1=\"" + num(T) + "\" x2=\"" + num(L) + "\" y2=\"" + num(T + ph) + "\"/>\n";
  svg += "</g>\n";
  svg += "<g font-family=\"sans-serif\" font-size=\"11\">\n";
  svg += "<text x=\"" + num(L - 6) + "\" y=\"" + num(T + 4) + "\" text-anchor=\"end\" class=\"y-max\">" +
         text::format_double(hi) + "</text>\n";
  svg += "<text x=\"" + num(L - 6) + "\" y=\"" + num(T + ph) + "\" text-anchor=\"end\" class=\"y-min\">" +
         text::format_double(lo) + "</text>\n";
  svg += "<text x=\"" + num(L) + "\" y=\"" + num(T + ph + 16) + "\" text-anchor=\"middle\">0</text>\n";
  svg += "<text x=\"" + num(L + pw) + "\" y=\"" + num(T + ph + 16) + "\" text-anchor=\"middle\">" +
         std::to_string(max_len - 1) + "</text>\n";
  svg += "<text x=\"" + num(L + pw / 2) + "\" y=\"" + num(H - 12) + "\" text-anchor=\"middle\">epoch</text>\n";
  svg += "<text x=\"16\" y=\"" + num(T + ph / 2) + "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " +
         num(T + ph / 2) + ")\">" + y_label + "</text>\n";
  svg += "</g>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const std::string color = kColors[i % std::size(kColors)];
    std::string pts;
    for (std::size_t e = 0; e < s.values.size(); ++e) {
      if (!std::isfinite(s.values[e])) continue;
      if (!pts.empty()) pts += ' ';
      pts += num(fx(e)) + ',' + num(fy(s.values[e]));
    }
    svg += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    const double ly = T + 14.0 * static_cast<double>(i) + 8.0;
    svg += "<line x1=\"" + num(L + pw + 12) + "\" y1=\"" + num(ly) + "\" x2=\"" + num(L + pw + 32) + "\" y2=\"" +
           num(ly) + "\" stroke=\"" + color + "\" stroke-width=\"1.5\"/>\n";
    svg += "<text x=\"" + num(L + pw + 36) + "\" y=\"" + num(ly + 4) +
           "\" font-family=\"sans-serif\" font-size=\"11\">" + s.label + "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

inline void emit_curves(const std::vector<CurveSeries>& series, const std::filesystem::path& path) {
  write_text(path, render_curves_svg(series));
}

}  // namespace emae
