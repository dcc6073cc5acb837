#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <fmt/format.h>

#include "json.hpp"
#include "plab/core/error.hpp"
#include "plab/harness/experiment.hpp"
#include "plab/stats/stats.hpp"

namespace plab {

inline constexpr const char* kUndefined = "NA";

/// RFC 4180 writer: CRLF line endings, fields quoted when needed.
class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : os_(path, std::ios::binary), path_(path) {
    if (!os_) throw IoError("cannot open '" + path + "' for writing");
  }

  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) os_ << ',';
      os_ << escape(fields[i]);
    }
    os_ << "\r\n";
    if (!os_) throw IoError("failed writing '" + path_ + "'");
  }

  static std::string escape(const std::string& f) {
    if (f.find_first_of(",\"\r\n") == std::string::npos) return f;
    std::string out = "\"";
    for (char c : f) {
      if (c == '"') out += '"';
      out += c;
    }
    return out + "\"";
  }

 private:
  std::ofstream os_;
  std::string path_;
};

inline std::string num(double v) { return fmt::format("{:.6g}", v); }

inline std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : kUndefined; }

/// Equal-step slope divided by standard slope; undefined when the standard slope is zero.
inline std::optional<double> slope_ratio(double alpha_equal, double alpha_standard) {
  if (alpha_standard == 0.0 || !std::isfinite(alpha_standard)) return std::nullopt;
  return alpha_equal / alpha_standard;
}

inline std::string depth_label(double d) { return fmt::format("d{:.2f}", d); }

struct SvgSeries {
  std::string label;
  std::vector<double> xs;
  std::vector<double> ys;
};

/// Line plot with a log10 y axis. Values at or below zero are drawn at `floor`.
inline std::string svg_line_plot(const std::string& title, const std::vector<SvgSeries>& series, double floor = 1e-6) {
  constexpr double W = 640, H = 420, L = 70, R = 170, T = 40, B = 50;
  double ymin = std::numeric_limits<double>::infinity(), ymax = -ymin;
  for (const auto& s : series) {
    for (double y : s.ys) {
      const double v = std::log10(std::max(y, floor));
      ymin = std::min(ymin, v);
      ymax = std::max(ymax, v);
    }
  }
  if (!std::isfinite(ymin)) ymin = ymax = 0.0;
  ymin = std::floor(ymin);
  ymax = std::ceil(ymax);
  if (ymax <= ymin) ymax = ymin + 1.0;
  auto px = [&](double x) { return L + x * (W - L - R); };
  auto py = [&](double y) { return T + (ymax - std::log10(std::max(y, floor))) / (ymax - ymin) * (H - T - B); };
  static constexpr const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                            "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << R"(<svg xmlns="http://www.w3.org/2000/svg" version="1.1" )"
     << fmt::format("width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n", W, H, W, H)
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << fmt::format("<text x=\"{}\" y=\"22\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n", L, title);
  // axes
  os << fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n", L, H - B, W - R, H - B)
     << fmt::format("<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n", L, T, L, H - B);
  for (int e = static_cast<int>(ymin); e <= static_cast<int>(ymax); ++e) {
    const double y = T + (ymax - e) / (ymax - ymin) * (H - T - B);
    os << fmt::format("<line x1=\"{}\" y1=\"{:.2f}\" x2=\"{}\" y2=\"{:.2f}\" stroke=\"#ddd\"/>\n", L, y, W - R, y)
       << fmt::format("<text x=\"{}\" y=\"{:.2f}\" font-family=\"sans-serif\" font-size=\"11\" "
                      "text-anchor=\"end\">1e{}</text>\n",
                      L - 6, y + 4, e);
  }
  for (int i = 0; i <= 10; i += 2) {
    const double x = px(i / 10.0);
    os << fmt::format("<text x=\"{:.2f}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" "
                      "text-anchor=\"middle\">{:.1f}</text>\n",
                      x, H - B + 16, i / 10.0);
  }
  os << fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" "
                    "text-anchor=\"middle\">relative depth</text>\n",
                    (L + W - R) / 2, H - 12);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = palette[k % std::size(palette)];
    std::string pts;
    for (std::size_t i = 0; i < s.xs.size(); ++i) pts += fmt::format("{:.2f},{:.2f} ", px(s.xs[i]), py(s.ys[i]));
    os << fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n", color, pts);
    os << fmt::format("<g class=\"series\" data-label=\"{}\">\n", s.label);
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      os << fmt::format("<circle class=\"point\" cx=\"{:.2f}\" cy=\"{:.2f}\" r=\"3\" fill=\"{}\"/>\n", px(s.xs[i]),
                        py(s.ys[i]), color);
    }
    os << "</g>\n";
    const double ly = T + 16.0 * static_cast<double>(k);
    os << fmt::format("<rect x=\"{}\" y=\"{:.2f}\" width=\"12\" height=\"3\" fill=\"{}\"/>\n", W - R + 12, ly, color)
       << fmt::format("<text x=\"{}\" y=\"{:.2f}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
                      W - R + 30, ly + 4, s.label);
  }
  os << "</svg>\n";
  return os.str();
}

struct ReportFiles {
  std::vector<std::string> csv;
  std::vector<std::string> svg;
};

/// Writes the CSV tables and SVG profile plots for a set of run records.
/// `distances` maps model name to a serialized DistanceReport (optional).
inline ReportFiles emit_report(const std::vector<RunRecord>& records, const std::string& dir,
                               const std::map<std::string, nlohmann::json>& distances = {}) {
  namespace fs = std::filesystem;
  if (records.empty()) throw Error("no run records to report");
  fs::create_directories(dir);
  ReportFiles files;
  auto path = [&](const std::string& name) { return (fs::path(dir) / name).string(); };

  std::vector<const RunRecord*> ok;
  for (const auto& r : records) {
    if (r.ok()) ok.push_back(&r);
  }
  std::vector<double> depths;
  for (const auto* r : ok) {
    if (!r->profiles.empty()) {
      depths = r->profiles.begin()->second.depths;
      break;
    }
  }

  {
    CsvWriter w(path("slopes.csv"));
    w.row({"model", "objective", "condition", "seed", "metric", "alpha", "beta", "residual_rms", "status"});
    for (const auto& r : records) {
      if (!r.ok()) {
        w.row({r.model, to_string(r.objective), to_string(r.condition), std::to_string(r.seed), "", kUndefined,
               kUndefined, kUndefined, "failed: " + r.error});
        continue;
      }
      for (const auto& [m, f] : r.slopes) {
        w.row({r.model, to_string(r.objective), to_string(r.condition), std::to_string(r.seed), to_string(m),
               num(f.alpha), num(f.beta), num(f.residual_rms), "ok"});
      }
    }
    files.csv.push_back(path("slopes.csv"));
  }

  // (model, objective, metric) -> condition -> slopes over seeds
  using Key = std::tuple<std::string, ObjectiveKind, MetricKind>;
  std::map<Key, std::map<ConditionKind, std::vector<double>>> by_cell;
  for (const auto* r : ok) {
    for (const auto& [m, f] : r->slopes) by_cell[{r->model, r->objective, m}][r->condition].push_back(f.alpha);
  }
  {
    CsvWriter w(path("slope_ratios.csv"));
    w.row({"model", "objective", "metric", "alpha_standard", "alpha_equal_step", "ratio"});
    for (const auto& [key, conds] : by_cell) {
      auto std_it = conds.find(ConditionKind::standard);
      auto eq_it = conds.find(ConditionKind::equal_step);
      if (std_it == conds.end() || eq_it == conds.end()) continue;
      const double a_std = stats::summarize(std_it->second).mean;
      const double a_eq = stats::summarize(eq_it->second).mean;
      w.row({std::get<0>(key), to_string(std::get<1>(key)), to_string(std::get<2>(key)), num(a_std), num(a_eq),
             opt_num(slope_ratio(a_eq, a_std))});
    }
    files.csv.push_back(path("slope_ratios.csv"));
  }
  {
    CsvWriter w(path("slope_summary.csv"));
    w.row({"model", "objective", "metric", "condition", "n", "alpha_mean", "alpha_std"});
    for (const auto& [key, conds] : by_cell) {
      for (const auto& [c, v] : conds) {
        const auto s = stats::summarize(v);
        w.row({std::get<0>(key), to_string(std::get<1>(key)), to_string(std::get<2>(key)), to_string(c),
               std::to_string(s.count), num(s.mean), num(s.std)});
      }
    }
    files.csv.push_back(path("slope_summary.csv"));
  }
  {
    std::vector<std::string> header{"model", "objective", "condition", "seed"};
    for (double d : depths) header.push_back(depth_label(d));
    header.push_back("final_concentration");
    CsvWriter w(path("normalized_profiles.csv"));
    w.row(header);
    for (const auto* r : ok) {
      if (!r->normalized) continue;
      std::vector<std::string> row{r->model, to_string(r->objective), to_string(r->condition), std::to_string(r->seed)};
      for (double f : r->normalized->fractions) row.push_back(num(f));
      row.push_back(num(r->normalized->final_concentration()));
      w.row(row);
    }
    files.csv.push_back(path("normalized_profiles.csv"));
  }
  {
    std::vector<std::string> header{"metric", "model", "objective", "condition", "seed"};
    for (double d : depths) header.push_back(depth_label(d));
    CsvWriter w(path("depth_profiles.csv"));
    w.row(header);
    for (const auto* r : ok) {
      for (const auto& [m, p] : r->profiles) {
        std::vector<std::string> row{to_string(m), r->model, to_string(r->objective), to_string(r->condition),
                                     std::to_string(r->seed)};
        for (double v : p.values) row.push_back(num(v));
        w.row(row);
      }
    }
    files.csv.push_back(path("depth_profiles.csv"));
  }
  if (!distances.empty()) {
    CsvWriter w(path("distance_vs_slope.csv"));
    w.row({"model", "objective", "gradient_procrustes", "cosine_full", "cosine_jl128", "cosine_jl32", "pearson_means",
           "coherence", "procrustes_slope_standard"});
    for (const auto& [model, report] : distances) {
      std::vector<double> dist, slope;
      for (const auto& e : report.at("objectives")) {
        const ObjectiveKind k = parse_objective(e.at("objective").get<std::string>());
        std::optional<double> alpha;
        auto it = by_cell.find({model, k, MetricKind::procrustes});
        if (it != by_cell.end()) {
          auto c = it->second.find(ConditionKind::standard);
          if (c != it->second.end()) alpha = stats::summarize(c->second).mean;
        }
        auto field = [&](const char* name) {
          return e.at(name).is_null() ? std::string(kUndefined) : num(e.at(name).get<double>());
        };
        w.row({model, to_string(k), field("gradient_procrustes"), field("cosine_full"), field("cosine_jl128"),
               field("cosine_jl32"), field("pearson_means"), field("coherence"), opt_num(alpha)});
      }
    }
    files.csv.push_back(path("distance_vs_slope.csv"));
  }

  // One plot per (model, condition, metric); one series per objective, averaged over seeds.
  std::map<std::tuple<std::string, ConditionKind, MetricKind>, std::map<ObjectiveKind, std::vector<const DepthProfile*>>>
      plots;
  for (const auto* r : ok) {
    for (const auto& [m, p] : r->profiles) plots[{r->model, r->condition, m}][r->objective].push_back(&p);
  }
  for (const auto& [key, per_obj] : plots) {
    const auto& [model, cond, metric] = key;
    std::vector<SvgSeries> series;
    for (const auto& [obj, profiles] : per_obj) {
      SvgSeries s;
      s.label = to_string(obj);
      s.xs = profiles.front()->depths;
      s.ys.assign(s.xs.size(), 0.0);
      for (const auto* p : profiles) {
        for (std::size_t i = 0; i < s.ys.size(); ++i) s.ys[i] += p->values[i] / static_cast<double>(profiles.size());
      }
      series.push_back(std::move(s));
    }
    const std::string name = "profile_" + model + "_" + to_string(cond) + "_" + to_string(metric) + ".svg";
    std::ofstream os(path(name));
    if (!os) throw IoError("cannot write '" + path(name) + "'");
    os << svg_line_plot(model + " / " + to_string(cond) + " / " + to_string(metric), series);
    files.svg.push_back(path(name));
  }
  return files;
}

}  // namespace plab
