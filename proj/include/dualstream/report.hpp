#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualstream/fsutil.hpp"
#include "dualstream/metrics.hpp"
#include "dualstream/npy.hpp"

namespace dualstream {

namespace detail {

inline std::string fmt(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline const char* palette(std::size_t i) {
  static const char* colours[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  return colours[i % 8];
}

}  // namespace detail

/// One row per run, values in percent. The best value in each metric column
/// carries a trailing '*' (every tied value is marked).
inline std::string reports_csv(const std::vector<RunReport>& reports) {
  struct Column {
    const char* name;
    double (*get)(const RunReport&);
  };
  static const Column metric_cols[] = {
      {"val_acc", [](const RunReport& r) { return r.val_accuracy; }},
      {"test_acc", [](const RunReport& r) { return r.test_accuracy; }},
      {"macro_f1", [](const RunReport& r) { return r.macro_f1; }},
      {"top1", [](const RunReport& r) { return r.top_k.count(1) ? r.top_k.at(1) : 0.0; }},
      {"top2", [](const RunReport& r) { return r.top_k.count(2) ? r.top_k.at(2) : 0.0; }},
      {"top3", [](const RunReport& r) { return r.top_k.count(3) ? r.top_k.at(3) : 0.0; }},
      {"top5", [](const RunReport& r) { return r.top_k.count(5) ? r.top_k.at(5) : 0.0; }},
  };
  std::ostringstream out;
  out << "config";
  for (const auto& c : metric_cols) out << "," << c.name;
  out << ",alpha_rgb,alpha_flow,epochs_run,early_stopped\n";
  std::vector<double> best(std::size(metric_cols), -1.0);
  for (const auto& r : reports)
    for (std::size_t c = 0; c < std::size(metric_cols); ++c) best[c] = std::max(best[c], metric_cols[c].get(r));
  for (const auto& r : reports) {
    out << r.config_id;
    for (std::size_t c = 0; c < std::size(metric_cols); ++c) {
      const double v = metric_cols[c].get(r);
      out << "," << detail::fmt(100 * v) << (v == best[c] ? "*" : "");
    }
    if (r.weights) out << "," << detail::fmt(r.weights->first, 4) << "," << detail::fmt(r.weights->second, 4);
    else out << ",,";
    out << "," << r.epochs_run << "," << (r.early_stopped ? "true" : "false") << "\n";
  }
  return out.str();
}

inline std::string training_log_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out << "epoch,train_loss,train_acc,val_acc,lr\n";
  char buf[160];
  for (const auto& e : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.8g\n", e.epoch, e.train_loss, e.train_acc, e.val_acc, e.lr);
    out << buf;
  }
  return out.str();
}

/// Row-normalised heatmap with one <rect class="cell"> per (true, predicted) pair.
inline std::string confusion_svg(const ConfusionMatrix& m, const std::vector<std::string>& classes,
                                 const std::string& title) {
  const auto norm = m.normalized();
  const int cell = 48, left = 150, top = 40;
  const int C = static_cast<int>(m.classes);
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << left + C * cell + 20 << "\" height=\""
    << top + C * cell + 120 << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<text x=\"" << left << "\" y=\"20\" font-size=\"14\">" << detail::xml_escape(title) << "</text>\n";
  for (int t = 0; t < C; ++t) {
    const std::string name = t < static_cast<int>(classes.size()) ? classes[static_cast<std::size_t>(t)] : std::to_string(t);
    s << "<text x=\"" << left - 6 << "\" y=\"" << top + t * cell + cell / 2 + 4 << "\" text-anchor=\"end\">"
      << detail::xml_escape(name) << "</text>\n";
    s << "<text transform=\"translate(" << left + t * cell + cell / 2 + 4 << "," << top + C * cell + 8
      << ") rotate(60)\">" << detail::xml_escape(name) << "</text>\n";
    for (int p = 0; p < C; ++p) {
      const double v = norm[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
      const int shade = static_cast<int>(std::lround(255 * (1 - v)));
      s << "<rect class=\"cell\" x=\"" << left + p * cell << "\" y=\"" << top + t * cell << "\" width=\"" << cell
        << "\" height=\"" << cell << "\" fill=\"rgb(" << shade << "," << shade << ",255)\" stroke=\"#999\"/>\n";
      s << "<text x=\"" << left + p * cell + cell / 2 << "\" y=\"" << top + t * cell + cell / 2 + 4
        << "\" text-anchor=\"middle\" fill=\"" << (v > 0.5 ? "white" : "black") << "\">" << detail::fmt(v) << "</text>\n";
    }
  }
  s << "</svg>\n";
  return s.str();
}

struct Series {
  std::string label;
  std::vector<double> values;
};

/// Simple line chart, x = epoch (1-based).
inline std::string line_chart_svg(const std::vector<Series>& series, const std::string& title, const std::string& y_label) {
  const int W = 640, H = 360, L = 60, R = 150, T = 40, B = 50;
  std::size_t n = 1;
  double ymin = 0, ymax = 1;
  for (const auto& s : series) {
    n = std::max(n, s.values.size());
    for (double v : s.values)
      if (std::isfinite(v)) ymax = std::max(ymax, v), ymin = std::min(ymin, v);
  }
  auto px = [&](std::size_t i) { return L + (n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.5) * (W - L - R); };
  auto py = [&](double v) { return T + (1 - (v - ymin) / (ymax - ymin)) * (H - T - B); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<text x=\"" << L << "\" y=\"20\" font-size=\"14\">" << detail::xml_escape(title) << "</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">epoch</text>\n";
  s << "<text transform=\"translate(16," << (T + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
    << detail::xml_escape(y_label) << "</text>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = ymin + (ymax - ymin) * k / 4;
    s << "<text x=\"" << L - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << detail::fmt(v) << "</text>\n";
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& vals = series[k].values;
    s << "<polyline class=\"series\" fill=\"none\" stroke=\"" << detail::palette(k) << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < vals.size(); ++i) s << (i ? " " : "") << detail::fmt(px(i), 1) << "," << detail::fmt(py(vals[i]), 1);
    s << "\"/>\n";
    s << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * static_cast<int>(k) + 4 << "\" fill=\"" << detail::palette(k)
      << "\">" << detail::xml_escape(series[k].label) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

/// Grouped bars: one group per run, one bar per K in {1, 2, 3, 5}.
inline std::string topk_svg(const std::vector<RunReport>& reports) {
  const auto& ks = report_ks();
  const int bar = 12, gap = 24, L = 50, T = 40, plot_h = 240;
  const int group = static_cast<int>(ks.size()) * bar;
  const int W = L + static_cast<int>(reports.size()) * (group + gap) + 120;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << T + plot_h + 90
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<text x=\"" << L << "\" y=\"20\" font-size=\"14\">Top-K accuracy (%)</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T + plot_h << "\" x2=\"" << W - 120 << "\" y2=\"" << T + plot_h
    << "\" stroke=\"black\"/>\n";
  for (std::size_t r = 0; r < reports.size(); ++r) {
    const int x0 = L + static_cast<int>(r) * (group + gap) + gap / 2;
    for (std::size_t k = 0; k < ks.size(); ++k) {
      const double v = reports[r].top_k.count(ks[k]) ? reports[r].top_k.at(ks[k]) : 0.0;
      const double h = v * plot_h;
      s << "<rect class=\"bar\" x=\"" << x0 + static_cast<int>(k) * bar << "\" y=\"" << detail::fmt(T + plot_h - h, 1)
        << "\" width=\"" << bar - 1 << "\" height=\"" << detail::fmt(h, 1) << "\" fill=\"" << detail::palette(k)
        << "\"><title>" << detail::xml_escape(reports[r].config_id) << " top-" << ks[k] << ": "
        << detail::fmt(100 * v) << "</title></rect>\n";
    }
    s << "<text transform=\"translate(" << x0 << "," << T + plot_h + 12 << ") rotate(40)\">"
      << detail::xml_escape(reports[r].config_id) << "</text>\n";
  }
  for (std::size_t k = 0; k < ks.size(); ++k)
    s << "<text x=\"" << W - 110 << "\" y=\"" << T + 16 * static_cast<int>(k) << "\" fill=\"" << detail::palette(k)
      << "\">top-" << ks[k] << "</text>\n";
  s << "</svg>\n";
  return s.str();
}

inline nlohmann::json suite_json(const std::vector<RunReport>& reports, const std::vector<std::string>& classes) {
  nlohmann::json j;
  j["classes"] = classes;
  j["reports"] = nlohmann::json::array();
  for (const auto& r : reports) j["reports"].push_back(to_json(r));
  return j;
}

inline std::vector<RunReport> reports_from_json(const nlohmann::json& j) {
  std::vector<RunReport> out;
  for (const auto& r : j.at("reports")) out.push_back(report_from_json(r));
  return out;
}

/// Writes report.json, report.csv, topk.svg, curves.svg and confusion.svg (the
/// run with the best test accuracy) into `dir`.
inline void emit_suite_report(const fs::path& dir, const std::vector<RunReport>& reports,
                              const std::vector<std::string>& classes) {
  atomic_write(dir / "report.json", suite_json(reports, classes).dump(2) + "\n");
  atomic_write(dir / "report.csv", reports_csv(reports));
  atomic_write(dir / "topk.svg", topk_svg(reports));
  std::vector<Series> val;
  for (const auto& r : reports) {
    Series s{r.config_id, {}};
    for (const auto& e : r.history) s.values.push_back(e.val_acc);
    val.push_back(std::move(s));
  }
  atomic_write(dir / "curves.svg", line_chart_svg(val, "Validation accuracy", "accuracy"));
  if (!reports.empty()) {
    const auto best = std::max_element(reports.begin(), reports.end(), [](const RunReport& a, const RunReport& b) {
      return a.test_accuracy < b.test_accuracy;
    });
    atomic_write(dir / "confusion.svg", confusion_svg(best->confusion, classes, best->config_id + " (row-normalised)"));
  }
}

/// Per-run outputs: report.json, training_log.csv, curves.svg, confusion.svg,
/// scores.npy (float32 [N, C]) and labels.npy (int64 [N]).
inline void emit_run_report(const fs::path& dir, const RunReport& r, const std::vector<std::string>& classes,
                            const ScoreMatrix& scores, const std::vector<int>& labels) {
  atomic_write(dir / "report.json", to_json(r).dump(2) + "\n");
  atomic_write(dir / "training_log.csv", training_log_csv(r.history));
  Series loss{"train_loss", {}}, tacc{"train_acc", {}}, vacc{"val_acc", {}};
  for (const auto& e : r.history) {
    loss.values.push_back(e.train_loss);
    tacc.values.push_back(e.train_acc);
    vacc.values.push_back(e.val_acc);
  }
  atomic_write(dir / "curves.svg", line_chart_svg({loss, tacc, vacc}, r.config_id + " training curves", "value"));
  atomic_write(dir / "confusion.svg", confusion_svg(r.confusion, classes, r.config_id + " (row-normalised)"));
  std::vector<float> f(scores.values.begin(), scores.values.end());
  write_npy(dir / "scores.npy", {scores.rows, scores.cols}, f);
  std::vector<std::int64_t> l(labels.begin(), labels.end());
  write_npy(dir / "labels.npy", {l.size()}, l);
}

}  // namespace dualstream
