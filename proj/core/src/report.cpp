#include "xfrn/report.hpp"

#include "xfrn/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace xfrn {

namespace {

constexpr double kW = 720, kH = 440;
constexpr double kLeft = 70, kRight = 170, kTop = 40, kBottom = 55;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#17becf"};

const char* color(std::size_t i) { return kPalette[i % (sizeof(kPalette) / sizeof(kPalette[0]))]; }

std::string num(double v) { return format_number(v); }

std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", std::abs(v) < 1e-12 ? 0.0 : v);
  return buf;
}

std::string xml(const std::string& s) {
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

std::string csv(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  // Empty ranges become [0, 1]; zero-width ranges are widened by 0.5.
  void finish(bool pad) {
    if (lo > hi) {
      lo = 0;
      hi = 1;
    }
    if (hi - lo < 1e-12) {
      lo -= 0.5;
      hi += 0.5;
    } else if (pad) {
      const double p = 0.05 * (hi - lo);
      lo -= p;
      hi += p;
    }
  }
};

class Canvas {
 public:
  Canvas(Range x, Range y) : x_(x), y_(y) {}

  double sx(double v) const { return kLeft + (v - x_.lo) / (x_.hi - x_.lo) * (kW - kLeft - kRight); }
  double sy(double v) const { return kH - kBottom - (v - y_.lo) / (y_.hi - y_.lo) * (kH - kTop - kBottom); }

  void frame(const std::string& title, const std::string& xl, const std::string& yl, bool x_ticks = true) {
    os_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 "
        << kW << ' ' << kH << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os_ << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os_ << "<text x=\"" << px(kW / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << xml(title)
        << "</text>\n";
    const double x0 = kLeft, x1 = kW - kRight, y0 = kH - kBottom, y1 = kTop;
    os_ << "<path d=\"M" << px(x0) << ' ' << px(y1) << "V" << px(y0) << "H" << px(x1)
        << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double v = y_.lo + (y_.hi - y_.lo) * i / 4.0;
      const double y = sy(v);
      os_ << "<line x1=\"" << px(x0 - 4) << "\" y1=\"" << px(y) << "\" x2=\"" << px(x1) << "\" y2=\"" << px(y)
          << "\" stroke=\"#ddd\"/>\n";
      os_ << "<text x=\"" << px(x0 - 7) << "\" y=\"" << px(y + 4) << "\" text-anchor=\"end\">" << tick(v) << "</text>\n";
      if (x_ticks) {
        const double u = x_.lo + (x_.hi - x_.lo) * i / 4.0;
        os_ << "<text x=\"" << px(sx(u)) << "\" y=\"" << px(y0 + 18) << "\" text-anchor=\"middle\">" << tick(u)
            << "</text>\n";
      }
    }
    os_ << "<text x=\"" << px((x0 + x1) / 2) << "\" y=\"" << px(kH - 12) << "\" text-anchor=\"middle\">" << xml(xl)
        << "</text>\n";
    os_ << "<text transform=\"translate(16 " << px((y0 + y1) / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
        << xml(yl) << "</text>\n";
  }

  void legend(const std::vector<std::string>& labels) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const double y = kTop + 8 + 18.0 * static_cast<double>(i);
      const double x = kW - kRight + 12;
      os_ << "<rect x=\"" << px(x) << "\" y=\"" << px(y - 9) << "\" width=\"12\" height=\"10\" fill=\"" << color(i)
          << "\"/>\n";
      os_ << "<text x=\"" << px(x + 18) << "\" y=\"" << px(y) << "\">" << xml(labels[i]) << "</text>\n";
    }
  }

  std::ostringstream& out() { return os_; }

  void save(const std::filesystem::path& path) {
    os_ << "</svg>\n";
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write '" + path.string() + "'");
    f << os_.str();
  }

 private:
  Range x_, y_;
  std::ostringstream os_;
};

Figure paths_for(const std::filesystem::path& stem) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  Figure f;
  f.svg = stem;
  f.svg += ".svg";
  f.csv = stem;
  f.csv += ".csv";
  return f;
}

void write_xy_csv(const std::vector<PlotSeries>& series, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << "series,x,y\n";
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw DataError("series '" + s.label + "' has mismatched x and y");
    for (std::size_t i = 0; i < s.x.size(); ++i) out << csv(s.label) << ',' << num(s.x[i]) << ',' << num(s.y[i]) << '\n';
  }
}

std::vector<std::string> labels_of(const std::vector<PlotSeries>& series) {
  std::vector<std::string> out;
  for (const auto& s : series) out.push_back(s.label);
  return out;
}

}  // namespace

Figure write_line_plot(const LinePlot& plot, const std::filesystem::path& stem) {
  const Figure fig = paths_for(stem);
  write_xy_csv(plot.series, fig.csv);
  Range xr, yr;
  for (const auto& s : plot.series) {
    for (double v : s.x) xr.add(v);
    for (double v : s.y) yr.add(v);
  }
  xr.finish(false);
  yr.finish(true);
  Canvas c(xr, yr);
  c.frame(plot.title, plot.x_label, plot.y_label);
  for (std::size_t k = 0; k < plot.series.size(); ++k) {
    const auto& s = plot.series[k];
    std::string d;
    bool pen_down = false;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) {
        pen_down = false;
        continue;
      }
      d += (pen_down ? "L" : "M") + px(c.sx(s.x[i])) + ' ' + px(c.sy(s.y[i]));
      pen_down = true;
      c.out() << "<circle cx=\"" << px(c.sx(s.x[i])) << "\" cy=\"" << px(c.sy(s.y[i])) << "\" r=\"2.5\" fill=\""
              << color(k) << "\"/>\n";
    }
    if (!d.empty()) c.out() << "<path d=\"" << d << "\" fill=\"none\" stroke=\"" << color(k) << "\" stroke-width=\"1.8\"/>\n";
  }
  c.legend(labels_of(plot.series));
  c.save(fig.svg);
  return fig;
}

Figure write_histogram(const HistogramPlot& plot, const std::filesystem::path& stem) {
  const Figure fig = paths_for(stem);
  {
    std::ofstream out(fig.csv, std::ios::binary);
    if (!out) throw DataError("cannot write '" + fig.csv.string() + "'");
    out << "series,bin,value\n";
    for (const auto& s : plot.series)
      for (const auto& [bin, v] : s.bars) out << csv(s.label) << ',' << bin << ',' << num(v) << '\n';
  }
  std::set<int> bins;
  Range yr;
  yr.add(0);
  for (const auto& s : plot.series)
    for (const auto& [bin, v] : s.bars) {
      bins.insert(bin);
      yr.add(v);
    }
  Range xr;
  if (!bins.empty()) {
    xr.add(*bins.begin() - 0.5);
    xr.add(*bins.rbegin() + 0.5);
  }
  xr.finish(false);
  yr.finish(false);
  if (yr.lo > 0) yr.lo = 0;
  Canvas c(xr, yr);
  c.frame(plot.title, plot.x_label, plot.y_label, false);
  for (int b : bins) {
    c.out() << "<text x=\"" << px(c.sx(b)) << "\" y=\"" << px(kH - kBottom + 18) << "\" text-anchor=\"middle\">" << b
            << "</text>\n";
  }
  const double slot = (c.sx(1.0) - c.sx(0.0)) * 0.8;
  const double n = std::max<std::size_t>(1, plot.series.size());
  for (std::size_t k = 0; k < plot.series.size(); ++k) {
    for (const auto& [bin, v] : plot.series[k].bars) {
      if (!std::isfinite(v)) continue;
      const double w = slot / n;
      const double x = c.sx(bin) - slot / 2 + w * static_cast<double>(k);
      const double y_top = c.sy(std::max(v, 0.0));
      const double y_base = c.sy(std::min(v, 0.0));
      c.out() << "<rect x=\"" << px(x) << "\" y=\"" << px(y_top) << "\" width=\"" << px(w) << "\" height=\""
              << px(y_base - y_top) << "\" fill=\"" << color(k) << "\"/>\n";
    }
  }
  std::vector<std::string> labels;
  for (const auto& s : plot.series) labels.push_back(s.label);
  c.legend(labels);
  c.save(fig.svg);
  return fig;
}

Figure write_scatter(const ScatterPlot& plot, const std::filesystem::path& stem) {
  const Figure fig = paths_for(stem);
  write_xy_csv(plot.series, fig.csv);
  Range xr, yr;
  for (const auto& s : plot.series) {
    for (double v : s.x) xr.add(v);
    for (double v : s.y) yr.add(v);
  }
  if (plot.diagonal) {
    // Shared axes so that y = x is the visual diagonal.
    xr.add(yr.lo);
    xr.add(yr.hi);
    yr = xr;
  }
  xr.finish(true);
  yr.finish(true);
  Canvas c(xr, yr);
  c.frame(plot.title, plot.x_label, plot.y_label);
  if (plot.diagonal) {
    const double lo = std::max(xr.lo, yr.lo), hi = std::min(xr.hi, yr.hi);
    c.out() << "<line x1=\"" << px(c.sx(lo)) << "\" y1=\"" << px(c.sy(lo)) << "\" x2=\"" << px(c.sx(hi)) << "\" y2=\""
            << px(c.sy(hi)) << "\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>\n";
  }
  for (std::size_t k = 0; k < plot.series.size(); ++k) {
    const auto& s = plot.series[k];
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      c.out() << "<circle cx=\"" << px(c.sx(s.x[i])) << "\" cy=\"" << px(c.sy(s.y[i])) << "\" r=\"3\" fill=\""
              << color(k) << "\" fill-opacity=\"0.6\"/>\n";
    }
  }
  c.legend(labels_of(plot.series));
  c.save(fig.svg);
  return fig;
}

LinePlot curves_plot(const std::vector<SimilarityCurve>& curves, const std::string& title, const std::string& y_label) {
  LinePlot plot;
  plot.title = title;
  plot.y_label = y_label;
  for (const auto& c : curves) {
    PlotSeries s;
    s.label = std::string(to_string(c.metric));
    for (const char* key : {"languages", "language", "condition"}) {
      auto it = c.metadata.find(key);
      if (it != c.metadata.end()) s.label += " " + it->second;
    }
    for (std::size_t i = 0; i < c.values.size(); ++i) {
      s.x.push_back(c.first_layer + static_cast<int>(i));
      s.y.push_back(c.values[i]);
    }
    plot.series.push_back(std::move(s));
  }
  return plot;
}

}  // namespace xfrn
