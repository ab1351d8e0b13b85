#pragma once

#include "xfrn/geometry.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace xfrn {

// Static figures. Each writer emits <stem>.svg and <stem>.csv; the CSV holds
// exactly the numbers that are drawn. Output is deterministic.

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;  // NaN entries break the line
};

struct LinePlot {
  std::string title;
  std::string x_label = "layer";
  std::string y_label;
  std::vector<PlotSeries> series;
};

struct BarSeries {
  std::string label;
  std::map<int, double> bars;  // bin -> height
};

struct HistogramPlot {
  std::string title;
  std::string x_label = "layer";
  std::string y_label = "count";
  std::vector<BarSeries> series;  // drawn side by side within each bin
};

struct ScatterPlot {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<PlotSeries> series;
  bool diagonal = true;  // draw y = x
};

struct Figure {
  std::filesystem::path svg;
  std::filesystem::path csv;
};

// CSV: series,x,y
Figure write_line_plot(const LinePlot& plot, const std::filesystem::path& stem);
// CSV: series,bin,value
Figure write_histogram(const HistogramPlot& plot, const std::filesystem::path& stem);
// CSV: series,x,y
Figure write_scatter(const ScatterPlot& plot, const std::filesystem::path& stem);

// One series per curve, x = layer; the label is the metric plus any
// "languages" / "condition" metadata.
LinePlot curves_plot(const std::vector<SimilarityCurve>& curves, const std::string& title, const std::string& y_label);

}  // namespace xfrn
