#pragma once

#include <algorithm>
#include <cstdio>
#include <optional>
#include <span>
#include <sstream>
#include <string>

#include "cleot/errors.hpp"
#include "cleot/nn.hpp"
#include "cleot/tensor.hpp"

namespace cleot {

namespace svg {

inline const char* class_color(int k) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return palette[static_cast<std::size_t>(k) % 10];
}

inline const char* class_tint(int k) {
  static const char* palette[] = {"#c6dbef", "#f4c2c2", "#c7e9c0", "#fdd0a2", "#dadaeb",
                                  "#d9c3b8", "#f7cde6", "#d9d9d9", "#ecedb0", "#b9ecf2"};
  return palette[static_cast<std::size_t>(k) % 10];
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

/// Axis-aligned data window mapped onto a square canvas.
struct Frame {
  double x0, x1, y0, y1;
  double size = 600.0;

  static Frame around(const Matrix& pts, double margin = 0.25) {
    if (pts.cols() != 2) throw ContractError("plot: features must be 2-dimensional, got " + std::to_string(pts.cols()));
    if (pts.rows() == 0) return {-1.0, 1.0, -1.0, 1.0};
    Frame f{pts.col(0).minCoeff() - margin, pts.col(0).maxCoeff() + margin, pts.col(1).minCoeff() - margin,
            pts.col(1).maxCoeff() + margin};
    return f;
  }
  double px(double x) const { return (x - x0) / (x1 - x0) * size; }
  double py(double y) const { return size - (y - y0) / (y1 - y0) * size; }
};

inline void open(std::ostringstream& os, const Frame& f) {
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.size << "\" height=\"" << f.size
     << "\" viewBox=\"0 0 " << f.size << ' ' << f.size << "\">\n";
}

inline void scatter(std::ostringstream& os, const Frame& f, const Matrix& pts, std::span<const int> labels) {
  os << "<g id=\"points\">\n";
  for (Eigen::Index i = 0; i < pts.rows(); ++i)
    os << "<circle class=\"point\" cx=\"" << num(f.px(pts(i, 0))) << "\" cy=\"" << num(f.py(pts(i, 1)))
       << "\" r=\"3\" fill=\"" << class_color(labels[static_cast<std::size_t>(i)]) << "\" stroke=\"black\" stroke-width=\"0.4\"/>\n";
  os << "</g>\n";
}

}  // namespace svg

/// Decision regions of `net` on a resolution x resolution grid (one <rect
/// class="cell"> per grid cell, colored by predicted class), the labeled
/// points on top, and an optional accuracy annotation.
inline std::string plot_decision_boundary(const DenseNet& net, const Matrix& features, std::span<const int> labels,
                                          std::size_t resolution, std::optional<double> acc = std::nullopt) {
  if (features.cols() != 2 || net.input_dim() != 2)
    throw ContractError("plot_decision_boundary: requires 2-dimensional features");
  if (resolution < 1) throw ContractError("plot_decision_boundary: resolution must be >= 1");
  if (labels.size() != static_cast<std::size_t>(features.rows()))
    throw ShapeError("plot_decision_boundary: one label per point required");
  const auto f = svg::Frame::around(features);
  const auto r = static_cast<Eigen::Index>(resolution);
  Matrix grid(r * r, 2);
  const double dx = (f.x1 - f.x0) / static_cast<double>(r), dy = (f.y1 - f.y0) / static_cast<double>(r);
  for (Eigen::Index a = 0; a < r; ++a)
    for (Eigen::Index b = 0; b < r; ++b) {
      grid(a * r + b, 0) = f.x0 + (static_cast<double>(b) + 0.5) * dx;
      grid(a * r + b, 1) = f.y0 + (static_cast<double>(a) + 0.5) * dy;
    }
  const auto cls = argmax_rows(predict(net, grid));

  std::ostringstream os;
  svg::open(os, f);
  const double cw = f.size / static_cast<double>(r);
  os << "<g id=\"background\" shape-rendering=\"crispEdges\">\n";
  for (Eigen::Index a = 0; a < r; ++a)
    for (Eigen::Index b = 0; b < r; ++b)
      os << "<rect class=\"cell\" x=\"" << svg::num(static_cast<double>(b) * cw) << "\" y=\""
         << svg::num(f.size - static_cast<double>(a + 1) * cw) << "\" width=\"" << svg::num(cw) << "\" height=\""
         << svg::num(cw) << "\" fill=\"" << svg::class_tint(cls[static_cast<std::size_t>(a * r + b)]) << "\"/>\n";
  os << "</g>\n";
  svg::scatter(os, f, features, labels);
  if (acc)
    os << "<text id=\"accuracy\" x=\"" << f.size - 10 << "\" y=\"30\" text-anchor=\"end\" font-family=\"sans-serif\" "
       << "font-size=\"22\" fill=\"red\">" << svg::num(*acc) << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

/// Coupling as a graph: one <line class="edge"> per off-diagonal entry with
/// mass >= threshold, stroke width proportional to the mass; diagonal entries
/// above the threshold are drawn as <circle class="self"> markers.
inline std::string plot_coupling_graph(const Matrix& plan, const Matrix& features, std::span<const int> labels,
                                       double threshold) {
  if (features.cols() != 2) throw ContractError("plot_coupling_graph: requires 2-dimensional features");
  if (!(threshold > 0.0)) throw ContractError("plot_coupling_graph: threshold must be positive");
  if (plan.rows() != features.rows() || plan.cols() != features.rows())
    throw ShapeError("plot_coupling_graph: coupling must be N x N for N points");
  const auto f = svg::Frame::around(features);
  const double top = plan.maxCoeff() > 0.0 ? plan.maxCoeff() : 1.0;
  std::ostringstream os;
  svg::open(os, f);
  os << "<g id=\"edges\" stroke=\"#444\" stroke-opacity=\"0.6\">\n";
  for (Eigen::Index i = 0; i < plan.rows(); ++i)
    for (Eigen::Index j = 0; j < plan.cols(); ++j) {
      const double w = plan(i, j);
      if (w < threshold) continue;
      const double width = 0.2 + 3.0 * w / top;
      if (i == j)
        os << "<circle class=\"self\" cx=\"" << svg::num(f.px(features(i, 0))) << "\" cy=\""
           << svg::num(f.py(features(i, 1))) << "\" r=\"" << svg::num(2.0 + width) << "\" fill=\"none\" stroke-width=\""
           << svg::num(width) << "\"/>\n";
      else
        os << "<line class=\"edge\" x1=\"" << svg::num(f.px(features(i, 0))) << "\" y1=\""
           << svg::num(f.py(features(i, 1))) << "\" x2=\"" << svg::num(f.px(features(j, 0))) << "\" y2=\""
           << svg::num(f.py(features(j, 1))) << "\" stroke-width=\"" << svg::num(width) << "\"/>\n";
    }
  os << "</g>\n";
  svg::scatter(os, f, features, labels);
  os << "</svg>\n";
  return os.str();
}

/// Points colored by their (possibly soft) labels: argmax class color.
inline std::string plot_points(const Matrix& features, std::span<const int> labels) {
  const auto f = svg::Frame::around(features);
  std::ostringstream os;
  svg::open(os, f);
  svg::scatter(os, f, features, labels);
  os << "</svg>\n";
  return os.str();
}

}  // namespace cleot
