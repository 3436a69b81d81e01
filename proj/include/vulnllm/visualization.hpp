#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vulnllm/common.hpp"
#include "vulnllm/embedding_index.hpp"
#include "vulnllm/evaluation.hpp"

namespace vulnllm {

struct Point2 {
  double x = 0, y = 0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

struct ProjectionConfig {
  double perplexity = 30.0;
  int iterations = 1000;
  std::uint64_t seed = 0;
  double learning_rate = 200.0;
  double early_exaggeration = 12.0;
  int exaggeration_iterations = 250;
};

namespace detail {

// Row i of the conditional affinities P(j|i) for one precision beta, written
// into `row`; returns the Shannon entropy (nats).
inline double conditional_row(std::span<const double> sq_dist, std::size_t i, double beta,
                              std::vector<double>& row) {
  const std::size_t n = sq_dist.size();
  double min_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j)
    if (j != i) min_d = std::min(min_d, sq_dist[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = j == i ? 0.0 : std::exp(-beta * (sq_dist[j] - min_d));
    sum += row[j];
  }
  double weighted = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] /= sum;
    weighted += row[j] * (sq_dist[j] - min_d);
  }
  return std::log(sum) + beta * weighted;
}

}  // namespace detail

// Exact t-SNE: Gaussian input affinities calibrated per point to the target
// perplexity, Student-t output affinities, gradient descent on KL(P||Q) with
// momentum, gains and early exaggeration.
inline std::vector<Point2> project_2d(std::span<const EmbeddingVector> embeddings,
                                      const ProjectionConfig& config = {}) {
  const std::size_t n = embeddings.size();
  require(n >= 4, ErrorKind::kInvalidArgument, "t-SNE needs at least 4 points");
  require(config.perplexity > 0 && config.perplexity < static_cast<double>(n),
          ErrorKind::kInvalidArgument, "perplexity must be below the number of points");
  require(config.iterations >= 1, ErrorKind::kInvalidArgument, "iterations must be >= 1");
  const std::size_t d = embeddings.front().size();
  for (const auto& e : embeddings)
    require(e.size() == d, ErrorKind::kDimensionMismatch, "embeddings differ in dimension");

  std::vector<double> dist(n * n, 0.0);
  double max_dist = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = embeddings[i][k] - embeddings[j][k];
        s += diff * diff;
      }
      dist[i * n + j] = dist[j * n + i] = s;
      max_dist = std::max(max_dist, s);
    }
  require(max_dist > 0.0, ErrorKind::kInvalidArgument, "all points are identical");

  // Binary search for each point's precision.
  const double target = std::log(config.perplexity);
  std::vector<double> P(n * n, 0.0), row(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::span<const double> di(dist.data() + i * n, n);
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 100; ++it) {
      const double h = detail::conditional_row(di, i, beta, row);
      if (std::abs(h - target) < 1e-5) break;
      if (h > target) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : (beta + hi) / 2.0;
      } else {
        hi = beta;
        beta = (beta + lo) / 2.0;
      }
    }
    detail::conditional_row(di, i, beta, row);
    for (std::size_t j = 0; j < n; ++j) P[i * n + j] = row[j];
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double s = std::max((P[i * n + j] + P[j * n + i]) / (2.0 * n), 1e-12);
      P[i * n + j] = P[j * n + i] = s;
    }

  Rng rng(mix_seed(config.seed, 0x75e));
  std::vector<Point2> Y(n), velocity(n), gains(n, {1.0, 1.0});
  for (auto& y : Y) {
    y.x = 1e-4 * standard_normal(rng);
    y.y = 1e-4 * standard_normal(rng);
  }

  std::vector<double> num(n * n);
  std::vector<Point2> grad(n);
  for (int it = 0; it < config.iterations; ++it) {
    const double exaggeration = it < config.exaggeration_iterations ? config.early_exaggeration : 1.0;
    const double momentum = it < config.exaggeration_iterations ? 0.5 : 0.8;
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      num[i * n + i] = 0.0;
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = Y[i].x - Y[j].x, dy = Y[i].y - Y[j].y;
        const double q = 1.0 / (1.0 + dx * dx + dy * dy);
        num[i * n + j] = num[j * n + i] = q;
        z += 2.0 * q;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      double gx = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const double q = num[i * n + j];
        const double m = (exaggeration * P[i * n + j] - q / z) * q;
        gx += m * (Y[i].x - Y[j].x);
        gy += m * (Y[i].y - Y[j].y);
      }
      grad[i] = {4.0 * gx, 4.0 * gy};
    }
    auto update = [&](double g, double& v, double& gain, double& y) {
      gain = (g > 0) != (v > 0) ? gain + 0.2 : gain * 0.8;
      gain = std::max(gain, 0.01);
      v = momentum * v - config.learning_rate * gain * g;
      y += v;
    };
    Point2 mean{};
    for (std::size_t i = 0; i < n; ++i) {
      update(grad[i].x, velocity[i].x, gains[i].x, Y[i].x);
      update(grad[i].y, velocity[i].y, gains[i].y, Y[i].y);
      mean.x += Y[i].x;
      mean.y += Y[i].y;
    }
    mean.x /= n;
    mean.y /= n;
    for (auto& y : Y) {
      y.x -= mean.x;
      y.y -= mean.y;
    }
  }
  return Y;
}

// Mean silhouette coefficient under Euclidean distance. Points alone in
// their cluster contribute 0.
inline double silhouette(std::span<const Point2> points, std::span<const int> labels) {
  require(points.size() == labels.size(), ErrorKind::kDimensionMismatch,
          "points and labels differ in length");
  require(!points.empty(), ErrorKind::kInvalidArgument, "silhouette of an empty set");
  double total = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    std::map<int, std::pair<double, std::size_t>> by_label;
    for (std::size_t j = 0; j < points.size(); ++j) {
      if (i == j) continue;
      auto& acc = by_label[labels[j]];
      acc.first += std::hypot(points[i].x - points[j].x, points[i].y - points[j].y);
      ++acc.second;
    }
    auto own = by_label.find(labels[i]);
    if (own == by_label.end() || own->second.second == 0) continue;
    const double a = own->second.first / static_cast<double>(own->second.second);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [label, acc] : by_label)
      if (label != labels[i]) b = std::min(b, acc.first / static_cast<double>(acc.second));
    if (std::isinf(b)) continue;
    const double denom = std::max(a, b);
    if (denom > 0) total += (b - a) / denom;
  }
  return total / static_cast<double>(points.size());
}

// ---------------------------------------------------------------------------
// SVG output. Every number goes through fixed-precision formatting and no
// timestamps are written, so identical inputs give byte-identical files.

namespace svg {

inline constexpr double kSize = 480.0;
inline constexpr double kMargin = 56.0;
inline constexpr std::array<const char*, 8> kPalette = {
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

inline std::string num(double v) { return format_fixed(v, 2); }

inline std::string escape(std::string_view text) {
  std::string out;
  for (char c : text) {
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

inline std::string header(const std::string& title) {
  const std::string s = num(kSize);
  return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
         "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + s + "\" height=\"" + s +
         "\" viewBox=\"0 0 " + s + " " + s + "\">\n"
         "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
         "<text x=\"" + num(kSize / 2) + "\" y=\"24.00\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"14\">" + escape(title) + "</text>\n";
}

inline std::string axes(const std::string& x_label, const std::string& y_label) {
  const double lo = kMargin, hi = kSize - kMargin;
  std::string out = "<rect x=\"" + num(lo) + "\" y=\"" + num(lo) + "\" width=\"" + num(hi - lo) +
                    "\" height=\"" + num(hi - lo) + "\" fill=\"none\" stroke=\"black\"/>\n";
  out += "<text x=\"" + num(kSize / 2) + "\" y=\"" + num(kSize - 16) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" +
         escape(x_label) + "</text>\n";
  out += "<text x=\"16.00\" y=\"" + num(kSize / 2) + "\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16.00 " +
         num(kSize / 2) + ")\">" + escape(y_label) + "</text>\n";
  return out;
}

}  // namespace svg

struct NamedCurve {
  std::string name;
  RocCurve curve;
};

inline std::string render_roc_svg(std::span<const NamedCurve> curves,
                                  const std::string& title = "ROC") {
  require(!curves.empty(), ErrorKind::kInvalidArgument, "no ROC curves to plot");
  const double lo = svg::kMargin, span = svg::kSize - 2 * svg::kMargin;
  auto px = [&](double fpr) { return lo + fpr * span; };
  auto py = [&](double tpr) { return svg::kSize - svg::kMargin - tpr * span; };
  std::string out = svg::header(title) + svg::axes("False Positive Rate", "True Positive Rate");
  out += "<line x1=\"" + svg::num(px(0)) + "\" y1=\"" + svg::num(py(0)) + "\" x2=\"" +
         svg::num(px(1)) + "\" y2=\"" + svg::num(py(1)) +
         "\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>\n";
  for (std::size_t c = 0; c < curves.size(); ++c) {
    const auto* color = svg::kPalette[c % svg::kPalette.size()];
    std::string pts;
    for (const auto& p : curves[c].curve.points) {
      if (!pts.empty()) pts += ' ';
      pts += svg::num(px(p.fpr)) + "," + svg::num(py(p.tpr));
    }
    out += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
           "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    const double ly = svg::kSize - svg::kMargin - 12.0 - 16.0 * static_cast<double>(curves.size() - 1 - c);
    const std::string legend = curves[c].name + " (AUC = " + format_fixed(auc(curves[c].curve), 3) + ")";
    out += "<line x1=\"" + svg::num(lo + span * 0.45) + "\" y1=\"" + svg::num(ly - 4) + "\" x2=\"" +
           svg::num(lo + span * 0.45 + 18) + "\" y2=\"" + svg::num(ly - 4) + "\" stroke=\"" + color +
           "\" stroke-width=\"2\"/>\n";
    out += "<text x=\"" + svg::num(lo + span * 0.45 + 24) + "\" y=\"" + svg::num(ly) +
           "\" font-family=\"sans-serif\" font-size=\"11\">" + svg::escape(legend) + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

inline void emit_roc_plot(std::span<const NamedCurve> curves, const std::filesystem::path& path,
                          const std::string& title = "ROC") {
  write_file_atomic(path, render_roc_svg(curves, title));
}

inline std::string render_scatter_svg(std::span<const Point2> points, std::span<const int> labels,
                                      const std::string& title = "Embeddings") {
  require(points.size() == labels.size(), ErrorKind::kDimensionMismatch,
          "points and labels differ in length");
  require(!points.empty(), ErrorKind::kInvalidArgument, "no points to plot");
  double min_x = points[0].x, max_x = points[0].x, min_y = points[0].y, max_y = points[0].y;
  for (const auto& p : points) {
    min_x = std::min(min_x, p.x);
    max_x = std::max(max_x, p.x);
    min_y = std::min(min_y, p.y);
    max_y = std::max(max_y, p.y);
  }
  const double span = svg::kSize - 2 * svg::kMargin;
  const double wx = max_x > min_x ? max_x - min_x : 1.0;
  const double wy = max_y > min_y ? max_y - min_y : 1.0;
  std::string out = svg::header(title) + svg::axes("dim 1", "dim 2");
  static constexpr std::array<const char*, 2> kClassColor = {"#1f77b4", "#d62728"};
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double x = svg::kMargin + 6 + (points[i].x - min_x) / wx * (span - 12);
    const double y = svg::kSize - svg::kMargin - 6 - (points[i].y - min_y) / wy * (span - 12);
    out += "<circle cx=\"" + svg::num(x) + "\" cy=\"" + svg::num(y) + "\" r=\"3\" fill=\"" +
           kClassColor[labels[i] == 1 ? 1 : 0] + "\" fill-opacity=\"0.7\"/>\n";
  }
  const std::array<const char*, 2> names = {"Safe", "Vulnerable"};
  for (int c = 0; c < 2; ++c) {
    const double ly = svg::kMargin + 16.0 + 16.0 * c;
    out += "<circle cx=\"" + svg::num(svg::kMargin + 12) + "\" cy=\"" + svg::num(ly - 4) +
           "\" r=\"4\" fill=\"" + kClassColor[c] + "\"/>\n";
    out += "<text x=\"" + svg::num(svg::kMargin + 22) + "\" y=\"" + svg::num(ly) +
           "\" font-family=\"sans-serif\" font-size=\"11\">" + names[c] + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

inline void emit_scatter_plot(std::span<const Point2> points, std::span<const int> labels,
                              const std::filesystem::path& path,
                              const std::string& title = "Embeddings") {
  write_file_atomic(path, render_scatter_svg(points, labels, title));
}

// Delimited dump of projected coordinates for external replotting.
inline std::string coordinates_table(std::span<const Point2> points, std::span<const int> labels) {
  require(points.size() == labels.size(), ErrorKind::kDimensionMismatch,
          "points and labels differ in length");
  std::string out = "x,y,label\n";
  char buf[96];
  for (std::size_t i = 0; i < points.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%d\n", points[i].x, points[i].y, labels[i]);
    out += buf;
  }
  return out;
}

}  // namespace vulnllm
