#include <gtest/gtest.h>

#include "oracles.hpp"
#include "vulnllm/synthetic.hpp"
#include "vulnllm/tuning.hpp"
#include "vulnllm/visualization.hpp"

using namespace vulnllm;

namespace {

void blobs(std::size_t per_blob, std::size_t d, double separation, std::uint64_t seed,
           std::vector<EmbeddingVector>& points, std::vector<int>& labels) {
  Rng rng(seed);
  for (int c = 0; c < 2; ++c) {
    for (std::size_t i = 0; i < per_blob; ++i) {
      EmbeddingVector v(d);
      for (auto& x : v) x = standard_normal(rng);
      v[0] += c == 0 ? -separation : separation;
      points.push_back(v);
      labels.push_back(c);
    }
  }
}

}  // namespace

TEST(Projection, RecoversTwoBlobs) {
  std::vector<EmbeddingVector> pts;
  std::vector<int> labels;
  blobs(100, 64, 6.0, 1, pts, labels);
  ProjectionConfig cfg;
  cfg.seed = 3;
  const auto y = project_2d(pts, cfg);
  ASSERT_EQ(y.size(), 200u);
  EXPECT_GE(oracle::nearest_centroid_recovery(y, labels), 0.95);
  EXPECT_GT(silhouette(y, labels), 0.3);
  EXPECT_EQ(project_2d(pts, cfg), y);
  for (const auto& p : y) {
    EXPECT_TRUE(std::isfinite(p.x));
    EXPECT_TRUE(std::isfinite(p.y));
  }
}

TEST(Projection, Preconditions) {
  std::vector<EmbeddingVector> three = {{0, 1}, {1, 0}, {1, 1}};
  EXPECT_THROW(project_2d(three), Error);
  std::vector<EmbeddingVector> ten(10, EmbeddingVector{1, 2, 3});
  ProjectionConfig cfg;
  cfg.perplexity = 3;
  EXPECT_THROW(project_2d(ten, cfg), Error);  // identical points
  cfg.perplexity = 10;
  ten[0] = {0, 0, 0};
  EXPECT_THROW(project_2d(ten, cfg), Error);  // perplexity >= N
  ten[1] = {0, 0};
  cfg.perplexity = 2;
  EXPECT_THROW(project_2d(ten, cfg), Error);  // ragged
}

TEST(Silhouette, KnownConfiguration) {
  // Two tight pairs far apart: a = 1, b ~ 10 for every point.
  const std::vector<Point2> p = {{0, 0}, {1, 0}, {10, 0}, {11, 0}};
  const std::vector<int> l = {0, 0, 1, 1};
  // Point 0: a = 1, b = (10 + 11) / 2 = 10.5, s = 9.5 / 10.5.
  // Point 1: a = 1, b = (9 + 10) / 2 = 9.5, s = 8.5 / 9.5. Symmetric for the rest.
  const double want = (9.5 / 10.5 + 8.5 / 9.5) / 2;
  EXPECT_NEAR(silhouette(p, l), want, 1e-12);
  const std::vector<int> mixed = {0, 1, 0, 1};
  EXPECT_LT(silhouette(p, mixed), 0.0);
}

TEST(Projection, TunedEmbeddingsSeparateClassesMore) {
  auto corpus = synthetic::planted_marker_corpus();
  Samples sample(corpus.begin(), corpus.begin() + 80);
  std::vector<int> labels;
  for (const auto& s : sample) labels.push_back(s.label);

  auto project = [&](const ToyBackend& b) {
    std::vector<EmbeddingVector> e;
    for (const auto& s : sample) e.push_back(b.embed(s.code));
    ProjectionConfig cfg;
    cfg.perplexity = 15;
    cfg.iterations = 500;
    return project_2d(e, cfg);
  };
  ToyBackend untuned, tuned;
  TrainConfig c;
  c.learning_rate = 0.02;
  c.epochs = 8;
  finetune_classifier(tuned, corpus, c);
  const double before = silhouette(project(untuned), labels);
  const double after = silhouette(project(tuned), labels);
  EXPECT_GT(after, before);
}

TEST(RocPlot, LegendDiagonalAndDeterminism) {
  const std::vector<double> s = {0.9, 0.8, 0.2, 0.1};
  const std::vector<int> y = {1, 1, 0, 0};
  std::vector<NamedCurve> curves = {{"perfect <run>", roc(s, y)}};
  const auto svg = render_roc_svg(curves);
  EXPECT_NE(svg.find("AUC = 1.000"), std::string::npos);
  EXPECT_NE(svg.find("perfect &lt;run&gt;"), std::string::npos);
  EXPECT_NE(svg.find("stroke-dasharray"), std::string::npos);
  EXPECT_EQ(svg.rfind("<?xml", 0), 0u);
  EXPECT_NE(svg.find("<svg xmlns"), std::string::npos);
  EXPECT_TRUE(svg.ends_with("</svg>\n"));

  const auto dir = oracle::temp_dir("roc");
  emit_roc_plot(curves, dir / "a.svg");
  emit_roc_plot(curves, dir / "b.svg");
  EXPECT_EQ(read_file(dir / "a.svg"), read_file(dir / "b.svg"));
  EXPECT_THROW(emit_roc_plot(std::vector<NamedCurve>{}, dir / "c.svg"), Error);
  EXPECT_FALSE(std::filesystem::exists(dir / "c.svg"));
  write_file_atomic(dir / "plain", "x");
  try {
    emit_roc_plot(curves, dir / "plain" / "x.svg");
    ADD_FAILURE() << "expected an I/O error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIo);
  }
  std::filesystem::remove_all(dir);
}

TEST(ScatterPlot, LegendAndDeterminism) {
  const std::vector<Point2> p = {{0, 0}, {1, 1}, {2, 0.5}};
  const std::vector<int> l = {0, 1, 1};
  const auto svg = render_scatter_svg(p, l);
  EXPECT_NE(svg.find("Safe"), std::string::npos);
  EXPECT_NE(svg.find("Vulnerable"), std::string::npos);
  EXPECT_EQ(render_scatter_svg(p, l), svg);
  EXPECT_THROW(render_scatter_svg(std::vector<Point2>{}, std::vector<int>{}), Error);
  EXPECT_THROW(render_scatter_svg(p, std::vector<int>{0}), Error);
  const auto table = coordinates_table(p, l);
  EXPECT_EQ(table.substr(0, 10), "x,y,label\n");
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 4);
}
