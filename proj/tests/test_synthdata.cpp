// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <set>

#include "oddetr/synthdata.hpp"

using namespace oddetr;
using Catch::Approx;

TEST_CASE("scenes are deterministic in their seed", "[synthdata]") {
  DataConfig cfg;
  CHECK(generate_scene(17, cfg) == generate_scene(17, cfg));
  CHECK_FALSE(generate_scene(17, cfg) == generate_scene(18, cfg));
  CHECK(scene_seed(cfg, Split::train, 3) != scene_seed(cfg, Split::val, 3));
  const FeatureGrid a = render_features(generate_scene(17, cfg), cfg), b = render_features(generate_scene(17, cfg), cfg);
  CHECK(a.cells == b.cells);
  DataConfig other = cfg;
  other.seed = 1;
  CHECK(scene_seed(other, Split::train, 3) != scene_seed(cfg, Split::train, 3));
}

TEST_CASE("generated scenes respect counts, bounds and overlap limits", "[synthdata][property]") {
  DataConfig cfg;
  std::array<int, 7> hist{};
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const Scene s = generate_scene(scene_seed(cfg, Split::train, i), cfg);
    REQUIRE(!s.objects.empty());
    REQUIRE(static_cast<int>(s.objects.size()) <= cfg.max_objects);
    ++hist[s.objects.size()];
    for (std::size_t a = 0; a < s.objects.size(); ++a) {
      const auto& o = s.objects[a];
      const CornerBox c = to_corners(o.box);
      CHECK(c.x1 >= -1e-12);
      CHECK(c.y1 >= -1e-12);
      CHECK(c.x2 <= 1 + 1e-12);
      CHECK(c.y2 <= 1 + 1e-12);
      CHECK(o.box.w >= cfg.min_size - 1e-12);
      CHECK(o.box.w <= cfg.max_size + 1e-12);
      CHECK(o.box.h >= cfg.min_size - 1e-12);
      CHECK(o.box.h <= cfg.max_size + 1e-12);
      CHECK(o.class_index >= 0);
      CHECK(o.class_index < cfg.num_classes);
      for (std::size_t b = a + 1; b < s.objects.size(); ++b) CHECK(iou(o.box, s.objects[b].box) <= cfg.max_pair_iou);
    }
  }
  // object counts are uniform on 1..max_objects
  const double p = 1.0 / cfg.max_objects, mean = n * p, sd = std::sqrt(n * p * (1 - p));
  for (int k = 1; k <= cfg.max_objects; ++k) CHECK(std::abs(hist[static_cast<std::size_t>(k)] - mean) < 3 * sd);
}

TEST_CASE("an empty scene renders pure noise of the configured scale", "[synthdata]") {
  DataConfig cfg;
  const FeatureGrid f = FeatureRenderer(cfg).render(Scene{5, {}});
  REQUIRE(f.cells.rows() == cfg.grid * cfg.grid);
  REQUIRE(f.cells.cols() == cfg.feature_dim);
  const double expected = cfg.noise_sigma * std::sqrt(static_cast<double>(cfg.feature_dim));
  CHECK(f.cells.rowwise().norm().mean() == Approx(expected).epsilon(0.05));
  CHECK(std::abs(f.cells.mean()) < 3 * cfg.noise_sigma / std::sqrt(static_cast<double>(f.cells.size())));
}

TEST_CASE("noise-free rendering is the signal and follows the objects", "[synthdata]") {
  DataConfig cfg;
  cfg.noise_sigma = 0;
  const FeatureRenderer r(cfg);
  const Scene s{1, {{make_box(0.2, 0.2, 0.15, 0.15), 2}}};
  const FeatureGrid f = r.render(s);
  std::set<int> covered;
  for (int j = 0; j < cfg.grid * cfg.grid; ++j) {
    CHECK(f.cells.row(j) == r.signal(s, j));
    if (r.covers(s.objects[0].box, j)) {
      covered.insert(j);
      CHECK(f.cells.row(j).norm() > 0);
    } else {
      CHECK(f.cells.row(j).norm() == 0);
    }
  }
  CHECK_FALSE(covered.empty());

  const Scene moved{1, {{make_box(0.75, 0.7, 0.15, 0.15), 2}}};
  const FeatureGrid g = r.render(moved);
  for (int j : covered) CHECK(g.cells.row(j).norm() == 0);
}

TEST_CASE("scenes round-trip through JSON lines", "[synthdata]") {
  DataConfig cfg;
  const auto scenes = generate_split(cfg, Split::val, 25);
  const auto path = std::filesystem::temp_directory_path() / "oddetr_scenes_roundtrip.jsonl";
  write_scenes_jsonl(path.string(), scenes);
  CHECK(read_scenes_jsonl(path.string()) == scenes);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_scenes_jsonl("/nonexistent/oddetr.jsonl"), std::runtime_error);
}

TEST_CASE("an impossible layout exhausts the rejection budget", "[synthdata]") {
  DataConfig cfg;
  cfg.min_size = cfg.max_size = 0.9;
  cfg.max_pair_iou = 0.0;
  cfg.rejection_budget = 20;
  int failures = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    try {
      generate_scene(seed, cfg);
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("rejection budget") != std::string::npos);
      ++failures;
    }
  }
  CHECK(failures > 0);
}

TEST_CASE("cell classes are linearly decodable from the features", "[synthdata]") {
  DataConfig cfg;
  const FeatureRenderer r(cfg);
  // cells covered by exactly one object, features plus a bias column
  std::vector<Eigen::RowVectorXd> xs;
  std::vector<int> ys;
  for (int i = 0; i < 400; ++i) {
    const Scene s = generate_scene(scene_seed(cfg, Split::train, i), cfg);
    const FeatureGrid f = r.render(s);
    for (int j = 0; j < cfg.grid * cfg.grid; ++j) {
      int hits = 0, cls = -1;
      for (const auto& o : s.objects)
        if (r.covers(o.box, j)) {
          ++hits;
          cls = o.class_index;
        }
      if (hits != 1) continue;
      Eigen::RowVectorXd x(cfg.feature_dim + 1);
      x << f.cells.row(j), 1.0;
      xs.push_back(x);
      ys.push_back(cls);
    }
  }
  const std::size_t n = xs.size(), train = n * 3 / 4;
  REQUIRE(n > 1000);
  Eigen::MatrixXd X(static_cast<Eigen::Index>(train), cfg.feature_dim + 1);
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(train), cfg.num_classes);
  for (std::size_t i = 0; i < train; ++i) {
    X.row(static_cast<Eigen::Index>(i)) = xs[i];
    Y(static_cast<Eigen::Index>(i), ys[i]) = 1.0;
  }
  const Eigen::MatrixXd A = X.transpose() * X + 1e-3 * Eigen::MatrixXd::Identity(X.cols(), X.cols());
  const Eigen::MatrixXd W = A.ldlt().solve(X.transpose() * Y);
  int correct = 0;
  for (std::size_t i = train; i < n; ++i) {
    Eigen::Index best;
    (xs[i] * W).maxCoeff(&best);
    correct += static_cast<int>(best) == ys[i];
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(n - train) > 0.9);
}
