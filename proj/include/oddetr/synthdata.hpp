// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic detection scenes and their feature grids.
//
// A scene is a handful of labelled boxes. Its feature grid puts, in every
// cell a box overlaps, the box's class embedding plus a linear encoding of the
// offset from the cell center to the box center and of the box size, then
// adds Gaussian noise. Everything derives from 64-bit seeds.

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "oddetr/geometry.hpp"
#include "oddetr/network.hpp"

namespace oddetr {

struct DataConfig {
  std::uint64_t seed = 0;
  int num_classes = 5;
  int max_objects = 6;
  int grid = 8;
  int feature_dim = 32;
  int train_scenes = 2000;
  int val_scenes = 200;
  double min_size = 0.08;
  double max_size = 0.5;
  double max_pair_iou = 0.7;
  double noise_sigma = 0.1;
  int rejection_budget = 200;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct Scene {
  std::uint64_t seed = 0;
  std::vector<GroundTruth> objects;

  friend bool operator==(const Scene&, const Scene&) = default;
};

/// SplitMix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index = 0) {
  return mix_seed(mix_seed(base ^ mix_seed(stream)) + index);
}

enum class Split : std::uint64_t { train = 1, val = 2 };

inline std::uint64_t scene_seed(const DataConfig& cfg, Split split, int index) {
  return derive_seed(cfg.seed, static_cast<std::uint64_t>(split), static_cast<std::uint64_t>(index));
}

inline Scene generate_scene(std::uint64_t seed, const DataConfig& cfg) {
  if (cfg.max_objects < 1 || cfg.num_classes < 1 || !(cfg.min_size > 0) || !(cfg.max_size <= 1.0) ||
      !(cfg.min_size <= cfg.max_size))
    throw std::invalid_argument("generate_scene: invalid data config");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count(1, cfg.max_objects);
  std::uniform_int_distribution<int> cls(0, cfg.num_classes - 1);
  std::uniform_real_distribution<double> log_size(std::log(cfg.min_size), std::log(cfg.max_size));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Scene scene{seed, {}};
  const int n = count(rng);
  for (int k = 0; k < n; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < cfg.rejection_budget && !placed; ++attempt) {
      const double w = std::exp(log_size(rng));
      const double h = std::exp(log_size(rng));
      const double cx = w / 2 + unit(rng) * (1.0 - w);
      const double cy = h / 2 + unit(rng) * (1.0 - h);
      const int c = cls(rng);
      const Box b = make_box(cx, cy, w, h);
      bool ok = true;
      for (const auto& o : scene.objects) ok = ok && iou(b, o.box) <= cfg.max_pair_iou;
      if (ok) {
        scene.objects.push_back({b, c});
        placed = true;
      }
    }
    if (!placed) throw std::runtime_error("generate_scene: rejection budget exceeded (seed " + std::to_string(seed) + ")");
  }
  return scene;
}

/// Fixed per-run embeddings that turn scenes into feature grids.
class FeatureRenderer {
 public:
  explicit FeatureRenderer(const DataConfig& cfg) : cfg_(cfg) {
    std::mt19937_64 rng(derive_seed(cfg.seed, 0xFEA7));
    std::normal_distribution<double> n01(0.0, 1.0);
    const double d = cfg.feature_dim;
    class_embed_.resize(cfg.num_classes, cfg.feature_dim);
    for (Eigen::Index i = 0; i < class_embed_.size(); ++i) class_embed_.data()[i] = n01(rng) * 1.5 / std::sqrt(d);
    offset_proj_.resize(4, cfg.feature_dim);
    for (Eigen::Index i = 0; i < offset_proj_.size(); ++i) offset_proj_.data()[i] = n01(rng) / std::sqrt(d);
    centers_ = FeatureGrid::cell_centers(cfg.grid);
  }

  const DataConfig& config() const { return cfg_; }
  const Eigen::MatrixXd& class_embeddings() const { return class_embed_; }

  /// True when the box overlaps cell `j` with positive area.
  bool covers(const Box& b, int j) const {
    const double half = 0.5 / cfg_.grid;
    const CornerBox c = to_corners(b);
    const double x = centers_(j, 0), y = centers_(j, 1);
    return std::min(c.x2, x + half) > std::max(c.x1, x - half) && std::min(c.y2, y + half) > std::max(c.y1, y - half);
  }

  /// Noise-free signal of one cell.
  Eigen::RowVectorXd signal(const Scene& scene, int j) const {
    Eigen::RowVectorXd v = Eigen::RowVectorXd::Zero(cfg_.feature_dim);
    for (const auto& o : scene.objects) {
      if (!covers(o.box, j)) continue;
      Eigen::RowVector4d off(4.0 * (o.box.cx - centers_(j, 0)), 4.0 * (o.box.cy - centers_(j, 1)),
                             4.0 * (o.box.w - 0.25), 4.0 * (o.box.h - 0.25));
      v += class_embed_.row(o.class_index) + off * offset_proj_;
    }
    return v;
  }

  FeatureGrid render(const Scene& scene) const {
    FeatureGrid f;
    f.grid = cfg_.grid;
    f.centers = centers_;
    const int cells = cfg_.grid * cfg_.grid;
    f.cells.resize(cells, cfg_.feature_dim);
    for (int j = 0; j < cells; ++j) f.cells.row(j) = signal(scene, j);
    if (cfg_.noise_sigma > 0) {
      std::mt19937_64 rng(derive_seed(scene.seed, 0x4015E));
      std::normal_distribution<double> noise(0.0, cfg_.noise_sigma);
      for (int j = 0; j < cells; ++j)
        for (int k = 0; k < cfg_.feature_dim; ++k) f.cells(j, k) += noise(rng);
    }
    return f;
  }

 private:
  DataConfig cfg_;
  Eigen::MatrixXd class_embed_;
  Eigen::MatrixXd offset_proj_;
  Eigen::MatrixXd centers_;
};

inline FeatureGrid render_features(const Scene& scene, const DataConfig& cfg) {
  return FeatureRenderer(cfg).render(scene);
}

struct Sample {
  Scene scene;
  FeatureGrid features;
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> val;
};

inline std::vector<Scene> generate_split(const DataConfig& cfg, Split split, int count) {
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(generate_scene(scene_seed(cfg, split, i), cfg));
  return out;
}

inline std::vector<Sample> render_all(const std::vector<Scene>& scenes, const DataConfig& cfg) {
  FeatureRenderer r(cfg);
  std::vector<Sample> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back({s, r.render(s)});
  return out;
}

inline Dataset generate_dataset(const DataConfig& cfg) {
  return Dataset{render_all(generate_split(cfg, Split::train, cfg.train_scenes), cfg),
                 render_all(generate_split(cfg, Split::val, cfg.val_scenes), cfg)};
}

// ---------------------------------------------------------------------------
// JSON-lines scene files: one {seed, objects: [{cx, cy, w, h, class}]} per line.

inline nlohmann::json scene_to_json(const Scene& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : s.objects)
    objs.push_back({{"cx", o.box.cx}, {"cy", o.box.cy}, {"w", o.box.w}, {"h", o.box.h}, {"class", o.class_index}});
  return {{"seed", s.seed}, {"objects", std::move(objs)}};
}

inline Scene scene_from_json(const nlohmann::json& j) {
  Scene s;
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& o : j.at("objects"))
    s.objects.push_back({make_box(o.at("cx").get<double>(), o.at("cy").get<double>(), o.at("w").get<double>(),
                                  o.at("h").get<double>()),
                         o.at("class").get<int>()});
  return s;
}

inline void write_scenes_jsonl(const std::string& path, std::span<const Scene> scenes) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  for (const auto& s : scenes) out << scene_to_json(s).dump() << '\n';
}

inline std::vector<Scene> read_scenes_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<Scene> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(scene_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace oddetr
