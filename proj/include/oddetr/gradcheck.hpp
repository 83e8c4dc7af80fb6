// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference check of the analytic gradient of L_total. The probe
// replays the tape's detached values, so matches, IoU targets and refined
// anchors stay exactly as in the analytic pass.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "oddetr/config.hpp"
#include "oddetr/step.hpp"
#include "oddetr/synthdata.hpp"

namespace oddetr {

struct GradcheckEntry {
  std::size_t index = 0;
  std::string tensor;
  double analytic = 0;
  double numeric = 0;
  double rel_err = 0;
};

struct GradcheckReport {
  double loss = 0;
  double max_rel_err = 0;
  std::vector<GradcheckEntry> entries;
};

struct GradcheckOptions {
  int n_params = 32;
  std::uint64_t seed = 0;
  int scenes = 2;
  double step = 1e-6;
  /// Denominator floor: near-zero gradients are compared absolutely.
  double floor = 1e-4;
};

inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// A student and a nearby teacher (a blend of two initializations) so that
/// every distillation term is active and non-trivial.
inline std::pair<ModelParams, ModelParams> gradcheck_models(const TrainConfig& cfg, std::uint64_t seed) {
  const ModelConfig m = cfg.resolved_model();
  ModelParams student = ModelParams::init(m, derive_seed(seed, 0x6C));
  ModelParams teacher = ModelParams::init(m, derive_seed(seed, 0x7E));
  auto t = teacher.data();
  const auto s = student.data();
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.8 * s[i] + 0.2 * t[i];
  return {std::move(student), std::move(teacher)};
}

inline std::vector<Sample> gradcheck_batch(const TrainConfig& cfg, int scenes) {
  std::vector<Scene> s;
  for (int i = 0; i < scenes; ++i) s.push_back(generate_scene(scene_seed(cfg.data, Split::train, i), cfg.data));
  return render_all(s, cfg.data);
}

inline GradcheckReport gradcheck(const TrainConfig& cfg, const GradcheckOptions& opts = {}) {
  cfg.validate();
  auto [student, teacher] = gradcheck_models(cfg, opts.seed);
  const auto samples = gradcheck_batch(cfg, opts.scenes);
  std::vector<const Sample*> batch;
  for (const auto& s : samples) batch.push_back(&s);
  const ModelParams* tptr = cfg.distill_enabled() ? &teacher : nullptr;

  const StepEvaluation ev = evaluate_step(student, tptr, cfg, batch);
  GradcheckReport rep;
  rep.loss = ev.losses.total;
  std::mt19937_64 rng(derive_seed(opts.seed, 0x9C));
  std::uniform_int_distribution<std::size_t> pick(0, student.size() - 1);
  const auto& tensors = student.layout().tensors();
  for (int k = 0; k < opts.n_params; ++k) {
    const std::size_t i = pick(rng);
    auto p = student.data();
    const double x = p[i];
    p[i] = x + opts.step;
    const double up = evaluate_step(student, tptr, cfg, batch, false, &ev.detached_values).losses.total;
    p[i] = x - opts.step;
    const double down = evaluate_step(student, tptr, cfg, batch, false, &ev.detached_values).losses.total;
    p[i] = x;
    GradcheckEntry e;
    e.index = i;
    for (const auto& t : tensors)
      if (i >= t.offset && i < t.offset + t.size()) e.tensor = t.name;
    e.analytic = ev.grad[i];
    e.numeric = (up - down) / (2 * opts.step);
    e.rel_err = relative_error(e.analytic, e.numeric, opts.floor);
    rep.max_rel_err = std::max(rep.max_rel_err, e.rel_err);
    rep.entries.push_back(e);
  }
  return rep;
}

}  // namespace oddetr
