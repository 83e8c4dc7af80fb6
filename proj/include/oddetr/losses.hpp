// SPDX-License-Identifier: Apache-2.0
//
// Scalar training losses with analytic gradients: quality focal loss, its
// two-target extension, background QFL and the cost-sensitive box regression
// loss.

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>

#include "oddetr/geometry.hpp"

namespace oddetr {

inline constexpr double kScoreClamp = 1e-7;

inline double clamp_score(double s) { return std::clamp(s, kScoreClamp, 1.0 - kScoreClamp); }

inline void check_quality_target(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("qfl: target outside [0,1]: " + std::to_string(t));
}

/// Quality focal loss  -|t-s|^gamma ((1-t) log(1-s) + t log s).
inline double qfl(double s, double t, double gamma = 2.0) {
  check_quality_target(t);
  s = clamp_score(s);
  const double ce = (1.0 - t) * std::log(1.0 - s) + t * std::log(s);
  return -std::pow(std::abs(t - s), gamma) * ce;
}

/// d qfl / d s, evaluated at the clamped score.
inline double qfl_grad(double s, double t, double gamma = 2.0) {
  check_quality_target(t);
  s = clamp_score(s);
  const double diff = s - t;
  const double mag = std::abs(diff);
  const double ce = (1.0 - t) * std::log(1.0 - s) + t * std::log(s);
  const double d_ce = t / s - (1.0 - t) / (1.0 - s);
  const double sign = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
  const double d_mod = mag > 0 ? gamma * std::pow(mag, gamma - 1.0) * sign : 0.0;
  return -(d_mod * ce + std::pow(mag, gamma) * d_ce);
}

struct ClassTarget {
  int class_index = 0;
  double iou = 0;  ///< quality target t in [0,1]

  friend bool operator==(const ClassTarget&, const ClassTarget&) = default;
};

/// One or two class targets of a query. The secondary target exists only
/// when it names a different class than the primary.
class MultiTarget {
 public:
  explicit MultiTarget(ClassTarget primary) : primary_(primary) {}
  MultiTarget(ClassTarget primary, ClassTarget secondary) : primary_(primary), secondary_(secondary) {
    if (secondary.class_index == primary.class_index)
      throw std::invalid_argument("MultiTarget: secondary class equals primary class");
  }

  const ClassTarget& primary() const { return primary_; }
  const std::optional<ClassTarget>& secondary() const { return secondary_; }
  void drop_secondary() { secondary_.reset(); }

  friend bool operator==(const MultiTarget&, const MultiTarget&) = default;

 private:
  ClassTarget primary_;
  std::optional<ClassTarget> secondary_;
};

inline void check_class(std::span<const double> scores, int c) {
  if (c < 0 || static_cast<std::size_t>(c) >= scores.size())
    throw std::invalid_argument("class index " + std::to_string(c) + " outside score vector");
}

inline double multi_target_qfl(std::span<const double> scores, const MultiTarget& target, double gamma = 2.0) {
  const auto& p = target.primary();
  check_class(scores, p.class_index);
  double loss = qfl(scores[static_cast<std::size_t>(p.class_index)], p.iou, gamma);
  if (const auto& s = target.secondary()) {
    check_class(scores, s->class_index);
    loss += qfl(scores[static_cast<std::size_t>(s->class_index)], s->iou, gamma);
  }
  return loss;
}

/// Sum over classes of qfl(s_c, 0); the loss of a query with no positive target.
inline double background_qfl(std::span<const double> scores, double gamma = 2.0) {
  double loss = 0;
  for (double s : scores) loss += qfl(s, 0.0, gamma);
  return loss;
}

enum class RegressionRole { lower_cost, higher_cost };

struct RegressionWeights {
  double l1 = 5.0;
  double giou = 2.0;
};

/// Weighted L1 + GIoU regression loss; the higher-cost query of a GT shared by
/// two queries is scaled by w_d.
inline double regression_loss(const Box& b, const Box& gt, RegressionRole role, double w_d = 0.51,
                              const RegressionWeights& lambdas = {}) {
  const double base = lambdas.l1 * l1_distance(b, gt) + lambdas.giou * (1.0 - giou(b, gt));
  return role == RegressionRole::higher_cost ? w_d * base : base;
}

inline double regression_loss_grad(const Box& b, const Box& gt, RegressionRole role, double w_d,
                                   const RegressionWeights& lambdas, BoxGrad& grad) {
  BoxGrad gl1{}, gg{};
  const double l1 = l1_grad(b, gt, gl1);
  const double g = giou_grad(b, gt, gg);
  const double scale = role == RegressionRole::higher_cost ? w_d : 1.0;
  for (std::size_t k = 0; k < 4; ++k) grad[k] = scale * (lambdas.l1 * gl1[k] - lambdas.giou * gg[k]);
  return scale * (lambdas.l1 * l1 + lambdas.giou * (1.0 - g));
}

}  // namespace oddetr
