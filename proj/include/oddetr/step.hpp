// SPDX-License-Identifier: Apache-2.0
//
// One training step: every enabled loss term of a batch built on a single
// tape, plus the optimizer.
//
//   L_total = L_mqf + L_r + L_pd + L_aux
//
// All four terms are sums over scenes and decoder stages divided by the number
// of GT objects in the batch. Matching always runs on detached values.

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "oddetr/autodiff.hpp"
#include "oddetr/config.hpp"
#include "oddetr/distill.hpp"
#include "oddetr/errors.hpp"
#include "oddetr/matching.hpp"
#include "oddetr/network.hpp"
#include "oddetr/synthdata.hpp"

namespace oddetr {

struct StepTerms {
  ad::Var total, mqf, r, pd, aux;
  DistillStats stats;
  int num_gts = 0;
};

struct StepLosses {
  double total = 0, mqf = 0, r = 0, pd = 0, aux = 0;
};

inline StepLosses values_of(const StepTerms& t) {
  return {t.total.scalar(), t.mqf.scalar(), t.r.scalar(), t.pd.scalar(), t.aux.scalar()};
}

namespace detail {

inline ad::Var pd_term(ParamBinding& student, const FeatureGrid& f, const ModelParams& teacher_params,
                       std::span<const StageOutput> teacher_out, std::span<const Assignment> teacher_assign,
                       std::span<const GroundTruth> gts, const TrainConfig& cfg, DistillStats& stats) {
  ad::Tape& tape = student.tape();
  const QuerySet q_teacher = initial_queries(teacher_params);
  if (cfg.pd_variant == PdVariant::query_prior)
    return query_prior_assignment(student, f, q_teacher, gts, cfg.supervision());

  const PdOptions opts = cfg.pd_options();
  auto stages = decode_graph(student, f, tape.constant(q_teacher.embeddings), q_teacher.anchors);
  std::vector<ad::Var> terms;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto& sv = stages[s];
    const PredictionSet live{sv.scores.value(), sv.boxes.value()};
    const auto pairs = make_pd_pairs(live, teacher_out[s].predictions);
    PdGrad grad;
    PdStats ps;
    double value = 0;
    if (cfg.pd_variant == PdVariant::naive) {
      value = naive_distillation(pairs, opts, &grad);
    } else {
      const ad::Matrix held = tape.detach(sv.boxes).value();
      std::vector<Box> gate(static_cast<std::size_t>(held.rows()));
      for (Eigen::Index i = 0; i < held.rows(); ++i) gate[static_cast<std::size_t>(i)] = {held(i, 0), held(i, 1), held(i, 2), held(i, 3)};
      value = prediction_distillation(pairs, teacher_assign[s].result, gts, opts, &grad, &ps, gate);
    }
    stats.pd_matched_pairs += ps.matched_pairs;
    stats.gated_off_pd_pairs += ps.gated_off;
    terms.push_back(ad::custom_scalar(tape, value, {{sv.scores, grad.scores}, {sv.boxes, grad.boxes}}));
  }
  return ad::sum_scalars(tape, terms);
}

}  // namespace detail

/// Builds L_total for a batch. `teacher` is a frozen binding on the same tape,
/// or null when no distillation component is enabled.
inline StepTerms build_step(ParamBinding& student, ParamBinding* teacher, const TrainConfig& cfg,
                            std::span<const Sample* const> batch) {
  ad::Tape& tape = student.tape();
  if (cfg.distill_enabled() && !teacher) throw std::invalid_argument("build_step: distillation needs a teacher");
  if (teacher && teacher->trainable()) throw InvariantViolation("teacher binding must be frozen");
  const auto& mcfg = student.params().config();
  const auto sup = cfg.supervision();
  const MdOptions md_opts = cfg.md_options();

  std::vector<ad::Var> mqf, reg, pd, aux;
  StepTerms out;
  for (const Sample* sample : batch) {
    const auto& gts = sample->scene.objects;
    const FeatureGrid& f = sample->features;
    const int ng = static_cast<int>(gts.size());
    out.num_gts += ng;
    const ad::Matrix anchors0 = grid_anchors(mcfg.num_queries, mcfg.anchor_size);

    auto stages = decode_graph(student, f, student.tensor(student.params().layout().query_embed()), anchors0);

    std::vector<StageOutput> t_out;
    std::vector<Assignment> t_assign;
    if (teacher) {
      auto tv = decode_graph(*teacher, f, teacher->tensor(teacher->params().layout().query_embed()), anchors0);
      for (const auto& v : tv) {
        t_out.push_back(to_stage_output(v));
        t_assign.push_back(assign(t_out.back().predictions, gts, sup.cost));
      }
    }

    for (std::size_t s = 0; s < stages.size(); ++s) {
      const auto& sv = stages[s];
      const PredictionSet preds = detached_predictions(sv);
      const Assignment a = assign(preds, gts, sup.cost);
      DistillTargets targets;
      if (cfg.md) {
        targets = matching_distillation(a.result, t_assign[s].result, preds, gts, a.costs, md_opts);
        targets.check_invariants(ng, md_opts.regression);
        out.stats.two_class_queries += targets.two_class_queries();
        out.stats.higher_cost_assignments += targets.higher_cost_count();
      } else {
        targets = one_to_one_targets(a.result, preds, gts);
      }
      mqf.push_back(classification_loss(sv.scores, targets, sup.loss));
      reg.push_back(regression_loss_total(sv.boxes, targets, sup.loss));
    }

    if (cfg.pd) pd.push_back(detail::pd_term(student, f, teacher->params(), t_out, t_assign, gts, cfg, out.stats));
    if (cfg.aux) {
      const auto groups = build_auxiliary_groups(t_out, t_assign, gts);
      aux.push_back(aux_group_loss(student, f, groups, gts, cfg.aux_variant, sup, &out.stats));
    }
  }

  const double norm = 1.0 / std::max(1, out.num_gts);
  auto scaled = [&](const std::vector<ad::Var>& terms) { return ad::scale(ad::sum_scalars(tape, terms), norm); };
  out.mqf = scaled(mqf);
  out.r = scaled(reg);
  out.pd = scaled(pd);
  out.aux = scaled(aux);
  out.total = ad::add(ad::add(ad::add(out.mqf, out.r), out.pd), out.aux);
  return out;
}

/// Result of a full forward/backward pass over one batch.
struct StepEvaluation {
  StepLosses losses;
  DistillStats stats;
  int num_gts = 0;
  std::vector<double> grad;                ///< d L_total / d student params
  std::vector<ad::Matrix> detached_values;  ///< replay record
};

/// Loss and gradient for one batch. With `replay` the tape reuses the given
/// detached values, so matches and stop-gradient inputs stay fixed.
inline StepEvaluation evaluate_step(const ModelParams& student, const ModelParams* teacher, const TrainConfig& cfg,
                                    std::span<const Sample* const> batch, bool with_grad = true,
                                    const std::vector<ad::Matrix>* replay = nullptr) {
  ad::Tape tape(with_grad);
  if (replay)
    tape.replay(*replay);
  else
    tape.record_detached();
  ParamBinding sb(tape, student, true);
  std::optional<ParamBinding> tb;
  if (teacher) tb.emplace(tape, *teacher, false);
  StepTerms terms = build_step(sb, tb ? &*tb : nullptr, cfg, batch);
  StepEvaluation ev;
  ev.losses = values_of(terms);
  ev.stats = terms.stats;
  ev.num_gts = terms.num_gts;
  if (!std::isfinite(ev.losses.total)) throw NumericalError("non-finite total loss");
  if (with_grad) {
    tape.backward(terms.total);
    ev.grad = sb.gradients();
  }
  if (!replay) ev.detached_values = tape.detached_values();
  return ev;
}

/// SGD with momentum over the flat parameter buffer.
class MomentumSgd {
 public:
  MomentumSgd(std::size_t n, double momentum) : momentum_(momentum), velocity_(n, 0.0) {}

  /// Returns the gradient norm before clipping.
  double step(std::span<double> params, std::span<const double> grad, double lr, double clip = 0.0) {
    if (params.size() != velocity_.size() || grad.size() != velocity_.size())
      throw std::invalid_argument("optimizer: size mismatch");
    double sq = 0;
    for (double g : grad) sq += g * g;
    const double norm = std::sqrt(sq);
    const double k = clip > 0 && norm > clip ? clip / norm : 1.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      velocity_[i] = momentum_ * velocity_[i] + k * grad[i];
      params[i] -= lr * velocity_[i];
    }
    return norm;
  }

 private:
  double momentum_;
  std::vector<double> velocity_;
};

/// Adam with bias correction; same interface as MomentumSgd.
class Adam {
 public:
  Adam(std::size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : b1_(beta1), b2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  double step(std::span<double> params, std::span<const double> grad, double lr, double clip = 0.0) {
    if (params.size() != m_.size() || grad.size() != m_.size()) throw std::invalid_argument("optimizer: size mismatch");
    double sq = 0;
    for (double g : grad) sq += g * g;
    const double norm = std::sqrt(sq);
    const double k = clip > 0 && norm > clip ? clip / norm : 1.0;
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = k * grad[i];
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * g * g;
      params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
    return norm;
  }

 private:
  double b1_, b2_, eps_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

/// Learning rate for a 0-based epoch index: one decay at lr_decay_epoch.
inline double learning_rate(const TrainConfig& cfg, int epoch) {
  return epoch >= cfg.lr_decay_epoch ? cfg.lr * cfg.decay_factor : cfg.lr;
}

}  // namespace oddetr
