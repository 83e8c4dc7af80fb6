// SPDX-License-Identifier: Apache-2.0
//
// Online distillation from an EMA teacher:
//
//  * matching distillation: the teacher's query-GT assignment is fused with
//    the student's own into per-query supervision (up to two class targets,
//    one regression target, the higher-cost of two queries sharing a GT is
//    down-weighted);
//  * prediction distillation: the student decodes the teacher's queries and
//    is pulled toward the teacher's outputs for those same queries, with a
//    quality-adjusted teacher score and an IoU gate on the box term;
//  * auxiliary groups: per teacher stage, the two lowest-cost queries for each
//    GT are decoded again by the student as an extra, isolated query group.

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "oddetr/autodiff.hpp"
#include "oddetr/errors.hpp"
#include "oddetr/geometry.hpp"
#include "oddetr/losses.hpp"
#include "oddetr/matching.hpp"
#include "oddetr/network.hpp"

namespace oddetr {

enum class Provenance { none, student_match, teacher_match, both };

struct RegTarget {
  int gt = -1;
  Box box;
  RegressionRole role = RegressionRole::lower_cost;
};

struct QueryTargets {
  std::optional<MultiTarget> cls;  ///< empty: background
  std::optional<RegTarget> reg;
  Provenance provenance = Provenance::none;
};

struct DistillTargets {
  std::vector<QueryTargets> queries;

  int size() const { return static_cast<int>(queries.size()); }

  int two_class_queries() const {
    return static_cast<int>(std::count_if(queries.begin(), queries.end(), [](const QueryTargets& q) {
      return q.cls && q.cls->secondary().has_value();
    }));
  }

  int higher_cost_count() const {
    return static_cast<int>(std::count_if(queries.begin(), queries.end(), [](const QueryTargets& q) {
      return q.reg && q.reg->role == RegressionRole::higher_cost;
    }));
  }

  /// Throws InvariantViolation when a structural rule is broken. With
  /// `regression_follows_matches` every matched query must carry exactly one
  /// regression target.
  void check_invariants(int num_gts, bool regression_follows_matches = true) const {
    std::vector<int> count(static_cast<std::size_t>(num_gts), 0), higher(static_cast<std::size_t>(num_gts), 0);
    for (std::size_t q = 0; q < queries.size(); ++q) {
      const auto& t = queries[q];
      const bool matched = t.provenance != Provenance::none;
      if (regression_follows_matches && matched != t.reg.has_value())
        throw InvariantViolation("query " + std::to_string(q) + ": regression target does not follow provenance");
      if (!matched && t.reg) throw InvariantViolation("query " + std::to_string(q) + ": unmatched query regresses");
      if (t.reg) {
        if (t.reg->gt < 0 || t.reg->gt >= num_gts) throw InvariantViolation("regression target gt out of range");
        ++count[static_cast<std::size_t>(t.reg->gt)];
        if (t.reg->role == RegressionRole::higher_cost) ++higher[static_cast<std::size_t>(t.reg->gt)];
      }
      if (t.cls && t.cls->secondary() && t.cls->secondary()->class_index == t.cls->primary().class_index)
        throw InvariantViolation("two-class target with identical classes");
    }
    for (int g = 0; g < num_gts; ++g) {
      const auto c = count[static_cast<std::size_t>(g)], h = higher[static_cast<std::size_t>(g)];
      if (c > 2) throw InvariantViolation("gt " + std::to_string(g) + " regressed by more than two queries");
      if (c == 2 && h != 1) throw InvariantViolation("gt " + std::to_string(g) + " shared without exactly one higher-cost query");
      if (c < 2 && h != 0) throw InvariantViolation("gt " + std::to_string(g) + " has a higher-cost query but is not shared");
    }
  }
};

namespace detail {

/// Counts entries into the distillation machinery on this thread; lets a
/// caller prove a plain baseline step never touched it.
inline std::uint64_t& distill_invocations() {
  thread_local std::uint64_t n = 0;
  return n;
}

inline void check_match(const MatchResult& m, int num_queries, int num_gts, const char* who) {
  if (static_cast<int>(m.pairs.size() + m.unmatched_gts.size()) != num_gts)
    throw std::invalid_argument(std::string(who) + ": match does not cover the GT set");
  for (const auto& p : m.pairs)
    if (p.query < 0 || p.query >= num_queries || p.gt < 0 || p.gt >= num_gts)
      throw std::invalid_argument(std::string(who) + ": match index out of range");
}

}  // namespace detail

/// Plain one-to-one supervision from a single match.
inline DistillTargets one_to_one_targets(const MatchResult& m, const PredictionSet& preds,
                                         std::span<const GroundTruth> gts) {
  detail::check_match(m, preds.size(), static_cast<int>(gts.size()), "one_to_one_targets");
  DistillTargets out;
  out.queries.resize(static_cast<std::size_t>(preds.size()));
  for (const auto& p : m.pairs) {
    const auto& gt = gts[static_cast<std::size_t>(p.gt)];
    auto& q = out.queries[static_cast<std::size_t>(p.query)];
    q.cls = MultiTarget(ClassTarget{gt.class_index, iou(preds.box(p.query), gt.box)});
    q.reg = RegTarget{p.gt, gt.box, RegressionRole::lower_cost};
    q.provenance = Provenance::student_match;
  }
  return out;
}

struct MdOptions {
  /// Regress teacher-only matched queries (off: regression stays one-to-one).
  bool regression = true;
  /// Teacher-derived matches with IoU below this are discarded (conditional MD).
  double iou_threshold = 0.0;
};

/// Fuses the student's and the teacher's assignments into per-query targets.
///
/// `student_costs` is the student's cost matrix; it ranks two queries that end
/// up regressing the same GT.
inline DistillTargets matching_distillation(const MatchResult& student_match, const MatchResult& teacher_match,
                                            const PredictionSet& preds, std::span<const GroundTruth> gts,
                                            const CostMatrix& student_costs, const MdOptions& opts = {}) {
  ++detail::distill_invocations();
  const int nq = preds.size();
  const int ng = static_cast<int>(gts.size());
  detail::check_match(student_match, nq, ng, "matching_distillation(student)");
  detail::check_match(teacher_match, nq, ng, "matching_distillation(teacher)");
  if (student_costs.rows() != nq || student_costs.cols() != ng)
    throw std::invalid_argument("matching_distillation: cost matrix shape mismatch");

  const auto sgt = student_match.gt_per_query(nq);
  const auto tgt = teacher_match.gt_per_query(nq);
  DistillTargets out;
  out.queries.resize(static_cast<std::size_t>(nq));
  for (int q = 0; q < nq; ++q) {
    auto& t = out.queries[static_cast<std::size_t>(q)];
    const int sg = sgt[static_cast<std::size_t>(q)];
    int tg = tgt[static_cast<std::size_t>(q)];
    const Box b = preds.box(q);
    double t_iou = 0;
    if (tg >= 0 && tg != sg) {
      t_iou = iou(b, gts[static_cast<std::size_t>(tg)].box);
      if (t_iou < opts.iou_threshold) tg = -1;
    }
    if (sg >= 0) {
      const auto& gs = gts[static_cast<std::size_t>(sg)];
      const ClassTarget primary{gs.class_index, iou(b, gs.box)};
      if (tg >= 0 && tg != sg && gts[static_cast<std::size_t>(tg)].class_index != gs.class_index)
        t.cls = MultiTarget(primary, ClassTarget{gts[static_cast<std::size_t>(tg)].class_index, t_iou});
      else
        t.cls = MultiTarget(primary);
      t.reg = RegTarget{sg, gs.box, RegressionRole::lower_cost};
      t.provenance = tg >= 0 ? Provenance::both : Provenance::student_match;
    } else if (tg >= 0) {
      const auto& gtt = gts[static_cast<std::size_t>(tg)];
      t.cls = MultiTarget(ClassTarget{gtt.class_index, t_iou});
      if (opts.regression) t.reg = RegTarget{tg, gtt.box, RegressionRole::lower_cost};
      t.provenance = Provenance::teacher_match;
    }
  }

  // A GT regressed by two queries: the one with the larger matching cost is
  // down-weighted. On a tie the teacher-only query yields.
  std::vector<std::vector<int>> by_gt(static_cast<std::size_t>(ng));
  for (int q = 0; q < nq; ++q)
    if (const auto& r = out.queries[static_cast<std::size_t>(q)].reg) by_gt[static_cast<std::size_t>(r->gt)].push_back(q);
  for (int g = 0; g < ng; ++g) {
    const auto& qs = by_gt[static_cast<std::size_t>(g)];
    if (qs.size() < 2) continue;
    if (qs.size() > 2) throw InvariantViolation("matching_distillation: gt claimed by more than two queries");
    const int a = qs[0], b = qs[1];
    const bool a_student = sgt[static_cast<std::size_t>(a)] == g;
    const int student_q = a_student ? a : b;
    const int teacher_q = a_student ? b : a;
    const bool teacher_higher = student_costs(teacher_q, g) >= student_costs(student_q, g);
    out.queries[static_cast<std::size_t>(teacher_higher ? teacher_q : student_q)].reg->role =
        RegressionRole::higher_cost;
  }
  return out;
}

/// Matching distillation that keeps teacher-derived matches only when their
/// IoU with the prediction reaches `iou_threshold`.
inline DistillTargets conditional_md(const MatchResult& student_match, const MatchResult& teacher_match,
                                     const PredictionSet& preds, std::span<const GroundTruth> gts,
                                     const CostMatrix& student_costs, double iou_threshold = 0.5) {
  MdOptions opts;
  opts.iou_threshold = iou_threshold;
  return matching_distillation(student_match, teacher_match, preds, gts, student_costs, opts);
}

// ---------------------------------------------------------------------------
// Detection losses over a query set

struct LossConfig {
  double gamma = 2.0;
  double cls_weight = 1.0;
  RegressionWeights reg{};
  double w_d = 0.51;
  bool downweight_reg = true;
  /// Also scale the classification loss of a higher-cost query by w_d.
  bool downweight_cls = false;
};

/// Full-vector QFL: matched classes take their quality targets, every other
/// class (and every class of a background query) is pushed toward 0.
inline double classification_loss(const Eigen::MatrixXd& scores, const DistillTargets& targets, const LossConfig& cfg,
                                  Eigen::MatrixXd* grad = nullptr) {
  if (scores.rows() != targets.size()) throw std::invalid_argument("classification_loss: size mismatch");
  if (grad) *grad = Eigen::MatrixXd::Zero(scores.rows(), scores.cols());
  double total = 0;
  Eigen::RowVectorXd label(scores.cols());
  for (Eigen::Index q = 0; q < scores.rows(); ++q) {
    const auto& t = targets.queries[static_cast<std::size_t>(q)];
    label.setZero();
    if (t.cls) {
      label(t.cls->primary().class_index) = t.cls->primary().iou;
      if (t.cls->secondary()) label(t.cls->secondary()->class_index) = t.cls->secondary()->iou;
    }
    double w = cfg.cls_weight;
    if (cfg.downweight_cls && t.reg && t.reg->role == RegressionRole::higher_cost) w *= cfg.w_d;
    for (Eigen::Index c = 0; c < scores.cols(); ++c) {
      total += w * qfl(scores(q, c), label(c), cfg.gamma);
      if (grad) (*grad)(q, c) = w * qfl_grad(scores(q, c), label(c), cfg.gamma);
    }
  }
  return total;
}

inline double regression_loss_total(const Eigen::MatrixXd& boxes, const DistillTargets& targets, const LossConfig& cfg,
                                    Eigen::MatrixXd* grad = nullptr) {
  if (boxes.rows() != targets.size()) throw std::invalid_argument("regression_loss_total: size mismatch");
  if (grad) *grad = Eigen::MatrixXd::Zero(boxes.rows(), 4);
  double total = 0;
  for (Eigen::Index q = 0; q < boxes.rows(); ++q) {
    const auto& t = targets.queries[static_cast<std::size_t>(q)];
    if (!t.reg) continue;
    const Box b{boxes(q, 0), boxes(q, 1), boxes(q, 2), boxes(q, 3)};
    const RegressionRole role = cfg.downweight_reg ? t.reg->role : RegressionRole::lower_cost;
    BoxGrad g{};
    total += regression_loss_grad(b, t.reg->box, role, cfg.w_d, cfg.reg, g);
    if (grad)
      for (int k = 0; k < 4; ++k) (*grad)(q, k) = g[static_cast<std::size_t>(k)];
  }
  return total;
}

inline ad::Var classification_loss(const ad::Var& scores, const DistillTargets& targets, const LossConfig& cfg) {
  Eigen::MatrixXd g;
  const double v = classification_loss(scores.value(), targets, cfg, scores.requires_grad() ? &g : nullptr);
  return ad::custom_scalar(scores.tape(), v, {{scores, std::move(g)}});
}

inline ad::Var regression_loss_total(const ad::Var& boxes, const DistillTargets& targets, const LossConfig& cfg) {
  Eigen::MatrixXd g;
  const double v = regression_loss_total(boxes.value(), targets, cfg, boxes.requires_grad() ? &g : nullptr);
  return ad::custom_scalar(boxes.tape(), v, {{boxes, std::move(g)}});
}

// ---------------------------------------------------------------------------
// Prediction distillation

/// Quality-adjusted teacher score: entry c_g becomes c'[c_g]^alpha * iou'^beta.
inline std::vector<double> teacher_score_update(std::span<const double> scores, int class_index, double teacher_iou,
                                                double alpha = 0.25, double beta = 0.75) {
  ++detail::distill_invocations();
  check_class(scores, class_index);
  std::vector<double> out(scores.begin(), scores.end());
  auto& e = out[static_cast<std::size_t>(class_index)];
  e = std::pow(e, alpha) * std::pow(teacher_iou, beta);
  return out;
}

/// Teacher and student outputs decoded from the same teacher query.
struct PdPair {
  Prediction teacher;
  Prediction student;
};

inline std::vector<PdPair> make_pd_pairs(const PredictionSet& student, const PredictionSet& teacher) {
  if (student.size() != teacher.size()) throw std::invalid_argument("make_pd_pairs: query counts differ");
  std::vector<PdPair> pairs;
  pairs.reserve(static_cast<std::size_t>(student.size()));
  for (int i = 0; i < student.size(); ++i) pairs.push_back({teacher.at(i), student.at(i)});
  return pairs;
}

enum class PdClassTarget {
  full_vector,   ///< soft QFL against the whole updated teacher vector
  single_entry,  ///< only c_g carries the updated score, other classes target 0
};

struct PdOptions {
  double alpha = 0.25;
  double beta = 0.75;
  double gamma = 2.0;
  RegressionWeights reg{};
  /// Use the updated teacher score as classification target and box weight.
  bool tood_weight = true;
  /// Keep the box term only when the teacher beats the student on IoU.
  bool listen2stu = true;
  /// Regress every pair toward the teacher box, matched or not.
  bool regress_all_pairs = false;
  PdClassTarget cls_target = PdClassTarget::full_vector;
};

struct PdGrad {
  Eigen::MatrixXd scores;  ///< d loss / d student scores (N x C)
  Eigen::MatrixXd boxes;   ///< d loss / d student boxes (N x 4)
};

struct PdStats {
  int matched_pairs = 0;
  int gated_off = 0;
};

namespace detail {

inline double soft_qfl(std::span<const double> s, std::span<const double> target, double gamma, double* grad) {
  double total = 0;
  for (std::size_t c = 0; c < s.size(); ++c) {
    total += qfl(s[c], target[c], gamma);
    if (grad) grad[c] = qfl_grad(s[c], target[c], gamma);
  }
  return total;
}

inline double weighted_box_term(const Box& b, const Box& target, double weight, const RegressionWeights& lambdas,
                                double* grad) {
  BoxGrad g{};
  const double v = regression_loss_grad(b, target, RegressionRole::lower_cost, 1.0, lambdas, g);
  if (grad)
    for (std::size_t k = 0; k < 4; ++k) grad[k] = weight * g[k];
  return weight * v;
}

}  // namespace detail

/// Gated, quality-weighted distillation over index-aligned pairs. The gate
/// compares IoUs of the student's box (or `gate_boxes`, when given, so a
/// caller can hold the gate fixed) and the teacher's box against the GT.
inline double prediction_distillation(std::span<const PdPair> pairs, const MatchResult& teacher_match,
                                      std::span<const GroundTruth> gts, const PdOptions& opts = {},
                                      PdGrad* grad = nullptr, PdStats* stats = nullptr,
                                      std::span<const Box> gate_boxes = {}) {
  ++detail::distill_invocations();
  const int n = static_cast<int>(pairs.size());
  if (!gate_boxes.empty() && static_cast<int>(gate_boxes.size()) != n)
    throw std::invalid_argument("prediction_distillation: one gate box per pair required");
  const int nc = n > 0 ? static_cast<int>(pairs[0].student.scores.size()) : 0;
  if (grad) {
    grad->scores = Eigen::MatrixXd::Zero(n, nc);
    grad->boxes = Eigen::MatrixXd::Zero(n, 4);
  }
  for (const auto& p : teacher_match.pairs)
    if (p.query >= n || p.gt >= static_cast<int>(gts.size()))
      throw std::invalid_argument("prediction_distillation: teacher match index out of range");
  const auto tgt = teacher_match.gt_per_query(n);
  double total = 0;
  std::vector<double> gcls(static_cast<std::size_t>(nc));
  std::array<double, 4> gbox{};
  for (int i = 0; i < n; ++i) {
    const auto& pr = pairs[static_cast<std::size_t>(i)];
    const auto& cs = pr.student.scores;
    const int g = tgt[static_cast<std::size_t>(i)];
    double* gc = grad ? gcls.data() : nullptr;
    bool box_term = opts.regress_all_pairs;
    double box_weight = 1.0;
    if (g >= 0) {
      const auto& gt = gts[static_cast<std::size_t>(g)];
      const double teacher_iou = iou(pr.teacher.box, gt.box);
      std::vector<double> target =
          opts.tood_weight ? teacher_score_update(pr.teacher.scores, gt.class_index, teacher_iou, opts.alpha, opts.beta)
                           : pr.teacher.scores;
      const double cg = target[static_cast<std::size_t>(gt.class_index)];
      if (opts.cls_target == PdClassTarget::single_entry) {
        std::fill(target.begin(), target.end(), 0.0);
        target[static_cast<std::size_t>(gt.class_index)] = cg;
      }
      total += detail::soft_qfl(cs, target, opts.gamma, gc);
      box_weight = opts.tood_weight ? cg : 1.0;
      const Box& mine = gate_boxes.empty() ? pr.student.box : gate_boxes[static_cast<std::size_t>(i)];
      const bool gate = !opts.listen2stu || teacher_iou > iou(mine, gt.box);
      box_term = gate;
      if (stats) {
        ++stats->matched_pairs;
        if (!gate) ++stats->gated_off;
      }
    } else {
      total += detail::soft_qfl(cs, pr.teacher.scores, opts.gamma, gc);
    }
    if (grad) grad->scores.row(i) = Eigen::Map<const Eigen::RowVectorXd>(gcls.data(), nc);
    if (box_term) {
      total += detail::weighted_box_term(pr.student.box, pr.teacher.box, box_weight, opts.reg, grad ? gbox.data() : nullptr);
      if (grad) grad->boxes.row(i) << gbox[0], gbox[1], gbox[2], gbox[3];
    }
  }
  return total;
}

/// Distillation applied evenly: raw teacher scores as QFL targets and an
/// unweighted, ungated box term for every pair.
inline double naive_distillation(std::span<const PdPair> pairs, const PdOptions& base = {}, PdGrad* grad = nullptr) {
  PdOptions opts = base;
  opts.tood_weight = false;
  opts.listen2stu = false;
  opts.regress_all_pairs = true;
  opts.cls_target = PdClassTarget::full_vector;
  return prediction_distillation(pairs, MatchResult{}, {}, opts, grad);
}

// ---------------------------------------------------------------------------
// Auxiliary groups

struct AuxMember {
  int source_query = -1;  ///< index in the teacher's query set
  int gt = -1;            ///< GT this member was selected for
  int rank = 0;           ///< 0 = lowest cost for that GT
  double cost = 0;
};

struct AuxGroup {
  int stage = 0;
  QuerySet queries;  ///< teacher's updated queries and boxes at that stage
  std::vector<AuxMember> members;
  /// The teacher's own assignment restated over member indices.
  MatchResult inherited;

  int size() const { return static_cast<int>(members.size()); }
};

/// Two lowest-cost teacher queries per GT, per teacher stage.
inline std::vector<AuxGroup> build_auxiliary_groups(std::span<const StageOutput> teacher_stages,
                                                    std::span<const Assignment> teacher_assignments,
                                                    std::span<const GroundTruth> gts) {
  std::vector<AuxGroup> groups;
  ++detail::distill_invocations();
  if (gts.empty()) return groups;
  if (teacher_stages.size() != teacher_assignments.size())
    throw std::invalid_argument("build_auxiliary_groups: one assignment per teacher stage required");
  const int ng = static_cast<int>(gts.size());
  for (std::size_t s = 0; s < teacher_stages.size(); ++s) {
    const auto& out = teacher_stages[s];
    const auto& a = teacher_assignments[s];
    const int nq = out.queries.size();
    if (a.costs.rows() != nq || a.costs.cols() != ng)
      throw std::invalid_argument("build_auxiliary_groups: cost matrix shape mismatch");
    AuxGroup g;
    g.stage = static_cast<int>(s);
    std::vector<int> order(static_cast<std::size_t>(nq));
    for (int j = 0; j < ng; ++j) {
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return a.costs(x, j) < a.costs(y, j); });
      const int take = std::min(2, nq);
      const auto matched = a.result.query_of_gt(j);
      for (int r = 0; r < take; ++r) {
        const int q = order[static_cast<std::size_t>(r)];
        const int member = static_cast<int>(g.members.size());
        g.members.push_back({q, j, r, a.costs(q, j)});
        if (matched && *matched == q) g.inherited.pairs.push_back({member, j, a.costs(q, j)});
      }
    }
    const int m = static_cast<int>(g.members.size());
    g.queries.embeddings.resize(m, out.queries.embeddings.cols());
    g.queries.anchors.resize(m, 4);
    std::vector<char> member_matched(static_cast<std::size_t>(m), 0);
    for (const auto& p : g.inherited.pairs) member_matched[static_cast<std::size_t>(p.query)] = 1;
    for (int k = 0; k < m; ++k) {
      const int q = g.members[static_cast<std::size_t>(k)].source_query;
      g.queries.embeddings.row(k) = out.queries.embeddings.row(q);
      g.queries.anchors.row(k) = out.predictions.boxes.row(q);
      if (!member_matched[static_cast<std::size_t>(k)]) g.inherited.unmatched_queries.push_back(k);
    }
    for (int j = 0; j < ng; ++j)
      if (!g.inherited.query_of_gt(j)) g.inherited.unmatched_gts.push_back(j);
    groups.push_back(std::move(g));
  }
  return groups;
}

enum class AuxVariant { md, re_matching, original_matching };

struct SupervisionConfig {
  CostWeights cost{};
  LossConfig loss{};
  MdOptions md{};
};

struct DistillStats {
  int two_class_queries = 0;
  int higher_cost_assignments = 0;
  int gated_off_pd_pairs = 0;
  int pd_matched_pairs = 0;
  int aux_group_queries = 0;

  DistillStats& operator+=(const DistillStats& o) {
    two_class_queries += o.two_class_queries;
    higher_cost_assignments += o.higher_cost_assignments;
    gated_off_pd_pairs += o.gated_off_pd_pairs;
    pd_matched_pairs += o.pd_matched_pairs;
    aux_group_queries += o.aux_group_queries;
    return *this;
  }
};

/// Detached predictions of a stage, for matching.
inline PredictionSet detached_predictions(const StageVars& sv) {
  ad::Tape& t = sv.scores.tape();
  return PredictionSet{t.detach(sv.scores).value(), t.detach(sv.boxes).value()};
}

/// Loss of the auxiliary groups decoded by the student. Each group runs
/// through the student's decoder in its own forward pass.
inline ad::Var aux_group_loss(ParamBinding& student, const FeatureGrid& f, std::span<const AuxGroup> groups,
                              std::span<const GroundTruth> gts, AuxVariant variant, const SupervisionConfig& cfg,
                              DistillStats* stats = nullptr) {
  ++detail::distill_invocations();
  ad::Tape& tape = student.tape();
  std::vector<ad::Var> terms;
  const int limit = student.params().config().num_queries;
  for (const auto& g : groups) {
    if (g.size() > limit)
      throw ConfigError("auxiliary group of " + std::to_string(g.size()) + " queries exceeds num_queries " +
                        std::to_string(limit));
    if (g.size() == 0) continue;
    if (stats) stats->aux_group_queries += g.size();
    auto stages = decode_graph(student, f, tape.constant(g.queries.embeddings), g.queries.anchors);
    for (const auto& sv : stages) {
      const PredictionSet preds = detached_predictions(sv);
      DistillTargets targets;
      if (variant == AuxVariant::original_matching) {
        targets = one_to_one_targets(g.inherited, preds, gts);
      } else {
        const Assignment fresh = assign(preds, gts, cfg.cost);
        targets = variant == AuxVariant::md
                      ? matching_distillation(fresh.result, g.inherited, preds, gts, fresh.costs, cfg.md)
                      : one_to_one_targets(fresh.result, preds, gts);
      }
      if (stats) {
        stats->two_class_queries += targets.two_class_queries();
        stats->higher_cost_assignments += targets.higher_cost_count();
      }
      terms.push_back(classification_loss(sv.scores, targets, cfg.loss));
      terms.push_back(regression_loss_total(sv.boxes, targets, cfg.loss));
    }
  }
  return ad::sum_scalars(tape, terms);
}

/// Value-only auxiliary loss (unnormalized sum over groups and stages).
inline double aux_group_loss(const ModelParams& student, const FeatureGrid& f, std::span<const AuxGroup> groups,
                             std::span<const GroundTruth> gts, AuxVariant variant, const SupervisionConfig& cfg = {}) {
  ad::Tape tape(false);
  ParamBinding bind(tape, student, false);
  return aux_group_loss(bind, f, groups, gts, variant, cfg).scalar();
}

/// Teacher queries decoded by the student as an extra group and supervised
/// against the GTs through a fresh match. No teacher output is consulted.
inline ad::Var query_prior_assignment(ParamBinding& student, const FeatureGrid& f, const QuerySet& teacher_queries,
                                      std::span<const GroundTruth> gts, const SupervisionConfig& cfg) {
  ++detail::distill_invocations();
  ad::Tape& tape = student.tape();
  if (teacher_queries.size() == 0) return tape.constant(ad::Matrix::Zero(1, 1));
  std::vector<ad::Var> terms;
  auto stages = decode_graph(student, f, tape.constant(teacher_queries.embeddings), teacher_queries.anchors);
  for (const auto& sv : stages) {
    const PredictionSet preds = detached_predictions(sv);
    const auto targets = one_to_one_targets(match(preds, gts, cfg.cost), preds, gts);
    terms.push_back(classification_loss(sv.scores, targets, cfg.loss));
    terms.push_back(regression_loss_total(sv.boxes, targets, cfg.loss));
  }
  return ad::sum_scalars(tape, terms);
}

inline double query_prior_assignment(const QuerySet& teacher_queries, std::span<const GroundTruth> gts,
                                     const ModelParams& student, const FeatureGrid& f, const SupervisionConfig& cfg = {}) {
  ad::Tape tape(false);
  ParamBinding bind(tape, student, false);
  return query_prior_assignment(bind, f, teacher_queries, gts, cfg).scalar();
}

}  // namespace oddetr
