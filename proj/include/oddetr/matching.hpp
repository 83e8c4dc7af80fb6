// SPDX-License-Identifier: Apache-2.0
//
// DETR-style matching: a dense cost matrix between query predictions and
// ground-truth objects, solved for the optimal one-to-one assignment with the
// Hungarian (Kuhn-Munkres) algorithm.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "oddetr/geometry.hpp"

namespace oddetr {

/// One query's decoded output: a box plus per-class sigmoid scores.
struct Prediction {
  Box box;
  std::vector<double> scores;
};

/// Row-aligned predictions of a query set: scores is (N x C), boxes is (N x 4)
/// holding (cx, cy, w, h) per row.
struct PredictionSet {
  Eigen::MatrixXd scores;
  Eigen::MatrixXd boxes;

  int size() const { return static_cast<int>(boxes.rows()); }
  int num_classes() const { return static_cast<int>(scores.cols()); }

  Box box(int i) const { return Box{boxes(i, 0), boxes(i, 1), boxes(i, 2), boxes(i, 3)}; }

  Prediction at(int i) const {
    Prediction p{box(i), std::vector<double>(static_cast<std::size_t>(scores.cols()))};
    for (int c = 0; c < scores.cols(); ++c) p.scores[static_cast<std::size_t>(c)] = scores(i, c);
    return p;
  }

  static PredictionSet from(std::span<const Prediction> preds) {
    PredictionSet set;
    const auto n = static_cast<Eigen::Index>(preds.size());
    const auto c = preds.empty() ? Eigen::Index{0} : static_cast<Eigen::Index>(preds[0].scores.size());
    set.scores.resize(n, c);
    set.boxes.resize(n, 4);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& p = preds[static_cast<std::size_t>(i)];
      if (static_cast<Eigen::Index>(p.scores.size()) != c)
        throw std::invalid_argument("predictions disagree on class count");
      for (Eigen::Index k = 0; k < c; ++k) set.scores(i, k) = p.scores[static_cast<std::size_t>(k)];
      set.boxes.row(i) << p.box.cx, p.box.cy, p.box.w, p.box.h;
    }
    return set;
  }
};

struct CostWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
};

/// Focal-style classification cost of a sigmoid score for the GT class.
inline double focal_class_cost(double p, double alpha = 0.25, double gamma = 2.0) {
  constexpr double eps = 1e-8;
  const double pos = alpha * std::pow(1.0 - p, gamma) * -std::log(p + eps);
  const double neg = (1.0 - alpha) * std::pow(p, gamma) * -std::log(1.0 - p + eps);
  return pos - neg;
}

/// Cost components of one (query, gt) cell. `giou` stores the raw GIoU; it
/// enters the total negated.
struct CostCell {
  double cls = 0, l1 = 0, giou = 0;
};

class CostMatrix {
 public:
  CostMatrix() = default;
  CostMatrix(int rows, int cols, CostWeights weights)
      : rows_(rows), cols_(cols), weights_(weights),
        cells_(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)),
        total_(cells_.size(), 0.0) {}

  /// A matrix given directly by its totals; components are left at zero and
  /// only the totals are meaningful.
  static CostMatrix from_values(int rows, int cols, std::span<const double> values) {
    if (values.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols))
      throw std::invalid_argument("cost matrix value count does not match shape");
    CostMatrix m(rows, cols, CostWeights{});
    m.raw_ = true;
    for (std::size_t k = 0; k < values.size(); ++k) {
      if (!std::isfinite(values[k])) throw std::invalid_argument("non-finite cost entry");
      m.total_[k] = values[k];
    }
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  const CostWeights& weights() const { return weights_; }
  bool has_components() const { return !raw_; }

  double operator()(int i, int j) const { return total_[index(i, j)]; }
  const CostCell& component(int i, int j) const { return cells_[index(i, j)]; }

  void set(int i, int j, const CostCell& cell) {
    cells_[index(i, j)] = cell;
    total_[index(i, j)] = combine(cell);
  }

  /// Total recomputed from the stored components.
  double combine(const CostCell& c) const {
    return weights_.cls * c.cls + weights_.l1 * c.l1 + weights_.giou * (-c.giou);
  }

 private:
  std::size_t index(int i, int j) const {
    return static_cast<std::size_t>(i) * static_cast<std::size_t>(cols_) + static_cast<std::size_t>(j);
  }

  int rows_ = 0, cols_ = 0;
  CostWeights weights_{};
  bool raw_ = false;
  std::vector<CostCell> cells_;
  std::vector<double> total_;
};

struct MatchPair {
  int query = -1;
  int gt = -1;
  double cost = 0;

  friend bool operator==(const MatchPair&, const MatchPair&) = default;
};

struct MatchResult {
  /// Sorted by gt index.
  std::vector<MatchPair> pairs;
  std::vector<int> unmatched_queries;
  std::vector<int> unmatched_gts;
  std::vector<std::string> warnings;

  double total_cost() const {
    double s = 0;
    for (const auto& p : pairs) s += p.cost;
    return s;
  }

  std::optional<int> gt_of_query(int q) const {
    for (const auto& p : pairs)
      if (p.query == q) return p.gt;
    return std::nullopt;
  }

  std::optional<int> query_of_gt(int g) const {
    for (const auto& p : pairs)
      if (p.gt == g) return p.query;
    return std::nullopt;
  }

  /// Per-query GT index (or -1), length num_queries.
  std::vector<int> gt_per_query(int num_queries) const {
    std::vector<int> out(static_cast<std::size_t>(num_queries), -1);
    for (const auto& p : pairs) out[static_cast<std::size_t>(p.query)] = p.gt;
    return out;
  }

  friend bool operator==(const MatchResult& a, const MatchResult& b) {
    return a.pairs == b.pairs && a.unmatched_queries == b.unmatched_queries &&
           a.unmatched_gts == b.unmatched_gts;
  }
};

/// A cost matrix together with its optimal assignment.
struct Assignment {
  CostMatrix costs;
  MatchResult result;
};

inline constexpr double kPadCost = 1e6;

inline CostMatrix build_cost_matrix(const PredictionSet& preds, std::span<const GroundTruth> gts,
                                    const CostWeights& weights = {}) {
  const int n = preds.size();
  if (n == 0) throw std::invalid_argument("build_cost_matrix: no predictions");
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < preds.num_classes(); ++c)
      if (!std::isfinite(preds.scores(i, c)))
        throw std::invalid_argument("build_cost_matrix: non-finite score at query " + std::to_string(i));
  const int m = static_cast<int>(gts.size());
  CostMatrix cm(n, m, weights);
  for (int i = 0; i < n; ++i) {
    const Box b = preds.box(i);
    for (int j = 0; j < m; ++j) {
      const auto& gt = gts[static_cast<std::size_t>(j)];
      if (gt.class_index < 0 || gt.class_index >= preds.num_classes())
        throw std::invalid_argument("build_cost_matrix: gt class out of range");
      CostCell cell;
      cell.cls = focal_class_cost(preds.scores(i, gt.class_index), weights.focal_alpha, weights.focal_gamma);
      cell.l1 = l1_distance(b, gt.box);
      cell.giou = giou(b, gt.box);
      cm.set(i, j, cell);
    }
  }
  return cm;
}

inline CostMatrix build_cost_matrix(std::span<const Prediction> preds, std::span<const GroundTruth> gts,
                                    const CostWeights& weights = {}) {
  return build_cost_matrix(PredictionSet::from(preds), gts, weights);
}

namespace detail {

// Kuhn-Munkres with row/column potentials on a square matrix. Returns, for
// every row, the assigned column. Rows are inserted in index order, which fixes
// the tie-breaking among equal-cost optima.
inline std::vector<int> solve_square(const std::vector<double>& a, std::size_t n) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  auto at = [&](std::size_t i, std::size_t j) { return a[(i - 1) * n + (j - 1)]; };
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = at(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (std::size_t j = 1; j <= n; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = static_cast<int>(j - 1);
  return row_to_col;
}

}  // namespace detail

/// Optimal one-to-one assignment of GT columns to query rows.
///
/// The problem is square-padded with kPadCost. When there are fewer queries
/// than GTs every query is matched and the surplus GTs are reported in
/// unmatched_gts together with a warning.
inline MatchResult hungarian(const CostMatrix& c) {
  MatchResult out;
  const int rows = c.rows(), cols = c.cols();
  if (cols == 0) {
    for (int i = 0; i < rows; ++i) out.unmatched_queries.push_back(i);
    return out;
  }
  const auto n = static_cast<std::size_t>(std::max(rows, cols));
  std::vector<double> a(n * n, kPadCost);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) a[static_cast<std::size_t>(i) * n + static_cast<std::size_t>(j)] = c(i, j);

  const auto row_to_col = detail::solve_square(a, n);
  std::vector<char> gt_taken(static_cast<std::size_t>(cols), 0);
  for (int i = 0; i < rows; ++i) {
    const int j = row_to_col[static_cast<std::size_t>(i)];
    if (j >= 0 && j < cols) {
      out.pairs.push_back({i, j, c(i, j)});
      gt_taken[static_cast<std::size_t>(j)] = 1;
    } else {
      out.unmatched_queries.push_back(i);
    }
  }
  std::sort(out.pairs.begin(), out.pairs.end(), [](const MatchPair& x, const MatchPair& y) { return x.gt < y.gt; });
  for (int j = 0; j < cols; ++j)
    if (!gt_taken[static_cast<std::size_t>(j)]) out.unmatched_gts.push_back(j);
  if (!out.unmatched_gts.empty())
    out.warnings.push_back("degenerate matching: " + std::to_string(cols) + " gts but only " +
                           std::to_string(rows) + " queries");
  return out;
}

inline Assignment assign(const PredictionSet& preds, std::span<const GroundTruth> gts,
                         const CostWeights& weights = {}) {
  Assignment a{build_cost_matrix(preds, gts, weights), {}};
  a.result = hungarian(a.costs);
  return a;
}

inline MatchResult match(const PredictionSet& preds, std::span<const GroundTruth> gts,
                         const CostWeights& weights = {}) {
  return assign(preds, gts, weights).result;
}

inline MatchResult match(std::span<const Prediction> preds, std::span<const GroundTruth> gts,
                         const CostWeights& weights = {}) {
  return assign(PredictionSet::from(preds), gts, weights).result;
}

}  // namespace oddetr
