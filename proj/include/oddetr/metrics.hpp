// SPDX-License-Identifier: Apache-2.0
//
// Matching stability and detection quality on a fixed validation split.
//
// A snapshot records, for every validation scene and GT, which query the
// Hungarian match (final stage) assigned to it. Instability compares two
// snapshots of one model across epochs; consistency compares the online and
// EMA models at the same point.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "oddetr/geometry.hpp"
#include "oddetr/matching.hpp"
#include "oddetr/network.hpp"

namespace oddetr {

struct MatchSnapshot {
  /// assigned[scene][gt] = query index (-1 if the GT went unmatched).
  std::vector<std::vector<int>> assigned;

  std::size_t num_objects() const {
    std::size_t n = 0;
    for (const auto& s : assigned) n += s.size();
    return n;
  }

  friend bool operator==(const MatchSnapshot&, const MatchSnapshot&) = default;
};

namespace detail {

inline void check_enumeration(const MatchSnapshot& a, const MatchSnapshot& b) {
  if (a.assigned.size() != b.assigned.size()) throw std::invalid_argument("snapshot scene counts differ");
  for (std::size_t s = 0; s < a.assigned.size(); ++s)
    if (a.assigned[s].size() != b.assigned[s].size())
      throw std::invalid_argument("snapshot GT enumeration differs at scene " + std::to_string(s));
}

inline double agreement(const MatchSnapshot& a, const MatchSnapshot& b) {
  check_enumeration(a, b);
  std::size_t same = 0, total = 0;
  for (std::size_t s = 0; s < a.assigned.size(); ++s)
    for (std::size_t g = 0; g < a.assigned[s].size(); ++g) {
      ++total;
      if (a.assigned[s][g] == b.assigned[s][g]) ++same;
    }
  return total == 0 ? 1.0 : static_cast<double>(same) / static_cast<double>(total);
}

}  // namespace detail

/// Fraction of GT objects whose matched query changed.
inline double instability(const MatchSnapshot& prev, const MatchSnapshot& curr) {
  return 1.0 - detail::agreement(prev, curr);
}

/// Fraction of GT objects matched to the same query by both models.
inline double consistency(const MatchSnapshot& student, const MatchSnapshot& teacher) {
  return detail::agreement(student, teacher);
}

inline MatchSnapshot snapshot_from_matches(std::span<const MatchResult> matches, std::span<const std::size_t> gt_counts) {
  if (matches.size() != gt_counts.size()) throw std::invalid_argument("snapshot: one match per scene required");
  MatchSnapshot snap;
  snap.assigned.reserve(matches.size());
  for (std::size_t s = 0; s < matches.size(); ++s) {
    std::vector<int> row(gt_counts[s], -1);
    for (const auto& p : matches[s].pairs) row.at(static_cast<std::size_t>(p.gt)) = p.query;
    snap.assigned.push_back(std::move(row));
  }
  return snap;
}

// ---------------------------------------------------------------------------
// Average precision

enum class ApInterpolation {
  coco101,    ///< precision envelope sampled at 101 recall points
  all_point,  ///< exact area under the precision envelope
};

struct ApResult {
  double ap = 0;    ///< mean over thresholds
  double ap50 = 0;  ///< at IoU 0.5 (when 0.5 is among the thresholds)
  std::vector<double> per_threshold;
};

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back(0.5 + 0.05 * k);
  return t;
}

namespace detail {

struct Detection {
  double score;
  int scene;
  int query;
};

/// Area under a precision-recall curve given per-detection TP flags in score
/// order.
inline double pr_area(const std::vector<char>& tp, int npos, ApInterpolation mode) {
  const std::size_t n = tp.size();
  std::vector<double> prec(n), rec(n);
  double ctp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ctp += tp[i];
    prec[i] = ctp / static_cast<double>(i + 1);
    rec[i] = ctp / npos;
  }
  for (std::size_t i = n; i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  if (mode == ApInterpolation::coco101) {
    double sum = 0;
    for (int k = 0; k <= 100; ++k) {
      const double r = k / 100.0;
      const auto it = std::lower_bound(rec.begin(), rec.end(), r - 1e-12);
      if (it != rec.end()) sum += prec[static_cast<std::size_t>(it - rec.begin())];
    }
    return sum / 101.0;
  }
  double area = 0, last = 0;
  for (std::size_t i = 0; i < n; ++i) {
    area += (rec[i] - last) * prec[i];
    last = rec[i];
  }
  return area;
}

}  // namespace detail

/// Class-averaged AP. Every (query, class) score is a candidate detection;
/// detections are matched greedily in score order to the unclaimed GT of that
/// class with the highest IoU. Classes without any GT are left out.
inline ApResult average_precision(std::span<const PredictionSet> preds, std::span<const std::vector<GroundTruth>> gts,
                                  std::span<const double> thresholds, ApInterpolation mode = ApInterpolation::coco101) {
  if (preds.size() != gts.size()) throw std::invalid_argument("average_precision: scene counts differ");
  if (thresholds.empty()) throw std::invalid_argument("average_precision: no IoU thresholds");
  int num_classes = 0;
  for (const auto& p : preds) num_classes = std::max(num_classes, p.num_classes());
  for (const auto& g : gts)
    for (const auto& o : g) num_classes = std::max(num_classes, o.class_index + 1);

  ApResult out;
  out.per_threshold.assign(thresholds.size(), 0.0);
  int counted = 0;
  for (int c = 0; c < num_classes; ++c) {
    int npos = 0;
    for (const auto& g : gts)
      npos += static_cast<int>(std::count_if(g.begin(), g.end(), [c](const GroundTruth& o) { return o.class_index == c; }));
    if (npos == 0) continue;
    ++counted;
    std::vector<detail::Detection> dets;
    for (std::size_t s = 0; s < preds.size(); ++s)
      if (c < preds[s].num_classes())
        for (int q = 0; q < preds[s].size(); ++q)
          dets.push_back({preds[s].scores(q, c), static_cast<int>(s), q});
    std::stable_sort(dets.begin(), dets.end(),
                     [](const detail::Detection& a, const detail::Detection& b) { return a.score > b.score; });
    for (std::size_t ti = 0; ti < thresholds.size(); ++ti) {
      std::vector<std::vector<char>> claimed(gts.size());
      for (std::size_t s = 0; s < gts.size(); ++s) claimed[s].assign(gts[s].size(), 0);
      std::vector<char> tp(dets.size(), 0);
      for (std::size_t k = 0; k < dets.size(); ++k) {
        const auto& d = dets[k];
        const auto& sg = gts[static_cast<std::size_t>(d.scene)];
        const Box b = preds[static_cast<std::size_t>(d.scene)].box(d.query);
        double best = thresholds[ti];
        int hit = -1;
        for (std::size_t g = 0; g < sg.size(); ++g) {
          if (sg[g].class_index != c || claimed[static_cast<std::size_t>(d.scene)][g]) continue;
          const double v = iou(b, sg[g].box);
          if (v >= best) {
            best = v;
            hit = static_cast<int>(g);
          }
        }
        if (hit >= 0) {
          claimed[static_cast<std::size_t>(d.scene)][static_cast<std::size_t>(hit)] = 1;
          tp[k] = 1;
        }
      }
      out.per_threshold[ti] += detail::pr_area(tp, npos, mode);
    }
  }
  if (counted == 0) return out;
  for (auto& v : out.per_threshold) v /= counted;
  out.ap = std::accumulate(out.per_threshold.begin(), out.per_threshold.end(), 0.0) /
           static_cast<double>(out.per_threshold.size());
  for (std::size_t ti = 0; ti < thresholds.size(); ++ti)
    if (std::abs(thresholds[ti] - 0.5) < 1e-12) out.ap50 = out.per_threshold[ti];
  return out;
}

inline ApResult average_precision(std::span<const PredictionSet> preds, std::span<const std::vector<GroundTruth>> gts,
                                  ApInterpolation mode = ApInterpolation::coco101) {
  const auto t = coco_iou_thresholds();
  return average_precision(preds, gts, t, mode);
}

}  // namespace oddetr
