// SPDX-License-Identifier: Apache-2.0
//
// Normalized center-format boxes and the IoU / GIoU / L1 primitives used by
// matching costs and regression losses. Every routine that feeds a loss also
// has a variant returning the gradient with respect to its first argument.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <ostream>

namespace oddetr {

inline constexpr double kMinBoxSize = 1e-6;

/// Gradient of a scalar with respect to (cx, cy, w, h).
using BoxGrad = std::array<double, 4>;

struct CornerBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

/// Center-format box in image-fraction units.
///
/// Construct through make_box() to get the clamping guarantees; the aggregate
/// form is kept so that network outputs (already inside (0,1)) can be wrapped
/// without a copy of the checks.
struct Box {
  double cx = 0.5, cy = 0.5, w = 1.0, h = 1.0;

  friend bool operator==(const Box&, const Box&) = default;
};

inline Box make_box(double cx, double cy, double w, double h) {
  return Box{std::clamp(cx, 0.0, 1.0), std::clamp(cy, 0.0, 1.0),
             std::clamp(w, kMinBoxSize, 1.0), std::clamp(h, kMinBoxSize, 1.0)};
}

inline std::ostream& operator<<(std::ostream& os, const Box& b) {
  return os << "(" << b.cx << ", " << b.cy << ", " << b.w << ", " << b.h << ")";
}

/// A labelled object.
struct GroundTruth {
  Box box;
  int class_index = 0;

  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

inline CornerBox to_corners(const Box& b) {
  return {b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2};
}

inline Box from_corners(const CornerBox& c) {
  return {(c.x1 + c.x2) / 2, (c.y1 + c.y2) / 2, c.x2 - c.x1, c.y2 - c.y1};
}

inline double area(const Box& b) { return b.w * b.h; }

namespace detail {

// Subgradient convention at ties: the first argument wins.
inline double max_pick(double a, double b, bool& first) {
  first = a >= b;
  return first ? a : b;
}
inline double min_pick(double a, double b, bool& first) {
  first = a <= b;
  return first ? a : b;
}

// Gradient with respect to corner coordinates (x1, y1, x2, y2) of box a,
// chained back to center form.
inline BoxGrad corners_to_center(double gx1, double gy1, double gx2, double gy2) {
  return {gx1 + gx2, gy1 + gy2, (gx2 - gx1) / 2, (gy2 - gy1) / 2};
}

struct Overlap {
  double inter = 0, uni = 0, area_a = 0, area_b = 0;
  double iw = 0, ih = 0;
  bool ix1_a = false, ix2_a = false, iy1_a = false, iy2_a = false;
};

inline Overlap overlap(const Box& a, const Box& b) {
  const CornerBox ca = to_corners(a), cb = to_corners(b);
  Overlap o;
  const double lx = max_pick(ca.x1, cb.x1, o.ix1_a);
  const double rx = min_pick(ca.x2, cb.x2, o.ix2_a);
  const double ly = max_pick(ca.y1, cb.y1, o.iy1_a);
  const double ry = min_pick(ca.y2, cb.y2, o.iy2_a);
  o.iw = std::max(0.0, rx - lx);
  o.ih = std::max(0.0, ry - ly);
  o.inter = o.iw * o.ih;
  o.area_a = std::max(a.w, kMinBoxSize) * std::max(a.h, kMinBoxSize);
  o.area_b = std::max(b.w, kMinBoxSize) * std::max(b.h, kMinBoxSize);
  o.uni = o.area_a + o.area_b - o.inter;
  return o;
}

// d(inter)/d corners of a.
inline std::array<double, 4> inter_grad(const Overlap& o) {
  std::array<double, 4> g{0, 0, 0, 0};  // x1, y1, x2, y2
  if (o.iw > 0 && o.ih > 0) {
    if (o.ix1_a) g[0] = -o.ih;
    if (o.ix2_a) g[2] = o.ih;
    if (o.iy1_a) g[1] = -o.iw;
    if (o.iy2_a) g[3] = o.iw;
  }
  return g;
}

}  // namespace detail

inline double iou(const Box& a, const Box& b) {
  const auto o = detail::overlap(a, b);
  return o.inter / o.uni;
}

/// IoU and its gradient with respect to `a`.
inline double iou_grad(const Box& a, const Box& b, BoxGrad& grad) {
  const auto o = detail::overlap(a, b);
  const double u = o.uni;
  const double d_inter = (u + o.inter) / (u * u);
  const double d_area_a = -o.inter / (u * u);
  const auto gi = detail::inter_grad(o);
  grad = detail::corners_to_center(d_inter * gi[0], d_inter * gi[1], d_inter * gi[2],
                                   d_inter * gi[3]);
  // area_a = w * h
  grad[2] += d_area_a * a.h;
  grad[3] += d_area_a * a.w;
  return o.inter / u;
}

inline double giou(const Box& a, const Box& b) {
  const auto o = detail::overlap(a, b);
  const CornerBox ca = to_corners(a), cb = to_corners(b);
  const double ew = std::max(ca.x2, cb.x2) - std::min(ca.x1, cb.x1);
  const double eh = std::max(ca.y2, cb.y2) - std::min(ca.y1, cb.y1);
  const double enclosure = ew * eh;
  return o.inter / o.uni - (enclosure - o.uni) / enclosure;
}

/// GIoU and its gradient with respect to `a`.
inline double giou_grad(const Box& a, const Box& b, BoxGrad& grad) {
  const auto o = detail::overlap(a, b);
  const CornerBox ca = to_corners(a), cb = to_corners(b);
  bool ex1_a, ex2_a, ey1_a, ey2_a;
  const double ex1 = detail::min_pick(ca.x1, cb.x1, ex1_a);
  const double ex2 = detail::max_pick(ca.x2, cb.x2, ex2_a);
  const double ey1 = detail::min_pick(ca.y1, cb.y1, ey1_a);
  const double ey2 = detail::max_pick(ca.y2, cb.y2, ey2_a);
  const double ew = ex2 - ex1, eh = ey2 - ey1;
  const double c = ew * eh;
  const double u = o.uni;

  // giou = I/U - 1 + U/C, with U = A_a + A_b - I.
  const double d_u = -o.inter / (u * u) + 1.0 / c;
  const double d_inter = 1.0 / u - d_u;
  const double d_c = -u / (c * c);

  const auto gi = detail::inter_grad(o);
  std::array<double, 4> gc{0, 0, 0, 0};
  if (ex1_a) gc[0] = -eh;
  if (ex2_a) gc[2] = eh;
  if (ey1_a) gc[1] = -ew;
  if (ey2_a) gc[3] = ew;

  grad = detail::corners_to_center(d_inter * gi[0] + d_c * gc[0], d_inter * gi[1] + d_c * gc[1],
                                   d_inter * gi[2] + d_c * gc[2], d_inter * gi[3] + d_c * gc[3]);
  grad[2] += d_u * a.h;
  grad[3] += d_u * a.w;
  return o.inter / u - (c - u) / c;
}

inline double l1_distance(const Box& a, const Box& b) {
  return std::abs(a.cx - b.cx) + std::abs(a.cy - b.cy) + std::abs(a.w - b.w) +
         std::abs(a.h - b.h);
}

/// L1 distance and its gradient with respect to `a`. At a kink the slope of the
/// left branch (-1) is used.
inline double l1_grad(const Box& a, const Box& b, BoxGrad& grad) {
  const std::array<double, 4> d{a.cx - b.cx, a.cy - b.cy, a.w - b.w, a.h - b.h};
  double sum = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    grad[k] = d[k] > 0 ? 1.0 : -1.0;
    sum += std::abs(d[k]);
  }
  return sum;
}

}  // namespace oddetr
