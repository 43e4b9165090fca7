#include "cadlab/geometry.hpp"

#include <algorithm>

namespace cadlab::sim {

std::array<Vec2, 4> Box::corners() const {
  const Vec2 u = unit_from_angle(heading) * half_extents.x;
  const Vec2 v = left_normal(unit_from_angle(heading)) * half_extents.y;
  return {center + u + v, center - u + v, center - u - v, center + u - v};
}

std::array<Segment, 4> Box::edges() const {
  const auto c = corners();
  return {Segment{c[0], c[1]}, Segment{c[1], c[2]}, Segment{c[2], c[3]},
          Segment{c[3], c[0]}};
}

Aabb bounds(const Segment& s) {
  return {{std::min(s.a.x, s.b.x), std::min(s.a.y, s.b.y)},
          {std::max(s.a.x, s.b.x), std::max(s.a.y, s.b.y)}};
}

Aabb bounds(const Box& b) {
  Aabb out{b.center, b.center};
  for (const Vec2 c : b.corners()) {
    out.lo = {std::min(out.lo.x, c.x), std::min(out.lo.y, c.y)};
    out.hi = {std::max(out.hi.x, c.x), std::max(out.hi.y, c.y)};
  }
  return out;
}

std::optional<double> ray_segment(Vec2 origin, Vec2 dir, const Segment& seg) {
  const Vec2 e = seg.b - seg.a;
  const Vec2 w = seg.a - origin;
  const double denom = cross(dir, e);
  if (denom == 0.0) {
    // Parallel: only a collinear segment can be hit.
    if (cross(w, dir) != 0.0) return std::nullopt;
    const double ta = dot(seg.a - origin, dir);
    const double tb = dot(seg.b - origin, dir);
    if (ta < 0.0 && tb < 0.0) return std::nullopt;
    if (ta <= 0.0 || tb <= 0.0) return 0.0;  // origin lies on the segment
    return std::min(ta, tb);
  }
  const double t = cross(w, e) / denom;
  const double u = cross(w, dir) / denom;
  if (t < 0.0 || u < 0.0 || u > 1.0) return std::nullopt;
  return t;
}

namespace {

int orientation(Vec2 a, Vec2 b, Vec2 c) {
  const double v = cross(b - a, c - a);
  return (v > 0.0) - (v < 0.0);
}

bool on_segment(Vec2 a, Vec2 b, Vec2 p) {
  return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) &&
         std::min(a.y, b.y) <= p.y && p.y <= std::max(a.y, b.y);
}

}  // namespace

bool segments_intersect(const Segment& p, const Segment& q) {
  const int o1 = orientation(p.a, p.b, q.a);
  const int o2 = orientation(p.a, p.b, q.b);
  const int o3 = orientation(q.a, q.b, p.a);
  const int o4 = orientation(q.a, q.b, p.b);
  if (o1 != o2 && o3 != o4) return true;
  if (o1 == 0 && on_segment(p.a, p.b, q.a)) return true;
  if (o2 == 0 && on_segment(p.a, p.b, q.b)) return true;
  if (o3 == 0 && on_segment(q.a, q.b, p.a)) return true;
  if (o4 == 0 && on_segment(q.a, q.b, p.b)) return true;
  return false;
}

namespace {

template <std::size_t N>
std::pair<double, double> project(const std::array<Vec2, N>& pts, Vec2 axis) {
  double lo = dot(pts[0], axis);
  double hi = lo;
  for (std::size_t i = 1; i < N; ++i) {
    const double d = dot(pts[i], axis);
    lo = std::min(lo, d);
    hi = std::max(hi, d);
  }
  return {lo, hi};
}

template <std::size_t N, std::size_t M>
bool separated_on(const std::array<Vec2, N>& a, const std::array<Vec2, M>& b,
                  Vec2 axis) {
  const auto [alo, ahi] = project(a, axis);
  const auto [blo, bhi] = project(b, axis);
  return ahi < blo || bhi < alo;
}

}  // namespace

bool boxes_overlap(const Box& a, const Box& b) {
  const auto ca = a.corners();
  const auto cb = b.corners();
  const Vec2 axes[4] = {unit_from_angle(a.heading),
                        left_normal(unit_from_angle(a.heading)),
                        unit_from_angle(b.heading),
                        left_normal(unit_from_angle(b.heading))};
  for (const Vec2 axis : axes) {
    if (separated_on(ca, cb, axis)) return false;
  }
  return true;
}

bool box_segment_overlap(const Box& box, const Segment& seg) {
  const auto c = box.corners();
  const std::array<Vec2, 2> s{seg.a, seg.b};
  const Vec2 d = seg.b - seg.a;
  const Vec2 axes[3] = {unit_from_angle(box.heading),
                        left_normal(unit_from_angle(box.heading)),
                        left_normal(d)};
  for (const Vec2 axis : axes) {
    if (axis == Vec2{}) continue;
    if (separated_on(c, s, axis)) return false;
  }
  return true;
}

bool box_contains(const Box& box, Vec2 p) {
  const Vec2 local = to_frame(p - box.center, box.heading);
  return std::abs(local.x) <= box.half_extents.x &&
         std::abs(local.y) <= box.half_extents.y;
}

}  // namespace cadlab::sim
