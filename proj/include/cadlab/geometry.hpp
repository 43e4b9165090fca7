#pragma once

#include <array>
#include <cmath>
#include <optional>

namespace cadlab::sim {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  constexpr Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  constexpr Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  constexpr Vec2 operator*(double k) const { return {x * k, y * k}; }
  constexpr bool operator==(const Vec2&) const = default;
};

constexpr double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
constexpr double cross(Vec2 a, Vec2 b) { return a.x * b.y - a.y * b.x; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }
inline Vec2 unit_from_angle(double a) { return {std::cos(a), std::sin(a)}; }

// Left-hand normal of a direction (rotated +90 degrees).
constexpr Vec2 left_normal(Vec2 d) { return {-d.y, d.x}; }

// Express `v` in a frame whose x axis points along `heading`.
inline Vec2 to_frame(Vec2 v, double heading) {
  const double c = std::cos(heading);
  const double s = std::sin(heading);
  return {c * v.x + s * v.y, -s * v.x + c * v.y};
}

struct Segment {
  Vec2 a;
  Vec2 b;
};

// Oriented rectangle.
struct Box {
  Vec2 center;
  Vec2 half_extents;  // along (heading, heading + 90 deg)
  double heading = 0.0;

  std::array<Vec2, 4> corners() const;
  std::array<Segment, 4> edges() const;
};

struct Aabb {
  Vec2 lo;
  Vec2 hi;

  bool overlaps(const Aabb& o) const {
    return lo.x <= o.hi.x && o.lo.x <= hi.x && lo.y <= o.hi.y && o.lo.y <= hi.y;
  }
};

Aabb bounds(const Segment& s);
Aabb bounds(const Box& b);

// Distance along the ray (origin + t * dir, |dir| = 1) to the segment, if the
// ray hits it with t >= 0. Collinear overlap reports the nearest endpoint.
std::optional<double> ray_segment(Vec2 origin, Vec2 dir, const Segment& seg);

// Closed-segment intersection test.
bool segments_intersect(const Segment& p, const Segment& q);

// Separating-axis overlap test; touching counts as overlap.
bool boxes_overlap(const Box& a, const Box& b);

bool box_segment_overlap(const Box& box, const Segment& seg);

bool box_contains(const Box& box, Vec2 p);

}  // namespace cadlab::sim
