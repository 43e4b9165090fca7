#include "cadlab/sensing.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cadlab::sim {

double ray_angle(int index, int ray_count) {
  return 2.0 * std::numbers::pi * static_cast<double>(index) / static_cast<double>(ray_count);
}

std::vector<double> cast_rays(const Pose& pose, const RayScene& scene, int ray_count,
                              double max_range) {
  std::vector<double> dist(static_cast<std::size_t>(ray_count), max_range);
  std::vector<Vec2> dirs(dist.size());
  for (int k = 0; k < ray_count; ++k) dirs[k] = unit_from_angle(pose.heading + ray_angle(k, ray_count));

  auto hit = [&](const Segment& seg) {
    for (std::size_t k = 0; k < dirs.size(); ++k) {
      if (auto t = ray_segment(pose.position, dirs[k], seg); t && *t < dist[k]) dist[k] = *t;
    }
  };

  const Aabb reach{{pose.position.x - max_range, pose.position.y - max_range},
                   {pose.position.x + max_range, pose.position.y + max_range}};
  if (scene.statics != nullptr) {
    thread_local std::vector<std::uint32_t> candidates;
    scene.statics->query(reach, candidates);
    const auto segs = scene.statics->segments();
    for (std::uint32_t i : candidates) hit(segs[i]);
  }
  for (const Box& b : scene.boxes) {
    if (!bounds(b).overlaps(reach)) continue;
    for (const Segment& e : b.edges()) hit(e);
  }
  return dist;
}

const char* collision_name(CollisionKind k) {
  switch (k) {
    case CollisionKind::None: return "none";
    case CollisionKind::Border: return "border";
    case CollisionKind::Obstacle: return "obstacle";
    case CollisionKind::Vehicle: return "vehicle";
  }
  return "?";
}

namespace {

Vec2 nearest_on_segment(const Segment& s, Vec2 p) {
  const Vec2 d = s.b - s.a;
  const double t = std::clamp(dot(p - s.a, d) / dot(d, d), 0.0, 1.0);
  return s.a + d * t;
}

}  // namespace

CollisionReport detect_collisions(const VehicleState& state, const VehicleParams& params,
                                  const TrackSpec& track, std::span<const Box> obstacles,
                                  const std::optional<Box>& other) {
  const Box self = state.footprint(params);
  if (other && boxes_overlap(self, *other)) {
    return {CollisionKind::Vehicle, (self.center + other->center) * 0.5};
  }
  for (const Box& o : obstacles) {
    if (boxes_overlap(self, o)) return {CollisionKind::Obstacle, (self.center + o.center) * 0.5};
  }
  thread_local std::vector<std::uint32_t> candidates;
  track.border_index.query(bounds(self), candidates);
  const auto segs = track.border_index.segments();
  for (std::uint32_t i : candidates) {
    if (box_segment_overlap(self, segs[i])) {
      return {CollisionKind::Border, nearest_on_segment(segs[i], self.center)};
    }
  }
  // A footprint entirely outside the corridor no longer touches a border.
  const Projection pr = track.project(state.position, state.progress_s);
  if (std::abs(pr.lateral) > track.lane_width) {
    return {CollisionKind::Border, track.pose_at(pr.s, std::copysign(track.lane_width, pr.lateral)).position};
  }
  return {};
}

namespace {

// Parameter along the gate where the path crosses it going forward, if any.
bool crosses_forward(Vec2 prev, Vec2 next, const Segment& gate, Vec2 tangent) {
  const double side_prev = dot(prev - gate.a, tangent);
  const double side_next = dot(next - gate.a, tangent);
  if (!(side_prev < 0.0 && side_next >= 0.0)) return false;
  const double f = side_prev / (side_prev - side_next);
  const Vec2 q = prev + (next - prev) * f;
  const Vec2 g = gate.b - gate.a;
  const double u = dot(q - gate.a, g) / dot(g, g);
  return u >= 0.0 && u <= 1.0;
}

}  // namespace

std::vector<CheckpointEvent> checkpoint_crossing(const VehicleState& prev,
                                                 const VehicleState& next,
                                                 const TrackSpec& track) {
  std::vector<CheckpointEvent> events;
  if (prev.position == next.position) return events;
  const double step = norm(next.position - prev.position);
  const double lo = prev.progress_s - 10.0 - step;
  const double hi = prev.progress_s + 10.0 + step;
  std::vector<std::pair<double, CheckpointEvent>> found;
  for (Lane lane : {Lane::Right, Lane::Left}) {
    const auto& gates = track.checkpoints[lane_index(lane)];
    auto first = std::lower_bound(gates.begin(), gates.end(), lo,
                                  [](const Gate& g, double s) { return g.s < s; });
    for (auto it = first; it != gates.end() && it->s <= hi; ++it) {
      const int k = static_cast<int>(it - gates.begin());
      if (prev.gates_fired[lane_index(lane)].test(static_cast<std::size_t>(k))) continue;
      if (crosses_forward(prev.position, next.position, it->segment, it->tangent)) {
        found.push_back({it->s, CheckpointEvent{lane, k}});
      }
    }
  }
  std::stable_sort(found.begin(), found.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  events.reserve(found.size());
  for (const auto& f : found) events.push_back(f.second);
  return events;
}

bool crossed_finish(Vec2 prev, Vec2 next, const TrackSpec& track) {
  if (prev == next) return false;
  return crosses_forward(prev, next, track.finish_line, track.tangent_at(track.finish_s));
}

}  // namespace cadlab::sim
