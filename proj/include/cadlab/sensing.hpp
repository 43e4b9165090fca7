#pragma once

#include <optional>
#include <span>
#include <vector>

#include "cadlab/geometry.hpp"
#include "cadlab/track.hpp"
#include "cadlab/vehicle.hpp"

namespace cadlab::sim {

inline constexpr int kRayCount = 16;
inline constexpr double kRayRange = 50.0;

// Everything a ray can hit: indexed static segments plus a handful of boxes
// (obstacles and other vehicles' footprints).
struct RayScene {
  const SegmentIndex* statics = nullptr;
  std::span<const Box> boxes;
};

// Body-frame ray angle; ray 0 points forward, indices increase
// counter-clockwise in equal steps over the full circle.
double ray_angle(int index, int ray_count = kRayCount);

// Distance to the nearest hit per ray, `max_range` when nothing is hit.
std::vector<double> cast_rays(const Pose& pose, const RayScene& scene,
                              int ray_count = kRayCount, double max_range = kRayRange);

enum class CollisionKind { None = 0, Border, Obstacle, Vehicle };
const char* collision_name(CollisionKind k);

struct CollisionReport {
  CollisionKind kind = CollisionKind::None;
  std::optional<Vec2> contact_point;  // set iff kind != None
};

// Footprint overlap test with priority Vehicle > Obstacle > Border.
CollisionReport detect_collisions(const VehicleState& state, const VehicleParams& params,
                                  const TrackSpec& track, std::span<const Box> obstacles,
                                  const std::optional<Box>& other = std::nullopt);

struct CheckpointEvent {
  Lane lane = Lane::Right;
  int index = 0;
  bool operator==(const CheckpointEvent&) const = default;
};

// Gates crossed (in the forward direction) by the straight path from
// prev.position to next.position that are not yet latched in prev. Events are
// ordered by arc length.
std::vector<CheckpointEvent> checkpoint_crossing(const VehicleState& prev,
                                                 const VehicleState& next,
                                                 const TrackSpec& track);

// True when the path prev -> next crosses the finish line going forward.
bool crossed_finish(Vec2 prev, Vec2 next, const TrackSpec& track);

}  // namespace cadlab::sim
