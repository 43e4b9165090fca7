#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cadlab/geometry.hpp"

namespace cadlab::sim {

enum class Lane : int { Right = 0, Left = 1 };

constexpr int lane_index(Lane l) { return static_cast<int>(l); }
constexpr Lane other_lane(Lane l) { return l == Lane::Right ? Lane::Left : Lane::Right; }
const char* lane_name(Lane l);

// Gate latches are fixed-size so that VehicleState stays trivially copyable.
inline constexpr std::size_t kMaxGatesPerLane = 1024;

class TrackError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Gate {
  Segment segment;  // from the centerline out to the lane's border
  double s = 0.0;
  Vec2 tangent;     // forward direction of travel at s
};

struct FrictionZone {
  double s_start = 0.0;
  double s_end = 0.0;
  double mu = 1.0;
};

struct ObstacleSlot {
  double s = 0.0;
  Vec2 half_extents{1.0, 0.75};
  double s_jitter = 0.0;
};

struct Pose {
  Vec2 position;
  double heading = 0.0;
};

struct Projection {
  double s = 0.0;
  double lateral = 0.0;  // positive to the left of the centerline
  std::size_t segment = 0;
};

// Uniform-grid bucket index over a fixed set of segments.
class SegmentIndex {
 public:
  SegmentIndex() = default;
  SegmentIndex(std::vector<Segment> segments, double cell_size);

  std::span<const Segment> segments() const { return segments_; }

  // Indices of segments whose bounding boxes touch `box`, ascending, unique.
  void query(const Aabb& box, std::vector<std::uint32_t>& out) const;

 private:
  std::vector<Segment> segments_;
  double cell_ = 10.0;
  Vec2 origin_;
  int nx_ = 0;
  int ny_ = 0;
  std::vector<std::vector<std::uint32_t>> cells_;
};

struct TrackSpec {
  std::string name;
  int format_version = 1;
  std::vector<Vec2> centerline;
  std::vector<double> cum_s;  // arc length at each centerline vertex
  double lane_width = 3.5;
  // borders[0] is the right-hand edge of the right lane; borders[1] the
  // left-hand edge of the left lane.
  std::array<std::vector<Vec2>, 2> borders;
  Segment start_line;
  Segment finish_line;
  double start_s = 5.0;
  double start_line_s = 0.0;
  double finish_s = 0.0;
  double checkpoint_spacing = 0.0;
  std::array<std::vector<Gate>, 2> checkpoints;
  std::vector<Box> obstacles;  // default layout
  std::vector<ObstacleSlot> obstacle_slots;
  std::vector<FrictionZone> friction_zones;
  double default_mu = 1.0;
  double total_length = 0.0;
  std::string source;  // the document this track was parsed from
  SegmentIndex border_index;

  double mu_at(double s) const;
  Pose pose_at(double s, double lateral = 0.0) const;
  Vec2 tangent_at(double s) const;
  // Start pose for a lane (lane centre at start_s).
  Pose start_pose(Lane lane) const;

  // Nearest centerline point, restricted to vertices within `window` metres
  // of `hint_s`. A negative window searches the whole polyline.
  Projection project(Vec2 p, double hint_s, double window = 40.0) const;
};

// Parses and validates a track document (JSON, see README for the schema).
TrackSpec load_track(std::string_view document);
TrackSpec load_track_file(const std::string& path);

// Obstacle layout for an episode. Seed 0 returns the track's default layout;
// any other seed draws each slot's lane and position jitter deterministically.
std::vector<Box> make_layout(const TrackSpec& track, std::uint64_t seed);

}  // namespace cadlab::sim
