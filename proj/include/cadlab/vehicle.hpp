#pragma once

#include <array>
#include <bitset>
#include <numbers>
#include <stdexcept>

#include "cadlab/geometry.hpp"
#include "cadlab/track.hpp"

namespace cadlab::sim {

inline constexpr double kGravity = 9.81;

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct VehicleParams {
  double mass = 1000.0;          // kg, kept for configuration fidelity only
  double wheel_mass = 20.0;      // kg per wheel, unused by the kinematic model
  double wheel_radius = 0.335;   // m
  double wheelbase = 2.4;        // m
  double v_max = 40.0 / 3.6;     // m/s
  double max_steer = 25.0 * std::numbers::pi / 180.0;  // rad
  double max_accel = 4.0;        // m/s^2
  double max_brake = 8.0;        // m/s^2
  Vec2 half_extents{1.7, 0.85};  // footprint 3.4 m x 1.7 m

  void validate() const;
};

// Normalized command. Positive steer turns right (clockwise); positive
// throttle accelerates, negative throttle brakes.
struct Control {
  double steer = 0.0;
  double throttle = 0.0;

  Control clamped() const;
  bool operator==(const Control&) const = default;
};

struct VehicleState {
  Vec2 position;
  double heading = 0.0;         // rad, counter-clockwise from +x
  double speed = 0.0;           // m/s, never negative
  double steering_angle = 0.0;  // rad, positive to the right
  Lane lane = Lane::Right;
  double progress_s = 0.0;
  int last_checkpoint_index = -1;
  int crash_count = 0;
  bool finished = false;
  double elapsed = 0.0;
  // Gates already fired in the current attempt, per lane.
  std::array<std::bitset<kMaxGatesPerLane>, 2> gates_fired{};

  Box footprint(const VehicleParams& p) const { return {position, p.half_extents, heading}; }
  bool operator==(const VehicleState&) const = default;
};

// Yaw rate magnitude-signed like `steer` (positive = clockwise), after the
// lateral-acceleration cap |speed * rate| <= mu * g.
double turn_rate(double speed, double steer, const VehicleParams& params, double mu);

// One fixed-timestep kinematic-bicycle update. Throws ValidationError on
// non-finite input or dt <= 0.
VehicleState step_vehicle(const VehicleState& state, const Control& control,
                          const VehicleParams& params, double mu, double dt);

}  // namespace cadlab::sim
