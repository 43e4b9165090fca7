#include "cadlab/vehicle.hpp"

#include <algorithm>
#include <cmath>

namespace cadlab::sim {

void VehicleParams::validate() const {
  const double fields[] = {mass,     wheel_mass, wheel_radius, wheelbase,      v_max,
                           max_steer, max_accel, max_brake,    half_extents.x, half_extents.y};
  for (double f : fields) {
    if (!std::isfinite(f) || f <= 0.0) throw ValidationError("vehicle parameters must be positive");
  }
}

Control Control::clamped() const {
  return {std::clamp(steer, -1.0, 1.0), std::clamp(throttle, -1.0, 1.0)};
}

double turn_rate(double speed, double steer, const VehicleParams& params, double mu) {
  const double rate = speed * std::tan(steer * params.max_steer) / params.wheelbase;
  const double cap_lat = mu * kGravity;
  if (speed > 0.0 && std::abs(speed * rate) > cap_lat) {
    return std::copysign(cap_lat / speed, rate);
  }
  return rate;
}

VehicleState step_vehicle(const VehicleState& state, const Control& control,
                          const VehicleParams& params, double mu, double dt) {
  if (!(dt > 0.0) || !std::isfinite(dt)) throw ValidationError("dt must be positive and finite");
  if (!std::isfinite(control.steer) || !std::isfinite(control.throttle)) {
    throw ValidationError("control must be finite");
  }
  if (!std::isfinite(state.position.x) || !std::isfinite(state.position.y) ||
      !std::isfinite(state.heading) || !std::isfinite(state.speed)) {
    throw ValidationError("vehicle state must be finite");
  }
  if (!(mu > 0.0)) throw ValidationError("friction coefficient must be positive");

  const Control c = control.clamped();
  const double accel = c.throttle >= 0.0 ? c.throttle * params.max_accel
                                         : c.throttle * params.max_brake;
  VehicleState next = state;
  next.speed = std::clamp(state.speed + accel * dt, 0.0, params.v_max);
  next.steering_angle = c.steer * params.max_steer;
  const double rate = turn_rate(next.speed, c.steer, params, mu);
  next.heading = state.heading - rate * dt;
  next.position = state.position + unit_from_angle(next.heading) * (next.speed * dt);
  next.elapsed = state.elapsed + dt;
  return next;
}

}  // namespace cadlab::sim
