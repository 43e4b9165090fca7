#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "cadlab/sensing.hpp"
#include "cadlab/vehicle.hpp"

namespace cadlab::env {

// Observation layout:
//   [0]       lane flag (0 right, 1 left)
//   [1]       ego speed / v_max
//   [2..17]   ego ray distances / ray range
//   [18]      partner speed / v_max
//   [19..20]  partner position in the ego frame / ray range, clamped to [-1, 1]
//   [21..36]  partner ray distances / ray range
inline constexpr int kObsSize = 37;
inline constexpr int kPartnerOffset = 18;
using Observation = std::array<double, kObsSize>;

enum class Topology { None, UniToRed, Bidirectional };

const char* topology_name(Topology t);
Topology parse_topology(const std::string& name);  // none | uni | bi (long names accepted)

// Whether the agent driving `receiver_lane` gets its partner's block. The red
// agent is the one assigned to the left lane.
bool receives_partner(Topology t, sim::Lane receiver_lane);

struct SharedPerception {
  const sim::VehicleState* state = nullptr;
  std::span<const double> rays;
};

struct ObservationScale {
  double v_max = 40.0 / 3.6;
  double ray_range = sim::kRayRange;
};

// `partner` must be set iff the topology delivers it to this receiver.
Observation build_observation(const sim::VehicleState& ego, std::span<const double> ego_rays,
                              std::optional<SharedPerception> partner,
                              const ObservationScale& scale = {});

std::uint32_t observation_hash(const Observation& obs);

}  // namespace cadlab::env
