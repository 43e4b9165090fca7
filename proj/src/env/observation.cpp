#include "cadlab/observation.hpp"

#include <algorithm>
#include <stdexcept>

#include <zlib.h>

namespace cadlab::env {

const char* topology_name(Topology t) {
  switch (t) {
    case Topology::None: return "none";
    case Topology::UniToRed: return "uni";
    case Topology::Bidirectional: return "bi";
  }
  return "?";
}

Topology parse_topology(const std::string& name) {
  if (name == "none") return Topology::None;
  if (name == "uni" || name == "unidirectional" || name == "uni_to_red") return Topology::UniToRed;
  if (name == "bi" || name == "bidirectional") return Topology::Bidirectional;
  throw std::invalid_argument("unknown topology '" + name + "'");
}

bool receives_partner(Topology t, sim::Lane receiver_lane) {
  switch (t) {
    case Topology::None: return false;
    case Topology::UniToRed: return receiver_lane == sim::Lane::Left;
    case Topology::Bidirectional: return true;
  }
  return false;
}

Observation build_observation(const sim::VehicleState& ego, std::span<const double> ego_rays,
                              std::optional<SharedPerception> partner,
                              const ObservationScale& scale) {
  if (ego_rays.size() != sim::kRayCount) throw std::invalid_argument("expected 16 ego rays");
  Observation obs{};
  obs[0] = ego.lane == sim::Lane::Left ? 1.0 : 0.0;
  obs[1] = std::clamp(ego.speed / scale.v_max, 0.0, 1.0);
  for (int k = 0; k < sim::kRayCount; ++k) {
    obs[2 + k] = std::clamp(ego_rays[k] / scale.ray_range, 0.0, 1.0);
  }
  if (partner && partner->state != nullptr) {
    if (partner->rays.size() != sim::kRayCount) throw std::invalid_argument("expected 16 partner rays");
    const sim::VehicleState& p = *partner->state;
    obs[kPartnerOffset] = std::clamp(p.speed / scale.v_max, 0.0, 1.0);
    const sim::Vec2 rel = sim::to_frame(p.position - ego.position, ego.heading);
    obs[kPartnerOffset + 1] = std::clamp(rel.x / scale.ray_range, -1.0, 1.0);
    obs[kPartnerOffset + 2] = std::clamp(rel.y / scale.ray_range, -1.0, 1.0);
    for (int k = 0; k < sim::kRayCount; ++k) {
      obs[kPartnerOffset + 3 + k] = std::clamp(partner->rays[k] / scale.ray_range, 0.0, 1.0);
    }
  }
  return obs;
}

std::uint32_t observation_hash(const Observation& obs) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(obs.data()), sizeof(double) * obs.size()));
}

}  // namespace cadlab::env
