#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "cadlab/observation.hpp"
#include "cadlab/rewards.hpp"
#include "cadlab/sensing.hpp"
#include "cadlab/track.hpp"
#include "cadlab/vehicle.hpp"

namespace cadlab::env {

struct EpisodeRecord;

struct EnvConfig {
  double physics_dt = 0.02;
  int substeps = 5;
  double t_max = 180.0;
  sim::VehicleParams vehicle;
  RewardTable rewards;
  // Start-pose perturbation applied when ResetSpec::seed != 0.
  double start_jitter_s = 3.0;
  double start_jitter_lateral = 0.3;
  double start_jitter_heading = 0.05;

  double decision_dt() const { return physics_dt * substeps; }
  int max_steps() const;
  void validate() const;
};

struct ResetSpec {
  std::vector<sim::Lane> lanes;  // one entry per agent, at most two
  Topology topology = Topology::None;
  std::uint64_t seed = 0;         // start perturbation, 0 = nominal start poses
  std::uint64_t layout_seed = 0;  // obstacle layout, 0 = the track's default
};

struct AgentStatus {
  sim::VehicleState state;
  sim::Pose start;
  sim::Control last_control;
  bool done = false;
  bool finished = false;
  bool timed_out = false;
  double finish_time = 0.0;
  int vehicle_collisions = 0;
  double total_reward = 0.0;
  std::vector<double> rays;
};

struct AgentStep {
  Observation observation{};
  double reward = 0.0;
  std::vector<RewardEvent> events;
  std::vector<sim::CollisionKind> collisions;
  bool done = false;
  bool finished_now = false;
  bool was_active = false;  // false when the agent was already done
};

// Two-lane driving MDP. One decision step spans `substeps` physics steps.
// Crashes respawn the vehicle at its start pose; the episode ends when every
// agent has finished or t_max elapses.
class World {
 public:
  World(std::shared_ptr<const sim::TrackSpec> track, EnvConfig config);

  std::vector<Observation> reset(const ResetSpec& spec);

  // Controls for agents that are already done are ignored.
  std::vector<AgentStep> step(std::span<const sim::Control> controls);

  bool terminated() const { return terminated_; }
  int step_count() const { return steps_; }
  double time() const { return steps_ * config_.decision_dt(); }
  int agent_count() const { return static_cast<int>(agents_.size()); }
  const AgentStatus& agent(int i) const { return agents_.at(static_cast<std::size_t>(i)); }
  Observation observe(int i) const;
  const std::vector<sim::Box>& obstacles() const { return obstacles_; }
  const sim::TrackSpec& track() const { return *track_; }
  const std::shared_ptr<const sim::TrackSpec>& track_ptr() const { return track_; }
  const EnvConfig& config() const { return config_; }
  const ResetSpec& spec() const { return spec_; }

  // The recorder, if set, is restarted on every reset and filled per step.
  void set_recorder(EpisodeRecord* record) { record_ = record; }

 private:
  sim::VehicleState spawn_state(const AgentStatus& a) const;
  void respawn(AgentStatus& a) const;
  void refresh_rays();
  std::optional<sim::Box> partner_box(std::size_t i) const;

  std::shared_ptr<const sim::TrackSpec> track_;
  EnvConfig config_;
  ResetSpec spec_;
  std::vector<sim::Box> obstacles_;
  std::vector<AgentStatus> agents_;
  int steps_ = 0;
  bool terminated_ = false;
  EpisodeRecord* record_ = nullptr;
};

}  // namespace cadlab::env
