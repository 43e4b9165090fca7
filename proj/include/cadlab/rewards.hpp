#pragma once

#include <string>
#include <vector>

#include "cadlab/sensing.hpp"

namespace cadlab::env {

enum class RewardKind {
  TimeTick,
  SubjectedCheckpoint,
  OtherLaneCheckpoint,
  FinishLine,
  HitObstacle,
  Crash,
  SmoothTick,
  Caring,
};

const char* reward_kind_name(RewardKind k);
RewardKind parse_reward_kind(const std::string& name);

struct RewardEvent {
  RewardKind kind = RewardKind::TimeTick;
  double value = 0.0;
  bool operator==(const RewardEvent&) const = default;
};

struct RewardTable {
  double subjected_checkpoint = 1.0;
  double other_checkpoint = -2.0;
  double finish = 100.0;
  double hit_obstacle = -5.0;
  double crash = -10.0;
  double smooth_tick = 0.1;
  double caring = 100.0;          // 0 disables the signal entirely
  double time_per_second = -1.0;
  double smooth_threshold = 0.1;  // max |delta steer| that counts as smooth
};

// What happened to one agent during one decision step.
struct StepFacts {
  std::vector<sim::CheckpointEvent> gates;
  std::vector<sim::CollisionKind> collisions;
  bool finished = false;
  bool caring = false;  // partner reached the finish line and topology pays caring
};

struct ScoredStep {
  double reward = 0.0;
  std::vector<RewardEvent> events;
};

ScoredStep score_step(const StepFacts& facts, const sim::Control& prev_control,
                      const sim::Control& control, sim::Lane lane, double dt_decision,
                      const RewardTable& table);

}  // namespace cadlab::env
