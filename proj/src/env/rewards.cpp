#include "cadlab/rewards.hpp"

#include <cmath>
#include <stdexcept>

namespace cadlab::env {

namespace {

constexpr std::pair<RewardKind, const char*> kNames[] = {
    {RewardKind::TimeTick, "time_tick"},
    {RewardKind::SubjectedCheckpoint, "subjected_checkpoint"},
    {RewardKind::OtherLaneCheckpoint, "other_lane_checkpoint"},
    {RewardKind::FinishLine, "finish_line"},
    {RewardKind::HitObstacle, "hit_obstacle"},
    {RewardKind::Crash, "crash"},
    {RewardKind::SmoothTick, "smooth_tick"},
    {RewardKind::Caring, "caring"},
};

}  // namespace

const char* reward_kind_name(RewardKind k) {
  for (const auto& [kind, name] : kNames) {
    if (kind == k) return name;
  }
  return "?";
}

RewardKind parse_reward_kind(const std::string& name) {
  for (const auto& [kind, n] : kNames) {
    if (name == n) return kind;
  }
  throw std::invalid_argument("unknown reward kind '" + name + "'");
}

ScoredStep score_step(const StepFacts& facts, const sim::Control& prev_control,
                      const sim::Control& control, sim::Lane lane, double dt_decision,
                      const RewardTable& table) {
  ScoredStep out;
  auto add = [&out](RewardKind k, double v) {
    out.events.push_back({k, v});
    out.reward += v;
  };

  add(RewardKind::TimeTick, table.time_per_second * dt_decision);
  if (std::abs(control.steer - prev_control.steer) <= table.smooth_threshold) {
    add(RewardKind::SmoothTick, table.smooth_tick);
  }
  for (const auto& g : facts.gates) {
    if (g.lane == lane) {
      add(RewardKind::SubjectedCheckpoint, table.subjected_checkpoint);
    } else {
      add(RewardKind::OtherLaneCheckpoint, table.other_checkpoint);
    }
  }
  for (const auto c : facts.collisions) {
    if (c == sim::CollisionKind::Obstacle) {
      add(RewardKind::HitObstacle, table.hit_obstacle);
    } else if (c != sim::CollisionKind::None) {
      add(RewardKind::Crash, table.crash);
    }
  }
  if (facts.finished) add(RewardKind::FinishLine, table.finish);
  if (facts.caring && table.caring != 0.0) add(RewardKind::Caring, table.caring);
  return out;
}

}  // namespace cadlab::env
