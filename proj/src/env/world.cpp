#include "cadlab/world.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "cadlab/record.hpp"

namespace cadlab::env {

int EnvConfig::max_steps() const {
  return static_cast<int>(std::llround(t_max / decision_dt()));
}

void EnvConfig::validate() const {
  if (!(physics_dt > 0.0) || substeps < 1) throw std::invalid_argument("invalid time step");
  if (!(t_max > 0.0)) throw std::invalid_argument("t_max must be positive");
  vehicle.validate();
}

World::World(std::shared_ptr<const sim::TrackSpec> track, EnvConfig config)
    : track_(std::move(track)), config_(config) {
  if (!track_) throw std::invalid_argument("world needs a track");
  config_.validate();
}

sim::VehicleState World::spawn_state(const AgentStatus& a) const {
  sim::VehicleState s;
  s.position = a.start.position;
  s.heading = a.start.heading;
  s.lane = a.state.lane;
  s.progress_s = track_->project(a.start.position, track_->start_s).s;
  s.crash_count = a.state.crash_count;
  s.elapsed = a.state.elapsed;
  return s;
}

void World::respawn(AgentStatus& a) const {
  a.state.crash_count += 1;
  a.state = spawn_state(a);
}

std::vector<Observation> World::reset(const ResetSpec& spec) {
  if (spec.lanes.empty() || spec.lanes.size() > 2) {
    throw std::invalid_argument("a world holds one or two agents");
  }
  if (spec.lanes.size() == 2 && spec.lanes[0] == spec.lanes[1]) {
    throw std::invalid_argument("two agents cannot share a lane");
  }
  spec_ = spec;
  steps_ = 0;
  terminated_ = false;
  obstacles_ = sim::make_layout(*track_, spec.layout_seed);

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);
  agents_.assign(spec.lanes.size(), AgentStatus{});
  for (std::size_t i = 0; i < agents_.size(); ++i) {
    AgentStatus& a = agents_[i];
    a.state.lane = spec.lanes[i];
    const double lane_off = spec.lanes[i] == sim::Lane::Right ? -track_->lane_width / 2.0
                                                              : track_->lane_width / 2.0;
    double ds = 0.0, dl = 0.0, dh = 0.0;
    if (spec.seed != 0) {
      ds = sym(rng) * config_.start_jitter_s;
      dl = sym(rng) * config_.start_jitter_lateral;
      dh = sym(rng) * config_.start_jitter_heading;
    }
    const double s0 = std::max(0.5, track_->start_s + ds);
    sim::Pose p = track_->pose_at(s0, lane_off + dl);
    p.heading += dh;
    a.start = p;
    a.state = spawn_state(a);
  }
  refresh_rays();

  std::vector<Observation> obs;
  for (int i = 0; i < agent_count(); ++i) obs.push_back(observe(i));
  if (record_ != nullptr) {
    *record_ = EpisodeRecord{};
    record_->track_document = track_->source;
    record_->config = config_;
    record_->spec = spec_;
    for (const auto& a : agents_) record_->initial_states.push_back(a.state);
  }
  return obs;
}

std::optional<sim::Box> World::partner_box(std::size_t i) const {
  if (agents_.size() < 2) return std::nullopt;
  const AgentStatus& p = agents_[1 - i];
  if (p.finished) return std::nullopt;  // parked past the finish line
  return p.state.footprint(config_.vehicle);
}

void World::refresh_rays() {
  std::vector<sim::Box> boxes;
  for (std::size_t i = 0; i < agents_.size(); ++i) {
    boxes.assign(obstacles_.begin(), obstacles_.end());
    if (auto pb = partner_box(i)) boxes.push_back(*pb);
    const sim::RayScene scene{&track_->border_index, boxes};
    const sim::VehicleState& s = agents_[i].state;
    agents_[i].rays = sim::cast_rays({s.position, s.heading}, scene);
  }
}

Observation World::observe(int i) const {
  const AgentStatus& a = agent(i);
  std::optional<SharedPerception> partner;
  if (agent_count() == 2 && receives_partner(spec_.topology, a.state.lane)) {
    const AgentStatus& p = agent(1 - i);
    if (!p.finished) partner = SharedPerception{&p.state, p.rays};
  }
  return build_observation(a.state, a.rays, partner, {config_.vehicle.v_max, sim::kRayRange});
}

std::vector<AgentStep> World::step(std::span<const sim::Control> controls) {
  if (terminated_) throw std::logic_error("step() on a terminated episode");
  if (controls.size() != agents_.size()) throw std::invalid_argument("one control per agent");

  const std::size_t n = agents_.size();
  std::vector<sim::Control> applied(n);
  std::vector<StepFacts> facts(n);
  std::vector<AgentStep> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].was_active = !agents_[i].done;
    applied[i] = agents_[i].done ? sim::Control{} : controls[i].clamped();
  }

  const double dt = config_.physics_dt;
  for (int sub = 0; sub < config_.substeps; ++sub) {
    std::vector<bool> finishing(n, false);
    for (std::size_t i = 0; i < n; ++i) {
      AgentStatus& a = agents_[i];
      if (a.done) continue;
      const double mu = track_->mu_at(a.state.progress_s);
      sim::VehicleState next = sim::step_vehicle(a.state, applied[i], config_.vehicle, mu, dt);
      const sim::Projection pr = track_->project(next.position, a.state.progress_s);
      next.progress_s = std::max(a.state.progress_s, pr.s);
      for (const auto& ev : sim::checkpoint_crossing(a.state, next, *track_)) {
        next.gates_fired[sim::lane_index(ev.lane)].set(static_cast<std::size_t>(ev.index));
        if (ev.lane == next.lane) next.last_checkpoint_index = ev.index;
        facts[i].gates.push_back(ev);
      }
      finishing[i] = sim::crossed_finish(a.state.position, next.position, *track_);
      a.state = next;
    }

    std::vector<sim::CollisionReport> hits(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (agents_[i].done) continue;
      hits[i] = sim::detect_collisions(agents_[i].state, config_.vehicle, *track_, obstacles_,
                                       partner_box(i));
    }
    for (std::size_t i = 0; i < n; ++i) {
      AgentStatus& a = agents_[i];
      if (a.done) continue;
      if (hits[i].kind != sim::CollisionKind::None) {
        facts[i].collisions.push_back(hits[i].kind);
        out[i].collisions.push_back(hits[i].kind);
        if (hits[i].kind == sim::CollisionKind::Vehicle) a.vehicle_collisions += 1;
        respawn(a);
      } else if (finishing[i]) {
        a.finished = true;
        a.done = true;
        a.state.finished = true;
        a.state.speed = 0.0;
        a.finish_time = (steps_ + 1) * config_.decision_dt();
        facts[i].finished = true;
        out[i].finished_now = true;
      }
    }
  }

  steps_ += 1;
  if (n == 2) {
    for (std::size_t i = 0; i < n; ++i) {
      if (out[i].was_active && out[1 - i].finished_now &&
          receives_partner(spec_.topology, agents_[i].state.lane)) {
        facts[i].caring = true;
      }
    }
  }
  if (steps_ >= config_.max_steps()) {
    for (auto& a : agents_) {
      if (!a.done) {
        a.done = true;
        a.timed_out = true;
      }
    }
  }
  terminated_ = std::all_of(agents_.begin(), agents_.end(), [](const auto& a) { return a.done; });

  refresh_rays();
  for (std::size_t i = 0; i < n; ++i) {
    AgentStatus& a = agents_[i];
    if (out[i].was_active) {
      ScoredStep scored = score_step(facts[i], a.last_control, applied[i], a.state.lane,
                                     config_.decision_dt(), config_.rewards);
      out[i].reward = scored.reward;
      out[i].events = std::move(scored.events);
      a.total_reward += out[i].reward;
      a.last_control = applied[i];
    }
    out[i].done = a.done;
    out[i].observation = observe(static_cast<int>(i));
  }

  if (record_ != nullptr) {
    StepLog log;
    log.step = steps_ - 1;
    log.time = time();
    for (std::size_t i = 0; i < n; ++i) {
      log.states.push_back(agents_[i].state);
      log.controls.push_back(applied[i]);
      log.events.push_back(out[i].events);
      log.collisions.push_back(out[i].collisions);
      log.observation_hashes.push_back(observation_hash(out[i].observation));
    }
    record_->steps.push_back(std::move(log));
    if (terminated_) finalize_record(*record_, *this);
  }
  return out;
}

}  // namespace cadlab::env
