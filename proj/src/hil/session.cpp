#include "cadlab/hil_session.hpp"

#include <algorithm>

namespace cadlab::hil {

using nlohmann::json;

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::Lobby: return "lobby";
    case Phase::Running: return "running";
    case Phase::Finished: return "finished";
  }
  return "?";
}

namespace {

const char* role_name(int agent) { return agent == Session::kHuman ? "human" : "av"; }

double clamp_unit(double v) { return std::clamp(v, -1.0, 1.0); }

void check_version(const json& j) {
  if (auto it = j.find("proto_version"); it != j.end()) {
    if (!it->is_number_integer() || it->get<int>() != kProtoVersion) {
      throw ProtocolError("unsupported proto_version");
    }
  }
}

double number_field(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_number()) throw ProtocolError(std::string("control needs numeric '") + key + "'");
  return it->get<double>();
}

json box_json(const sim::Box& b) {
  return {{"center", {b.center.x, b.center.y}},
          {"half_extents", {b.half_extents.x, b.half_extents.y}},
          {"heading", b.heading}};
}

json outcome_json(const env::World& w, int agent) {
  const env::AgentStatus& a = w.agent(agent);
  return {{"finished", a.finished},
          {"lap_time", a.finished ? a.finish_time : w.time()},
          {"crashes", a.state.crash_count},
          {"vehicle_collisions", a.vehicle_collisions}};
}

}  // namespace

ClientMessage parse_client_message(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error&) {
    throw ProtocolError("message is not valid JSON");
  }
  if (!j.is_object()) throw ProtocolError("message must be an object");
  check_version(j);
  auto type = j.find("type");
  if (type == j.end() || !type->is_string()) throw ProtocolError("message needs a 'type'");
  const std::string t = type->get<std::string>();
  if (t == "join") {
    JoinMsg m;
    if (auto it = j.find("driver_level"); it != j.end()) {
      if (!it->is_string()) throw ProtocolError("driver_level must be a string");
      try {
        m.level = eval::parse_driver_level(it->get<std::string>());
      } catch (const std::invalid_argument& e) {
        throw ProtocolError(e.what());
      }
    }
    return m;
  }
  if (t == "control") {
    auto seq = j.find("seq");
    if (seq == j.end() || !seq->is_number_integer()) throw ProtocolError("control needs an integer 'seq'");
    return ControlMsg{seq->get<std::int64_t>(), number_field(j, "steer"), number_field(j, "throttle")};
  }
  if (t == "start") return StartMsg{};
  if (t == "reset") return ResetMsg{};
  throw ProtocolError("unknown message type '" + t + "'");
}

json to_json(const ClientMessage& m) {
  json j{{"proto_version", kProtoVersion}};
  if (const auto* join = std::get_if<JoinMsg>(&m)) {
    j["type"] = "join";
    if (join->level) j["driver_level"] = eval::driver_level_name(*join->level);
  } else if (const auto* c = std::get_if<ControlMsg>(&m)) {
    j["type"] = "control";
    j["seq"] = c->seq;
    j["steer"] = c->steer;
    j["throttle"] = c->throttle;
  } else if (std::holds_alternative<StartMsg>(m)) {
    j["type"] = "start";
  } else {
    j["type"] = "reset";
  }
  return j;
}

json error_frame(const std::string& code, const std::string& message) {
  return {{"type", "error"}, {"proto_version", kProtoVersion}, {"code", code}, {"message", message}};
}

Session::Session(std::string id, std::shared_ptr<const sim::TrackSpec> track,
                 std::shared_ptr<const nn::Policy<float>> av_policy, SessionConfig config)
    : id_(std::move(id)),
      track_(std::move(track)),
      av_(std::move(av_policy)),
      config_(config),
      world_(track_, config_.env) {
  if (!av_) throw std::invalid_argument("session needs an AV policy");
  if (!(config_.tick_hz > 0.0)) throw std::invalid_argument("tick_hz must be positive");
  if (config_.series_episodes < 1) throw std::invalid_argument("series_episodes must be positive");
  world_.set_recorder(&record_);
}

void Session::set_driver_level(eval::DriverLevel level) {
  if (phase_ != Phase::Lobby) throw StateError("driver level can only be declared in the lobby");
  level_ = level;
}

void Session::begin_episode() {
  env::ResetSpec spec{{sim::Lane::Right, sim::Lane::Left}, config_.topology, 0, 0};
  if (config_.randomize) {
    spec.seed = eval::lap_seed(config_.seed, episode_ - 1);
    spec.layout_seed = eval::lap_layout_seed(config_.seed, episode_ - 1);
  }
  obs_ = world_.reset(spec);
  pending_.reset();
  human_control_ = {};
}

std::vector<json> Session::start() {
  if (phase_ != Phase::Lobby) throw StateError(std::string("cannot start in phase ") + phase_name(phase_));
  phase_ = Phase::Running;
  episode_ = 1;
  begin_episode();
  return {episode_frame()};
}

ControlResult Session::ingest_control(const ControlMsg& msg) {
  if (phase_ != Phase::Running) {
    throw StateError(std::string("control rejected in phase ") + phase_name(phase_));
  }
  if (last_seq_ && msg.seq <= *last_seq_) {
    ++stale_dropped_;
    return ControlResult::Stale;
  }
  last_seq_ = msg.seq;
  pending_ = ControlMsg{msg.seq, clamp_unit(msg.steer), clamp_unit(msg.throttle)};
  return ControlResult::Buffered;
}

std::vector<json> Session::tick() {
  std::vector<json> frames;
  if (phase_ != Phase::Running || paused()) return frames;
  if (pending_) {
    human_control_ = {pending_->steer, pending_->throttle};
    pending_.reset();
  }
  const std::vector<sim::Control> controls{human_control_, eval::act_mean(*av_, obs_[kAv])};
  const std::vector<env::AgentStep> steps = world_.step(controls);
  for (std::size_t i = 0; i < steps.size(); ++i) obs_[i] = steps[i].observation;
  ++ticks_;
  frames.push_back(state_frame(steps));
  if (world_.terminated()) finish_episode(frames, "");
  return frames;
}

void Session::finish_episode(std::vector<json>& frames, const std::string& reason) {
  EpisodeResult r;
  r.episode = episode_;
  r.reason = reason;
  if (reason.empty()) {
    r.cooperation = env::classify_outcome(record_);
    r.winner = record_.winner;
  }
  r.record = record_;
  results_.push_back(std::move(r));
  frames.push_back(result_frame(results_.back()));
  if (!reason.empty() || episode_ >= config_.series_episodes) {
    phase_ = Phase::Finished;
    paused_since_.reset();
    frames.push_back(finished_frame());
    return;
  }
  ++episode_;
  begin_episode();
  frames.push_back(episode_frame());
}

std::vector<json> Session::reset() {
  if (phase_ == Phase::Finished) throw StateError("session already finished");
  if (phase_ == Phase::Lobby) return {};
  begin_episode();
  return {episode_frame()};
}

std::vector<json> Session::abort(const std::string& reason) {
  std::vector<json> frames;
  if (phase_ == Phase::Finished) return frames;
  if (phase_ == Phase::Lobby) {
    phase_ = Phase::Finished;
    frames.push_back(finished_frame());
    return frames;
  }
  finish_episode(frames, reason.empty() ? "aborted" : reason);
  return frames;
}

void Session::disconnect(double now_s) {
  if (phase_ == Phase::Running && !paused_since_) paused_since_ = now_s;
}

void Session::reconnect(double) { paused_since_.reset(); }

std::vector<json> Session::check_timeout(double now_s) {
  if (!paused_since_ || now_s - *paused_since_ < config_.disconnect_timeout_s) return {};
  return abort("timeout");
}

json Session::welcome_frame() const {
  json track;
  try {
    track = json::parse(track_->source);
  } catch (const json::parse_error&) {
    track = nullptr;
  }
  return {{"type", "welcome"},
          {"proto_version", kProtoVersion},
          {"session", id_},
          {"phase", phase_name(phase_)},
          {"tick_hz", config_.tick_hz},
          {"series_episodes", config_.series_episodes},
          {"human_lane", "right"},
          {"av_lane", "left"},
          {"topology", env::topology_name(config_.topology)},
          {"track", track}};
}

json Session::state_frame(const std::vector<env::AgentStep>& steps) const {
  json vehicles = json::array(), rays = json::array(), events = json::array(), collisions = json::array();
  for (int i = 0; i < world_.agent_count(); ++i) {
    const env::AgentStatus& a = world_.agent(i);
    const sim::VehicleState& s = a.state;
    vehicles.push_back({{"role", role_name(i)},
                        {"lane", sim::lane_name(s.lane)},
                        {"x", s.position.x},
                        {"y", s.position.y},
                        {"heading", s.heading},
                        {"speed", s.speed},
                        {"steering_angle", s.steering_angle},
                        {"progress", s.progress_s},
                        {"crash_count", s.crash_count},
                        {"finished", s.finished}});
    rays.push_back(a.rays);
    for (const auto& e : steps[static_cast<std::size_t>(i)].events) {
      events.push_back({{"role", role_name(i)}, {"name", env::reward_kind_name(e.kind)}, {"value", e.value}});
    }
    for (auto c : steps[static_cast<std::size_t>(i)].collisions) {
      collisions.push_back({{"role", role_name(i)}, {"kind", sim::collision_name(c)}});
    }
  }
  return {{"type", "state"},  {"proto_version", kProtoVersion}, {"session", id_},
          {"episode", episode_}, {"tick", world_.step_count()},  {"time", world_.time()},
          {"vehicles", vehicles}, {"rays", rays},                {"events", events},
          {"collisions", collisions}};
}

json Session::episode_frame() const {
  json obstacles = json::array();
  for (const auto& b : world_.obstacles()) obstacles.push_back(box_json(b));
  return {{"type", "episode"},
          {"proto_version", kProtoVersion},
          {"session", id_},
          {"episode", episode_},
          {"of", config_.series_episodes},
          {"seed", world_.spec().seed},
          {"layout_seed", world_.spec().layout_seed},
          {"obstacles", obstacles}};
}

json Session::result_frame(const EpisodeResult& r) const {
  json lap_times = json::object();
  json outcome = json::object();
  for (int i = 0; i < world_.agent_count(); ++i) {
    json o = outcome_json(world_, i);
    lap_times[role_name(i)] = o["finished"].get<bool>() ? o["lap_time"] : json(nullptr);
    outcome[role_name(i)] = std::move(o);
  }
  return {{"type", "result"},
          {"proto_version", kProtoVersion},
          {"session", id_},
          {"episode", r.episode},
          {"outcome", outcome},
          {"lap_times", lap_times},
          {"winner", r.winner ? json(role_name(*r.winner)) : json(nullptr)},
          {"classification", env::cooperation_name(r.cooperation)},
          {"reason", r.reason}};
}

json Session::finished_frame() const {
  int ok = 0;
  for (const auto& r : results_) ok += r.cooperation == env::Cooperation::Successful ? 1 : 0;
  return {{"type", "finished"},
          {"proto_version", kProtoVersion},
          {"session", id_},
          {"episodes", static_cast<int>(results_.size())},
          {"successful", ok}};
}

json Session::archive() const {
  json episodes = json::array();
  for (const auto& r : results_) {
    episodes.push_back({{"episode", r.episode},
                        {"classification", env::cooperation_name(r.cooperation)},
                        {"reason", r.reason},
                        {"winner", r.winner ? json(role_name(*r.winner)) : json(nullptr)},
                        {"record", env::to_json(r.record)}});
  }
  return {{"proto_version", kProtoVersion},
          {"session", id_},
          {"driver_level", eval::driver_level_name(level_)},
          {"phase", phase_name(phase_)},
          {"episodes", episodes}};
}

std::vector<eval::SessionOutcome> outcomes_from_archive(const json& archive) {
  const eval::DriverLevel level = eval::parse_driver_level(archive.at("driver_level").get<std::string>());
  std::vector<eval::SessionOutcome> out;
  for (const auto& e : archive.at("episodes")) {
    const env::EpisodeRecord rec = env::record_from_json(e.at("record"));
    const bool aborted = !e.value("reason", std::string()).empty() || !rec.complete;
    out.push_back({level, aborted ? env::Cooperation::Failed : env::classify_outcome(rec)});
  }
  return out;
}

}  // namespace cadlab::hil
