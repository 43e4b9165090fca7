#include "cadlab/record.hpp"

#include <bit>
#include <fstream>
#include <sstream>

namespace cadlab::env {

using nlohmann::json;

void finalize_record(EpisodeRecord& record, const World& world) {
  record.outcomes.clear();
  for (int i = 0; i < world.agent_count(); ++i) {
    const AgentStatus& a = world.agent(i);
    AgentOutcome o;
    o.lane = a.state.lane;
    o.finished = a.finished;
    o.lap_time = a.finished ? a.finish_time : world.time();
    o.crash_count = a.state.crash_count;
    o.vehicle_collisions = a.vehicle_collisions;
    o.total_reward = a.total_reward;
    record.outcomes.push_back(o);
  }
  record.winner = decide_winner(record.outcomes);
  record.complete = world.terminated();
}

std::optional<int> decide_winner(const std::vector<AgentOutcome>& outcomes) {
  std::optional<int> best;
  bool tie = false;
  for (int i = 0; i < static_cast<int>(outcomes.size()); ++i) {
    if (!outcomes[i].finished) continue;
    if (!best || outcomes[i].lap_time < outcomes[*best].lap_time) {
      best = i;
      tie = false;
    } else if (outcomes[i].lap_time == outcomes[*best].lap_time) {
      tie = true;
    }
  }
  if (tie) return std::nullopt;
  return best;
}

double cumulative_reward(const EpisodeRecord& record, int agent) {
  double sum = 0.0;
  for (const auto& step : record.steps) {
    for (const auto& ev : step.events.at(static_cast<std::size_t>(agent))) sum += ev.value;
  }
  return sum;
}

const char* cooperation_name(Cooperation c) {
  return c == Cooperation::Successful ? "SuccessfulCooperation" : "FailedCooperation";
}

Cooperation classify_outcome(const EpisodeRecord& record) {
  if (record.spec.lanes.size() != 2 || record.outcomes.size() != 2) {
    throw RecordError("cooperation classification needs a complete two-agent record");
  }
  for (const auto& o : record.outcomes) {
    if (o.vehicle_collisions > 0 || o.crash_count > 0 || !o.finished) return Cooperation::Failed;
  }
  return Cooperation::Successful;
}

json to_json(const RewardTable& t) {
  return {{"subjected_checkpoint", t.subjected_checkpoint},
          {"other_checkpoint", t.other_checkpoint},
          {"finish", t.finish},
          {"hit_obstacle", t.hit_obstacle},
          {"crash", t.crash},
          {"smooth_tick", t.smooth_tick},
          {"caring", t.caring},
          {"time_per_second", t.time_per_second},
          {"smooth_threshold", t.smooth_threshold}};
}

RewardTable reward_table_from_json(const json& j, RewardTable t) {
  t.subjected_checkpoint = j.value("subjected_checkpoint", t.subjected_checkpoint);
  t.other_checkpoint = j.value("other_checkpoint", t.other_checkpoint);
  t.finish = j.value("finish", t.finish);
  t.hit_obstacle = j.value("hit_obstacle", t.hit_obstacle);
  t.crash = j.value("crash", t.crash);
  t.smooth_tick = j.value("smooth_tick", t.smooth_tick);
  t.caring = j.value("caring", t.caring);
  t.time_per_second = j.value("time_per_second", t.time_per_second);
  t.smooth_threshold = j.value("smooth_threshold", t.smooth_threshold);
  return t;
}

namespace {

json vehicle_params_to_json(const sim::VehicleParams& p) {
  return {{"mass", p.mass},           {"wheel_mass", p.wheel_mass},
          {"wheel_radius", p.wheel_radius}, {"wheelbase", p.wheelbase},
          {"v_max", p.v_max},         {"max_steer", p.max_steer},
          {"max_accel", p.max_accel}, {"max_brake", p.max_brake},
          {"half_extents", {p.half_extents.x, p.half_extents.y}}};
}

sim::VehicleParams vehicle_params_from_json(const json& j, sim::VehicleParams p) {
  p.mass = j.value("mass", p.mass);
  p.wheel_mass = j.value("wheel_mass", p.wheel_mass);
  p.wheel_radius = j.value("wheel_radius", p.wheel_radius);
  p.wheelbase = j.value("wheelbase", p.wheelbase);
  p.v_max = j.value("v_max", p.v_max);
  p.max_steer = j.value("max_steer", p.max_steer);
  p.max_accel = j.value("max_accel", p.max_accel);
  p.max_brake = j.value("max_brake", p.max_brake);
  if (auto it = j.find("half_extents"); it != j.end()) {
    p.half_extents = {(*it)[0].get<double>(), (*it)[1].get<double>()};
  }
  return p;
}

}  // namespace

json to_json(const EnvConfig& c) {
  return {{"physics_dt", c.physics_dt},
          {"substeps", c.substeps},
          {"t_max", c.t_max},
          {"vehicle", vehicle_params_to_json(c.vehicle)},
          {"rewards", to_json(c.rewards)},
          {"start_jitter_s", c.start_jitter_s},
          {"start_jitter_lateral", c.start_jitter_lateral},
          {"start_jitter_heading", c.start_jitter_heading}};
}

EnvConfig env_config_from_json(const json& j, EnvConfig c) {
  c.physics_dt = j.value("physics_dt", c.physics_dt);
  c.substeps = j.value("substeps", c.substeps);
  c.t_max = j.value("t_max", c.t_max);
  if (auto it = j.find("vehicle"); it != j.end()) c.vehicle = vehicle_params_from_json(*it, c.vehicle);
  if (auto it = j.find("rewards"); it != j.end()) c.rewards = reward_table_from_json(*it, c.rewards);
  c.start_jitter_s = j.value("start_jitter_s", c.start_jitter_s);
  c.start_jitter_lateral = j.value("start_jitter_lateral", c.start_jitter_lateral);
  c.start_jitter_heading = j.value("start_jitter_heading", c.start_jitter_heading);
  return c;
}

json to_json(const sim::VehicleState& s) {
  return {{"x", s.position.x},
          {"y", s.position.y},
          {"heading", s.heading},
          {"speed", s.speed},
          {"steering_angle", s.steering_angle},
          {"lane", sim::lane_name(s.lane)},
          {"progress_s", s.progress_s},
          {"last_checkpoint", s.last_checkpoint_index},
          {"crash_count", s.crash_count},
          {"finished", s.finished},
          {"elapsed", s.elapsed}};
}

namespace {

sim::Lane parse_lane(const std::string& s) {
  if (s == "right") return sim::Lane::Right;
  if (s == "left") return sim::Lane::Left;
  throw RecordError("unknown lane '" + s + "'");
}

sim::CollisionKind parse_collision(const std::string& s) {
  for (auto k : {sim::CollisionKind::None, sim::CollisionKind::Border,
                 sim::CollisionKind::Obstacle, sim::CollisionKind::Vehicle}) {
    if (s == sim::collision_name(k)) return k;
  }
  throw RecordError("unknown collision kind '" + s + "'");
}

}  // namespace

sim::VehicleState vehicle_state_from_json(const json& j) {
  sim::VehicleState s;
  s.position = {j.at("x").get<double>(), j.at("y").get<double>()};
  s.heading = j.at("heading").get<double>();
  s.speed = j.at("speed").get<double>();
  s.steering_angle = j.at("steering_angle").get<double>();
  s.lane = parse_lane(j.at("lane").get<std::string>());
  s.progress_s = j.at("progress_s").get<double>();
  s.last_checkpoint_index = j.at("last_checkpoint").get<int>();
  s.crash_count = j.at("crash_count").get<int>();
  s.finished = j.at("finished").get<bool>();
  s.elapsed = j.at("elapsed").get<double>();
  return s;
}

json to_json(const AgentOutcome& o) {
  return {{"lane", sim::lane_name(o.lane)},       {"finished", o.finished},
          {"lap_time", o.lap_time},               {"crash_count", o.crash_count},
          {"vehicle_collisions", o.vehicle_collisions}, {"total_reward", o.total_reward}};
}

namespace {

AgentOutcome outcome_from_json(const json& j) {
  AgentOutcome o;
  o.lane = parse_lane(j.at("lane").get<std::string>());
  o.finished = j.at("finished").get<bool>();
  o.lap_time = j.at("lap_time").get<double>();
  o.crash_count = j.at("crash_count").get<int>();
  o.vehicle_collisions = j.at("vehicle_collisions").get<int>();
  o.total_reward = j.at("total_reward").get<double>();
  return o;
}

json header_json(const EpisodeRecord& r) {
  json lanes = json::array();
  for (auto l : r.spec.lanes) lanes.push_back(sim::lane_name(l));
  json init = json::array();
  for (const auto& s : r.initial_states) init.push_back(to_json(s));
  return {{"record", "header"},
          {"format_version", 1},
          {"track", r.track_document},
          {"config", to_json(r.config)},
          {"spec",
           {{"lanes", lanes},
            {"topology", topology_name(r.spec.topology)},
            {"seed", r.spec.seed},
            {"layout_seed", r.spec.layout_seed}}},
          {"initial_states", init}};
}

json step_json(const StepLog& s) {
  json states = json::array(), controls = json::array(), events = json::array(),
       collisions = json::array();
  for (const auto& st : s.states) states.push_back(to_json(st));
  for (const auto& c : s.controls) controls.push_back({c.steer, c.throttle});
  for (const auto& evs : s.events) {
    json a = json::array();
    for (const auto& e : evs) a.push_back({reward_kind_name(e.kind), e.value});
    events.push_back(a);
  }
  for (const auto& cs : s.collisions) {
    json a = json::array();
    for (auto c : cs) a.push_back(sim::collision_name(c));
    collisions.push_back(a);
  }
  return {{"record", "step"},     {"step", s.step},         {"time", s.time},
          {"states", states},     {"controls", controls},   {"events", events},
          {"collisions", collisions}, {"obs_hash", s.observation_hashes}};
}

json summary_json(const EpisodeRecord& r) {
  json outcomes = json::array();
  for (const auto& o : r.outcomes) outcomes.push_back(to_json(o));
  json j = {{"record", "summary"}, {"complete", r.complete}, {"outcomes", outcomes},
            {"winner", r.winner ? json(*r.winner) : json(nullptr)}};
  if (r.outcomes.size() == 2) j["classification"] = cooperation_name(classify_outcome(r));
  return j;
}

void apply_header(EpisodeRecord& r, const json& h) {
  if (h.at("format_version").get<int>() != 1) throw RecordError("unsupported record version");
  r.track_document = h.at("track").get<std::string>();
  r.config = env_config_from_json(h.at("config"));
  const json& spec = h.at("spec");
  for (const auto& l : spec.at("lanes")) r.spec.lanes.push_back(parse_lane(l.get<std::string>()));
  r.spec.topology = parse_topology(spec.at("topology").get<std::string>());
  r.spec.seed = spec.at("seed").get<std::uint64_t>();
  r.spec.layout_seed = spec.at("layout_seed").get<std::uint64_t>();
  for (const auto& s : h.at("initial_states")) r.initial_states.push_back(vehicle_state_from_json(s));
}

StepLog step_from_json(const json& j) {
  StepLog s;
  s.step = j.at("step").get<int>();
  s.time = j.at("time").get<double>();
  for (const auto& st : j.at("states")) s.states.push_back(vehicle_state_from_json(st));
  for (const auto& c : j.at("controls")) s.controls.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
  for (const auto& evs : j.at("events")) {
    std::vector<RewardEvent> v;
    for (const auto& e : evs) v.push_back({parse_reward_kind(e.at(0).get<std::string>()), e.at(1).get<double>()});
    s.events.push_back(std::move(v));
  }
  for (const auto& cs : j.at("collisions")) {
    std::vector<sim::CollisionKind> v;
    for (const auto& c : cs) v.push_back(parse_collision(c.get<std::string>()));
    s.collisions.push_back(std::move(v));
  }
  s.observation_hashes = j.at("obs_hash").get<std::vector<std::uint32_t>>();
  return s;
}

void apply_summary(EpisodeRecord& r, const json& j) {
  r.complete = j.at("complete").get<bool>();
  for (const auto& o : j.at("outcomes")) r.outcomes.push_back(outcome_from_json(o));
  if (!j.at("winner").is_null()) r.winner = j.at("winner").get<int>();
}

}  // namespace

std::string to_jsonl(const EpisodeRecord& record) {
  std::string out = header_json(record).dump() + "\n";
  for (const auto& s : record.steps) out += step_json(s).dump() + "\n";
  out += summary_json(record).dump() + "\n";
  return out;
}

EpisodeRecord from_jsonl(std::string_view text) {
  EpisodeRecord r;
  bool have_header = false;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  try {
    while (pos < text.size()) {
      std::size_t end = text.find('\n', pos);
      if (end == std::string_view::npos) end = text.size();
      const std::string_view line = text.substr(pos, end - pos);
      pos = end + 1;
      ++line_no;
      if (line.empty()) continue;
      const json j = json::parse(line);
      const std::string kind = j.at("record").get<std::string>();
      if (kind == "header") {
        apply_header(r, j);
        have_header = true;
      } else if (!have_header) {
        throw RecordError("record does not start with a header");
      } else if (kind == "step") {
        StepLog s = step_from_json(j);
        if (s.step != static_cast<int>(r.steps.size())) throw RecordError("steps out of order");
        r.steps.push_back(std::move(s));
      } else if (kind == "summary") {
        apply_summary(r, j);
      } else {
        throw RecordError("unknown line kind '" + kind + "'");
      }
    }
  } catch (const json::exception& e) {
    throw RecordError("corrupt record at line " + std::to_string(line_no) + ": " + e.what());
  }
  if (!have_header) throw RecordError("empty record");
  return r;
}

json to_json(const EpisodeRecord& record) {
  json steps = json::array();
  for (const auto& s : record.steps) steps.push_back(step_json(s));
  return {{"header", header_json(record)}, {"steps", steps}, {"summary", summary_json(record)}};
}

EpisodeRecord record_from_json(const json& j) {
  EpisodeRecord r;
  try {
    apply_header(r, j.at("header"));
    for (const auto& s : j.at("steps")) r.steps.push_back(step_from_json(s));
    apply_summary(r, j.at("summary"));
  } catch (const json::exception& e) {
    throw RecordError(std::string("corrupt record: ") + e.what());
  }
  return r;
}

void save_record(const EpisodeRecord& record, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RecordError("cannot write '" + path + "'");
  out << to_jsonl(record);
}

EpisodeRecord load_record(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RecordError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_jsonl(ss.str());
}

namespace {

bool same_bits(double a, double b) {
  return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
}

std::string state_diff(const sim::VehicleState& a, const sim::VehicleState& b) {
  if (!same_bits(a.position.x, b.position.x) || !same_bits(a.position.y, b.position.y)) return "position";
  if (!same_bits(a.heading, b.heading)) return "heading";
  if (!same_bits(a.speed, b.speed)) return "speed";
  if (!same_bits(a.steering_angle, b.steering_angle)) return "steering_angle";
  if (!same_bits(a.progress_s, b.progress_s)) return "progress_s";
  if (!same_bits(a.elapsed, b.elapsed)) return "elapsed";
  if (a.lane != b.lane) return "lane";
  if (a.last_checkpoint_index != b.last_checkpoint_index) return "last_checkpoint";
  if (a.crash_count != b.crash_count) return "crash_count";
  if (a.finished != b.finished) return "finished";
  return {};
}

}  // namespace

ReplayReport replay(const EpisodeRecord& record) {
  ReplayReport report;
  auto track = std::make_shared<const sim::TrackSpec>(sim::load_track(record.track_document));
  World world(track, record.config);
  world.reset(record.spec);
  auto mismatch = [&report](int step, std::string what) {
    report.match = false;
    report.first_mismatch_step = step;
    report.detail = std::move(what);
    return report;
  };
  for (int i = 0; i < world.agent_count(); ++i) {
    if (i >= static_cast<int>(record.initial_states.size())) return mismatch(-1, "agent count");
    if (auto d = state_diff(world.agent(i).state, record.initial_states[i]); !d.empty()) {
      return mismatch(-1, "initial " + d);
    }
  }
  for (const auto& log : record.steps) {
    if (world.terminated()) return mismatch(log.step, "episode ended early");
    const auto result = world.step(log.controls);
    for (int i = 0; i < world.agent_count(); ++i) {
      if (auto d = state_diff(world.agent(i).state, log.states.at(i)); !d.empty()) {
        return mismatch(log.step, "agent " + std::to_string(i) + " " + d);
      }
      if (result[i].events != log.events.at(i)) {
        return mismatch(log.step, "agent " + std::to_string(i) + " events");
      }
    }
    report.steps_checked += 1;
  }
  return report;
}

}  // namespace cadlab::env
