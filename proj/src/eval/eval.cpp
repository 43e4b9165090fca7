#include "cadlab/eval.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace cadlab::eval {

int LapTable::crashed_laps() const {
  int n = 0;
  for (const auto& l : laps) n += l.crashed ? 1 : 0;
  return n;
}

double LapTable::accident_pct() const {
  if (laps.empty()) return 0.0;
  return 100.0 * crashed_laps() / static_cast<double>(laps.size());
}

int LapTable::laps_with_winner() const {
  int n = 0;
  for (const auto& l : laps) n += l.winner ? 1 : 0;
  return n;
}

double LapTable::win_pct(int agent) const {
  const int decided = laps_with_winner();
  if (decided == 0) return 0.0;
  int wins = 0;
  for (const auto& l : laps) wins += l.winner == agent ? 1 : 0;
  return 100.0 * wins / decided;
}

int LapTable::vehicle_collisions() const {
  int n = 0;
  for (const auto& l : laps) {
    int lap_max = 0;
    for (const auto& a : l.agents) lap_max = std::max(lap_max, a.vehicle_collisions);
    n += lap_max;
  }
  return n;
}

int LapTable::clean_finishes(int agent) const {
  int n = 0;
  for (const auto& l : laps) {
    const AgentLap& a = l.agents.at(static_cast<std::size_t>(agent));
    n += a.finished && a.crashes == 0 ? 1 : 0;
  }
  return n;
}

double LapTable::mean_lap_time(int agent) const {
  double sum = 0.0;
  int n = 0;
  for (const auto& l : laps) {
    const AgentLap& a = l.agents.at(static_cast<std::size_t>(agent));
    if (a.finished) {
      sum += a.lap_time;
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / n;
}

double LapTable::std_lap_time(int agent) const {
  const double mean = mean_lap_time(agent);
  double sum = 0.0;
  int n = 0;
  for (const auto& l : laps) {
    const AgentLap& a = l.agents.at(static_cast<std::size_t>(agent));
    if (a.finished) {
      sum += (a.lap_time - mean) * (a.lap_time - mean);
      ++n;
    }
  }
  return n == 0 ? 0.0 : std::sqrt(sum / n);
}

double LapTable::lap_time_cov(int agent) const {
  const double mean = mean_lap_time(agent);
  return mean > 0.0 ? std_lap_time(agent) / mean : 0.0;
}

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t nonzero(std::uint64_t x) { return x == 0 ? 1 : x; }

}  // namespace

std::uint64_t lap_seed(std::uint64_t base, int lap) {
  return nonzero(mix(mix(base) ^ (2 * static_cast<std::uint64_t>(lap) + 1)));
}

std::uint64_t lap_layout_seed(std::uint64_t base, int lap) {
  return nonzero(mix(mix(base) ^ (2 * static_cast<std::uint64_t>(lap) + 2)));
}

sim::Control act_mean(const nn::Policy<float>& policy, const env::Observation& obs) {
  nn::MatrixX<float> x(env::kObsSize, 1);
  for (int i = 0; i < env::kObsSize; ++i) x(i, 0) = static_cast<float>(obs[static_cast<std::size_t>(i)]);
  nn::ForwardTrace<float> t;
  policy.forward(x, t);
  return {static_cast<double>(t.mean(0, 0)), static_cast<double>(t.mean(1, 0))};
}

namespace {

LapRecord run_lap(const std::vector<const nn::Policy<float>*>& policies,
                  const std::vector<sim::Lane>& lanes, env::Topology topology,
                  const std::shared_ptr<const sim::TrackSpec>& track, const EvalOptions& opt,
                  int lap, std::vector<env::EpisodeRecord>* records) {
  env::World world(track, opt.env);
  env::EpisodeRecord rec;
  if (records != nullptr) world.set_recorder(&rec);
  env::ResetSpec spec{lanes, topology, 0, 0};
  if (opt.randomize) {
    spec.seed = lap_seed(opt.seed, lap);
    spec.layout_seed = lap_layout_seed(opt.seed, lap);
  }
  std::vector<env::Observation> obs = world.reset(spec);
  std::vector<sim::Control> controls(lanes.size());
  while (!world.terminated()) {
    for (std::size_t i = 0; i < lanes.size(); ++i) controls[i] = act_mean(*policies[i], obs[i]);
    const auto out = world.step(controls);
    for (std::size_t i = 0; i < lanes.size(); ++i) obs[i] = out[i].observation;
  }
  LapRecord r;
  r.lap = lap;
  r.seed = spec.seed;
  r.layout_seed = spec.layout_seed;
  std::vector<env::AgentOutcome> outcomes;
  for (int i = 0; i < world.agent_count(); ++i) {
    const env::AgentStatus& a = world.agent(i);
    AgentLap al{a.finished, a.finished ? a.finish_time : world.time(), a.state.crash_count,
                a.vehicle_collisions};
    r.crashed = r.crashed || al.crashes > 0;
    r.agents.push_back(al);
    env::AgentOutcome o;
    o.finished = al.finished;
    o.lap_time = al.lap_time;
    outcomes.push_back(o);
  }
  if (lanes.size() > 1) r.winner = env::decide_winner(outcomes);
  if (records != nullptr) records->push_back(std::move(rec));
  return r;
}

}  // namespace

LapTable run_solo_eval(const nn::Policy<float>& policy, ppo::Agent agent,
                       std::shared_ptr<const sim::TrackSpec> track, const EvalOptions& opt,
                       std::vector<env::EpisodeRecord>* records) {
  if (opt.laps < 1) throw std::invalid_argument("evaluation needs at least one lap");
  LapTable t;
  t.experiment = opt.experiment;
  t.agents = {ppo::agent_name(agent)};
  for (int lap = 0; lap < opt.laps; ++lap) {
    t.laps.push_back(run_lap({&policy}, {ppo::agent_lane(agent)}, env::Topology::None, track, opt,
                             lap, records));
  }
  return t;
}

LapTable run_duel_eval(const nn::Policy<float>& blue, const nn::Policy<float>& red,
                       env::Topology topology, std::shared_ptr<const sim::TrackSpec> track,
                       const EvalOptions& opt, std::vector<env::EpisodeRecord>* records) {
  if (opt.laps < 1) throw std::invalid_argument("evaluation needs at least one lap");
  LapTable t;
  t.experiment = opt.experiment;
  t.agents = {"blue", "red"};
  for (int lap = 0; lap < opt.laps; ++lap) {
    t.laps.push_back(run_lap({&blue, &red}, {sim::Lane::Right, sim::Lane::Left}, topology, track,
                             opt, lap, records));
  }
  return t;
}

std::string lap_table_csv(const LapTable& table) {
  std::ostringstream out;
  out << "lap,seed,layout_seed";
  for (const auto& name : table.agents) {
    out << ',' << name << "_finished," << name << "_lap_time," << name << "_crashes," << name
        << "_vehicle_collisions";
  }
  out << ",crashed,winner\n";
  out << std::setprecision(10);
  for (const auto& l : table.laps) {
    out << l.lap << ',' << l.seed << ',' << l.layout_seed;
    for (const auto& a : l.agents) {
      out << ',' << (a.finished ? 1 : 0) << ',' << a.lap_time << ',' << a.crashes << ','
          << a.vehicle_collisions;
    }
    out << ',' << (l.crashed ? 1 : 0) << ','
        << (l.winner ? table.agents.at(static_cast<std::size_t>(*l.winner)) : std::string("none"))
        << '\n';
  }
  return out.str();
}

std::string lap_table_text(const LapTable& table) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << "experiment: " << table.experiment << "\n";
  out << "lap";
  for (const auto& name : table.agents) out << "  " << std::setw(10) << (name + " time") << "  crash";
  if (table.agents.size() > 1) out << "  winner";
  out << "\n";
  for (const auto& l : table.laps) {
    out << std::setw(3) << l.lap + 1;
    for (const auto& a : l.agents) {
      out << "  " << std::setw(10) << (a.finished ? std::to_string(a.lap_time).substr(0, 6) : "DNF")
          << "  " << std::setw(5) << a.crashes;
    }
    if (table.agents.size() > 1) {
      out << "  " << (l.winner ? table.agents.at(static_cast<std::size_t>(*l.winner)) : "-");
    }
    out << "\n";
  }
  out << "laps: " << table.laps.size() << "  crashed laps: " << table.crashed_laps()
      << "  accident %: " << table.accident_pct() << "  safe %: " << table.safe_pct() << "\n";
  for (std::size_t i = 0; i < table.agents.size(); ++i) {
    const int a = static_cast<int>(i);
    out << table.agents[i] << ": clean finishes " << table.clean_finishes(a) << "  mean lap "
        << table.mean_lap_time(a) << " s +/- " << table.std_lap_time(a) << " s";
    if (table.agents.size() > 1) out << "  win % " << table.win_pct(a);
    out << "\n";
  }
  if (table.agents.size() > 1) out << "vehicle-vehicle collisions: " << table.vehicle_collisions() << "\n";
  return out.str();
}

void write_lap_table(const LapTable& table, const std::string& csv_path,
                     const std::string& text_path) {
  std::ofstream csv(csv_path), text(text_path);
  if (!csv || !text) throw std::runtime_error("cannot write lap table files");
  csv << lap_table_csv(table);
  text << lap_table_text(table);
}

Trajectory trajectory_from_record(const env::EpisodeRecord& record) {
  Trajectory t;
  t.lanes = record.spec.lanes;
  t.agents.resize(record.spec.lanes.size());
  std::vector<bool> stopped(record.spec.lanes.size(), false);
  for (const auto& step : record.steps) {
    for (std::size_t i = 0; i < step.states.size() && i < t.agents.size(); ++i) {
      if (stopped[i]) continue;
      const sim::VehicleState& s = step.states[i];
      t.agents[i].push_back({step.step, s.position.x, s.position.y, s.heading, s.speed});
      if (s.finished) stopped[i] = true;
    }
  }
  return t;
}

std::string trajectory_csv(const Trajectory& t) {
  std::ostringstream out;
  out << "agent,lane,step,x,y,heading,speed\n";
  out << std::setprecision(17);
  for (std::size_t i = 0; i < t.agents.size(); ++i) {
    for (const auto& p : t.agents[i]) {
      out << i << ',' << sim::lane_name(t.lanes.at(i)) << ',' << p.step << ',' << p.x << ',' << p.y
          << ',' << p.heading << ',' << p.speed << '\n';
    }
  }
  return out.str();
}

Trajectory parse_trajectory_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line != "agent,lane,step,x,y,heading,speed") throw std::runtime_error("not a trajectory file");
  Trajectory t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(row, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw std::runtime_error("malformed trajectory row '" + line + "'");
    const auto agent = static_cast<std::size_t>(std::stoul(cells[0]));
    if (agent >= t.agents.size()) {
      t.agents.resize(agent + 1);
      t.lanes.resize(agent + 1, sim::Lane::Right);
    }
    t.lanes[agent] = cells[1] == "left" ? sim::Lane::Left : sim::Lane::Right;
    t.agents[agent].push_back({std::stoi(cells[2]), std::stod(cells[3]), std::stod(cells[4]),
                               std::stod(cells[5]), std::stod(cells[6])});
  }
  return t;
}

void export_trajectory(const env::EpisodeRecord& record, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << trajectory_csv(trajectory_from_record(record));
}

Trajectory import_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_trajectory_csv(ss.str());
}

const char* driver_level_name(DriverLevel l) {
  switch (l) {
    case DriverLevel::Pro: return "pro";
    case DriverLevel::Intermediate: return "intermediate";
    case DriverLevel::Beginner: return "beginner";
  }
  return "?";
}

DriverLevel parse_driver_level(const std::string& s) {
  for (auto l : {DriverLevel::Pro, DriverLevel::Intermediate, DriverLevel::Beginner}) {
    if (s == driver_level_name(l)) return l;
  }
  throw std::invalid_argument("unknown driver level '" + s + "'");
}

Summary summarize(const std::vector<LapTable>& tables, const std::vector<SessionOutcome>& sessions) {
  if (tables.empty() && sessions.empty()) throw std::invalid_argument("no runs");
  Summary s;
  for (const auto& t : tables) {
    SummaryRow r;
    r.experiment = t.experiment;
    r.laps = static_cast<int>(t.laps.size());
    r.accident_pct = t.accident_pct();
    r.safe_pct = t.safe_pct();
    if (t.agents.size() > 1) {
      for (std::size_t i = 0; i < t.agents.size(); ++i) {
        r.win_pct.emplace_back(t.agents[i], t.win_pct(static_cast<int>(i)));
      }
    }
    r.vehicle_collisions = t.vehicle_collisions();
    s.runs.push_back(std::move(r));
  }
  for (auto level : {DriverLevel::Pro, DriverLevel::Intermediate, DriverLevel::Beginner}) {
    CooperationRow row;
    row.level = level;
    for (const auto& o : sessions) {
      if (o.level != level) continue;
      row.sessions += 1;
      row.successful += o.cooperation == env::Cooperation::Successful ? 1 : 0;
    }
    if (row.sessions == 0) continue;
    row.success_pct = 100.0 * row.successful / row.sessions;
    s.cooperation.push_back(row);
  }
  return s;
}

std::string summary_csv(const Summary& s) {
  std::ostringstream out;
  out << std::setprecision(10);
  if (!s.runs.empty()) {
    out << "experiment,laps,accident_pct,safe_pct,blue_win_pct,red_win_pct,vehicle_collisions\n";
    for (const auto& r : s.runs) {
      double blue = 0.0, red = 0.0;
      bool duel = false;
      for (const auto& [name, pct] : r.win_pct) {
        duel = true;
        if (name == "blue") blue = pct;
        if (name == "red") red = pct;
      }
      out << r.experiment << ',' << r.laps << ',' << r.accident_pct << ',' << r.safe_pct << ',';
      if (duel) {
        out << blue << ',' << red;
      } else {
        out << ',';
      }
      out << ',' << r.vehicle_collisions << '\n';
    }
  }
  if (!s.cooperation.empty()) {
    if (!s.runs.empty()) out << '\n';
    out << "driver_level,sessions,successful,success_pct\n";
    for (const auto& c : s.cooperation) {
      out << driver_level_name(c.level) << ',' << c.sessions << ',' << c.successful << ','
          << c.success_pct << '\n';
    }
  }
  return out.str();
}

std::string summary_text(const Summary& s) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(1);
  if (!s.runs.empty()) {
    out << std::left << std::setw(24) << "experiment" << std::right << std::setw(6) << "laps"
        << std::setw(12) << "accident %" << std::setw(10) << "safe %" << std::setw(12) << "wins"
        << "\n";
    for (const auto& r : s.runs) {
      std::string wins;
      for (const auto& [name, pct] : r.win_pct) {
        std::ostringstream w;
        w << std::fixed << std::setprecision(0) << name << ' ' << pct << "% ";
        wins += w.str();
      }
      out << std::left << std::setw(24) << r.experiment << std::right << std::setw(6) << r.laps
          << std::setw(12) << r.accident_pct << std::setw(10) << r.safe_pct << "  " << wins << "\n";
    }
  }
  if (!s.cooperation.empty()) {
    out << std::left << std::setw(16) << "driver level" << std::right << std::setw(10) << "sessions"
        << std::setw(12) << "successful" << std::setw(12) << "success %" << "\n";
    for (const auto& c : s.cooperation) {
      out << std::left << std::setw(16) << driver_level_name(c.level) << std::right << std::setw(10)
          << c.sessions << std::setw(12) << c.successful << std::setw(12) << c.success_pct << "\n";
    }
  }
  return out.str();
}

}  // namespace cadlab::eval
