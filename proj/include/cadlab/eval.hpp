#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cadlab/policy.hpp"
#include "cadlab/ppo.hpp"
#include "cadlab/record.hpp"

namespace cadlab::eval {

struct AgentLap {
  bool finished = false;
  double lap_time = 0.0;  // finish time, or time at the end of the episode
  int crashes = 0;
  int vehicle_collisions = 0;
};

struct LapRecord {
  int lap = 0;
  std::uint64_t seed = 0;
  std::uint64_t layout_seed = 0;
  std::vector<AgentLap> agents;  // in table agent order
  bool crashed = false;          // any crash or respawn by any agent
  std::optional<int> winner;     // index into agents
};

struct LapTable {
  std::string experiment;
  std::vector<std::string> agents;  // e.g. {"blue"} or {"blue", "red"}
  std::vector<LapRecord> laps;

  int crashed_laps() const;
  double accident_pct() const;
  double safe_pct() const { return 100.0 - accident_pct(); }
  int laps_with_winner() const;
  // Share of laps with a winner that this agent won; 0 when no lap had one.
  double win_pct(int agent) const;
  int vehicle_collisions() const;  // summed over laps, counted once per lap
  // Laps the agent finished without any crash.
  int clean_finishes(int agent) const;
  double mean_lap_time(int agent) const;  // over finished laps
  double std_lap_time(int agent) const;   // population std over finished laps
  double lap_time_cov(int agent) const;   // std / mean
};

// Seeds for lap i of an evaluation series.
std::uint64_t lap_seed(std::uint64_t base, int lap);
std::uint64_t lap_layout_seed(std::uint64_t base, int lap);

struct EvalOptions {
  env::EnvConfig env;
  int laps = 10;
  std::uint64_t seed = 1000;
  bool randomize = true;  // perturbed start and obstacle layout per lap
  std::string experiment = "eval";
};

// Deterministic-mean policy driving `agent`'s lane alone.
LapTable run_solo_eval(const nn::Policy<float>& policy, ppo::Agent agent,
                       std::shared_ptr<const sim::TrackSpec> track, const EvalOptions& opt,
                       std::vector<env::EpisodeRecord>* records = nullptr);

// Blue (right lane) and red (left lane) race under the given topology.
LapTable run_duel_eval(const nn::Policy<float>& blue, const nn::Policy<float>& red,
                       env::Topology topology, std::shared_ptr<const sim::TrackSpec> track,
                       const EvalOptions& opt, std::vector<env::EpisodeRecord>* records = nullptr);

// Mean action of a policy for one observation.
sim::Control act_mean(const nn::Policy<float>& policy, const env::Observation& obs);

std::string lap_table_csv(const LapTable& table);
std::string lap_table_text(const LapTable& table);
void write_lap_table(const LapTable& table, const std::string& csv_path,
                     const std::string& text_path);

// Per-agent decision-step positions.
struct TrajectoryPoint {
  int step = 0;
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
  double speed = 0.0;
};

struct Trajectory {
  std::vector<sim::Lane> lanes;
  std::vector<std::vector<TrajectoryPoint>> agents;
};

// One point per decision step the agent was still driving.
Trajectory trajectory_from_record(const env::EpisodeRecord& record);
std::string trajectory_csv(const Trajectory& t);
Trajectory parse_trajectory_csv(const std::string& text);
void export_trajectory(const env::EpisodeRecord& record, const std::string& path);
Trajectory import_trajectory(const std::string& path);

struct SummaryRow {
  std::string experiment;
  int laps = 0;
  double accident_pct = 0.0;
  double safe_pct = 0.0;
  std::vector<std::pair<std::string, double>> win_pct;
  int vehicle_collisions = 0;
};

enum class DriverLevel { Pro, Intermediate, Beginner };
const char* driver_level_name(DriverLevel l);
DriverLevel parse_driver_level(const std::string& s);

struct SessionOutcome {
  DriverLevel level = DriverLevel::Beginner;
  env::Cooperation cooperation = env::Cooperation::Failed;
};

struct CooperationRow {
  DriverLevel level = DriverLevel::Beginner;
  int sessions = 0;
  int successful = 0;
  double success_pct = 0.0;
};

struct Summary {
  std::vector<SummaryRow> runs;
  std::vector<CooperationRow> cooperation;
};

// Throws std::invalid_argument("no runs") when both inputs are empty.
Summary summarize(const std::vector<LapTable>& tables,
                  const std::vector<SessionOutcome>& sessions = {});
std::string summary_csv(const Summary& s);
std::string summary_text(const Summary& s);

}  // namespace cadlab::eval
