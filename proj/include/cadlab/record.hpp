#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cadlab/world.hpp"

namespace cadlab::env {

struct StepLog {
  int step = 0;
  double time = 0.0;  // at the end of the step
  std::vector<sim::VehicleState> states;
  std::vector<sim::Control> controls;
  std::vector<std::vector<RewardEvent>> events;
  std::vector<std::vector<sim::CollisionKind>> collisions;
  std::vector<std::uint32_t> observation_hashes;
};

struct AgentOutcome {
  sim::Lane lane = sim::Lane::Right;
  bool finished = false;
  double lap_time = 0.0;  // finish time, or elapsed time on timeout
  int crash_count = 0;
  int vehicle_collisions = 0;
  double total_reward = 0.0;
};

struct EpisodeRecord {
  std::string track_document;
  EnvConfig config;
  ResetSpec spec;
  std::vector<sim::VehicleState> initial_states;
  std::vector<StepLog> steps;
  std::vector<AgentOutcome> outcomes;  // filled when the episode terminates
  std::optional<int> winner;
  bool complete = false;
};

class RecordError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Outcome summary from the final state of a world; called by World when the
// episode terminates.
void finalize_record(EpisodeRecord& record, const World& world);

// Smaller finish time among finishers; none when nobody finished or on a tie.
std::optional<int> decide_winner(const std::vector<AgentOutcome>& outcomes);

// Sum of every logged event value for one agent.
double cumulative_reward(const EpisodeRecord& record, int agent);

enum class Cooperation { Successful, Failed };
const char* cooperation_name(Cooperation c);

// Failed iff any vehicle-vehicle collision, any respawn, or any agent that did
// not finish. Throws RecordError for single-agent records.
Cooperation classify_outcome(const EpisodeRecord& record);

// Line-delimited JSON: a header line, one line per decision step, and a
// summary footer.
std::string to_jsonl(const EpisodeRecord& record);
EpisodeRecord from_jsonl(std::string_view text);
void save_record(const EpisodeRecord& record, const std::string& path);
EpisodeRecord load_record(const std::string& path);

struct ReplayReport {
  bool match = true;
  int steps_checked = 0;
  std::optional<int> first_mismatch_step;
  std::string detail;
};

// Re-simulates the record from its logged controls and compares every logged
// vehicle state bit for bit.
ReplayReport replay(const EpisodeRecord& record);

// Serialization helpers shared with the config and archive formats.
nlohmann::json to_json(const EnvConfig& c);
EnvConfig env_config_from_json(const nlohmann::json& j, EnvConfig base = {});
nlohmann::json to_json(const RewardTable& t);
RewardTable reward_table_from_json(const nlohmann::json& j, RewardTable base = {});
nlohmann::json to_json(const sim::VehicleState& s);
sim::VehicleState vehicle_state_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AgentOutcome& o);
nlohmann::json to_json(const EpisodeRecord& record);  // single JSON document
EpisodeRecord record_from_json(const nlohmann::json& j);

}  // namespace cadlab::env
