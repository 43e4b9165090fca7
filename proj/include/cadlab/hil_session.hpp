#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "cadlab/eval.hpp"
#include "cadlab/policy.hpp"
#include "cadlab/record.hpp"
#include "cadlab/world.hpp"

namespace cadlab::hil {

inline constexpr int kProtoVersion = 1;

enum class Phase { Lobby, Running, Finished };
const char* phase_name(Phase p);

class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SessionConfig {
  env::EnvConfig env;
  double tick_hz = 10.0;
  int series_episodes = 5;
  double disconnect_timeout_s = 10.0;
  std::uint64_t seed = 1;
  // The AV (left lane) receives the human vehicle's data.
  env::Topology topology = env::Topology::UniToRed;
  bool randomize = true;
};

// Client to server messages.
struct JoinMsg {
  std::optional<eval::DriverLevel> level;
};
struct ControlMsg {
  std::int64_t seq = 0;
  double steer = 0.0;
  double throttle = 0.0;
};
struct StartMsg {};
struct ResetMsg {};
using ClientMessage = std::variant<JoinMsg, ControlMsg, StartMsg, ResetMsg>;

// Throws ProtocolError on malformed text, unknown types or a proto_version
// other than kProtoVersion.
ClientMessage parse_client_message(const std::string& text);
nlohmann::json to_json(const ClientMessage& m);

nlohmann::json error_frame(const std::string& code, const std::string& message);

enum class ControlResult { Buffered, Stale };

struct EpisodeResult {
  int episode = 0;  // 1-based
  env::EpisodeRecord record;
  env::Cooperation cooperation = env::Cooperation::Failed;
  std::string reason;  // empty, "timeout" or "aborted"
  std::optional<int> winner;
};

// One mixed-traffic series: the human drives the right lane, the AV the left
// lane with its policy mean. Sans I/O; the caller owns the clock.
class Session {
 public:
  static constexpr int kHuman = 0;
  static constexpr int kAv = 1;

  Session(std::string id, std::shared_ptr<const sim::TrackSpec> track,
          std::shared_ptr<const nn::Policy<float>> av_policy, SessionConfig config);
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  const std::string& id() const { return id_; }
  Phase phase() const { return phase_; }
  const SessionConfig& config() const { return config_; }
  eval::DriverLevel driver_level() const { return level_; }
  void set_driver_level(eval::DriverLevel level);  // Lobby only

  // Lobby -> Running. Returns the first episode frame.
  std::vector<nlohmann::json> start();

  // Latest-wins buffering; values clamped to [-1, 1]. Throws StateError
  // unless Running.
  ControlResult ingest_control(const ControlMsg& msg);

  // One decision step. Returns the state frame, followed by result, episode
  // and finished frames as the series advances. No-op while paused.
  std::vector<nlohmann::json> tick();

  // Restarts the current episode from its seeds, discarding its partial record.
  std::vector<nlohmann::json> reset();

  // Ends the session. A running episode is archived as failed with `reason`.
  std::vector<nlohmann::json> abort(const std::string& reason);

  void disconnect(double now_s);
  void reconnect(double now_s);
  bool paused() const { return paused_since_.has_value(); }
  // Aborts with reason "timeout" once paused for disconnect_timeout_s.
  std::vector<nlohmann::json> check_timeout(double now_s);

  int episode() const { return episode_; }
  int ticks() const { return ticks_; }
  int stale_dropped() const { return stale_dropped_; }
  const sim::Control& human_control() const { return human_control_; }
  const env::World& world() const { return world_; }
  const std::vector<EpisodeResult>& results() const { return results_; }

  nlohmann::json welcome_frame() const;
  nlohmann::json archive() const;

 private:
  void begin_episode();
  nlohmann::json state_frame(const std::vector<env::AgentStep>& steps) const;
  nlohmann::json episode_frame() const;
  nlohmann::json result_frame(const EpisodeResult& r) const;
  nlohmann::json finished_frame() const;
  void finish_episode(std::vector<nlohmann::json>& frames, const std::string& reason);

  std::string id_;
  std::shared_ptr<const sim::TrackSpec> track_;
  std::shared_ptr<const nn::Policy<float>> av_;
  SessionConfig config_;
  eval::DriverLevel level_ = eval::DriverLevel::Beginner;
  Phase phase_ = Phase::Lobby;
  env::World world_;
  env::EpisodeRecord record_;
  std::vector<env::Observation> obs_;
  int episode_ = 0;
  int ticks_ = 0;
  std::optional<std::int64_t> last_seq_;
  std::optional<ControlMsg> pending_;
  sim::Control human_control_{};
  int stale_dropped_ = 0;
  std::optional<double> paused_since_;
  std::vector<EpisodeResult> results_;
};

// Per-episode cooperation outcomes recomputed from an archive's records.
std::vector<eval::SessionOutcome> outcomes_from_archive(const nlohmann::json& archive);

}  // namespace cadlab::hil
