#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "cadlab/ppo.hpp"

namespace cadlab::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalSpec {
  int solo_laps = 10;
  int duel_laps = 20;
  std::uint64_t seed = 1000;
};

struct ServeSpec {
  int port = 8080;
  double tick_hz = 10.0;
  int series_episodes = 5;
  double disconnect_timeout_s = 10.0;
  std::string checkpoint;  // AV policy, empty = <run_dir>/stage3.ckpt
};

struct ExperimentConfig {
  std::filesystem::path source;  // the config file, empty when built in code
  std::filesystem::path track_path;
  std::filesystem::path output_root = "runs";
  std::uint64_t seed = 1;
  ppo::CurriculumConfig curriculum;
  EvalSpec eval;
  ServeSpec serve;
  nlohmann::json document;  // as loaded, echoed into output directories
};

// Parses a JSON experiment file. Relative paths resolve against the file's
// directory. A set CADLAB_SEED environment variable replaces "seed".
ExperimentConfig load_experiment(const std::filesystem::path& path);
ExperimentConfig parse_experiment(const nlohmann::json& doc, const std::filesystem::path& base_dir);

ppo::PPOConfig ppo_config_from_json(const nlohmann::json& j, ppo::PPOConfig base = {});
nlohmann::json to_json(const ppo::PPOConfig& c);

// `<root>/<prefix>_<YYYYmmdd_HHMMSS>[_n]`, created fresh; never reuses a path.
std::filesystem::path fresh_output_dir(const std::filesystem::path& root, const std::string& prefix);

}  // namespace cadlab::cli
