#include "cadlab/experiment.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "cadlab/record.hpp"

namespace cadlab::cli {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError("'" + where + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    if (known.count(key) == 0) throw ConfigError("unknown key '" + key + "' in '" + where + "'");
  }
}

std::uint64_t parse_seed(const std::string& text) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw ConfigError("CADLAB_SEED must be an unsigned integer");
  return v;
}

}  // namespace

ppo::PPOConfig ppo_config_from_json(const json& j, ppo::PPOConfig c) {
  reject_unknown(j,
                 {"gamma", "lambda", "clip", "learning_rate", "lr_decay", "epochs", "minibatch",
                  "horizon", "entropy_coef", "value_coef", "max_grad_norm", "adam_beta1",
                  "adam_beta2", "adam_eps", "reward_scale", "total_steps", "num_worlds", "seed",
                  "hidden"},
                 "ppo");
  c.gamma = j.value("gamma", c.gamma);
  c.lambda = j.value("lambda", c.lambda);
  c.clip = j.value("clip", c.clip);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.epochs = j.value("epochs", c.epochs);
  c.minibatch = j.value("minibatch", c.minibatch);
  c.horizon = j.value("horizon", c.horizon);
  c.entropy_coef = j.value("entropy_coef", c.entropy_coef);
  c.value_coef = j.value("value_coef", c.value_coef);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.reward_scale = j.value("reward_scale", c.reward_scale);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.num_worlds = j.value("num_worlds", c.num_worlds);
  c.seed = j.value("seed", c.seed);
  if (auto it = j.find("hidden"); it != j.end()) c.arch.hidden = it->get<std::vector<int>>();
  return c;
}

json to_json(const ppo::PPOConfig& c) {
  return {{"gamma", c.gamma},
          {"lambda", c.lambda},
          {"clip", c.clip},
          {"learning_rate", c.learning_rate},
          {"lr_decay", c.lr_decay},
          {"epochs", c.epochs},
          {"minibatch", c.minibatch},
          {"horizon", c.horizon},
          {"entropy_coef", c.entropy_coef},
          {"value_coef", c.value_coef},
          {"max_grad_norm", c.max_grad_norm},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"reward_scale", c.reward_scale},
          {"total_steps", c.total_steps},
          {"num_worlds", c.num_worlds},
          {"seed", c.seed},
          {"hidden", c.arch.hidden}};
}

ExperimentConfig parse_experiment(const json& doc, const std::filesystem::path& base_dir) {
  ExperimentConfig cfg;
  try {
    reject_unknown(doc, {"track", "output_root", "seed", "env", "ppo", "stages", "eval", "serve"},
                   "config");
    if (!doc.contains("track")) throw ConfigError("missing field 'track'");
    cfg.track_path = base_dir / doc.at("track").get<std::string>();
    if (!std::filesystem::exists(cfg.track_path)) {
      throw ConfigError("track file not found: " + cfg.track_path.string());
    }
    if (doc.contains("output_root")) cfg.output_root = base_dir / doc.at("output_root").get<std::string>();
    cfg.seed = doc.value("seed", cfg.seed);
    if (const char* env_seed = std::getenv("CADLAB_SEED"); env_seed != nullptr && *env_seed != '\0') {
      cfg.seed = parse_seed(env_seed);
    }
    if (doc.contains("env")) cfg.curriculum.env = env::env_config_from_json(doc.at("env"));
    cfg.curriculum.env.validate();

    ppo::PPOConfig base;
    if (doc.contains("ppo")) {
      if (doc.at("ppo").contains("seed")) throw ConfigError("set the seed at the top level, not under 'ppo'");
      base = ppo_config_from_json(doc.at("ppo"));
    }
    json stages = doc.value("stages", json::object());
    reject_unknown(stages, {"1", "2", "3", "4"}, "stages");
    for (int k = 1; k <= 4; ++k) {
      ppo::PPOConfig c = base;
      c.seed = cfg.seed + static_cast<std::uint64_t>(k - 1);
      if (auto it = stages.find(std::to_string(k)); it != stages.end()) c = ppo_config_from_json(*it, c);
      c.validate();
      cfg.curriculum.stages[static_cast<std::size_t>(k - 1)] = c;
    }

    if (doc.contains("eval")) {
      const json& e = doc.at("eval");
      reject_unknown(e, {"solo_laps", "duel_laps", "seed"}, "eval");
      cfg.eval.solo_laps = e.value("solo_laps", cfg.eval.solo_laps);
      cfg.eval.duel_laps = e.value("duel_laps", cfg.eval.duel_laps);
      cfg.eval.seed = e.value("seed", cfg.eval.seed);
      if (cfg.eval.solo_laps < 1 || cfg.eval.duel_laps < 1) throw ConfigError("lap counts must be positive");
    }
    if (doc.contains("serve")) {
      const json& s = doc.at("serve");
      reject_unknown(s, {"port", "tick_hz", "series_episodes", "disconnect_timeout_s", "checkpoint"},
                     "serve");
      cfg.serve.port = s.value("port", cfg.serve.port);
      cfg.serve.tick_hz = s.value("tick_hz", cfg.serve.tick_hz);
      cfg.serve.series_episodes = s.value("series_episodes", cfg.serve.series_episodes);
      cfg.serve.disconnect_timeout_s = s.value("disconnect_timeout_s", cfg.serve.disconnect_timeout_s);
      if (s.contains("checkpoint")) cfg.serve.checkpoint = (base_dir / s.at("checkpoint").get<std::string>()).string();
      if (cfg.serve.port < 0 || cfg.serve.port > 65535) throw ConfigError("serve.port out of range");
      if (!(cfg.serve.tick_hz > 0.0)) throw ConfigError("serve.tick_hz must be positive");
      if (cfg.serve.series_episodes < 1) throw ConfigError("serve.series_episodes must be positive");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  cfg.document = doc;
  cfg.document["seed"] = cfg.seed;
  return cfg;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  ExperimentConfig cfg = parse_experiment(doc, path.parent_path());
  cfg.source = path;
  return cfg;
}

std::filesystem::path fresh_output_dir(const std::filesystem::path& root, const std::string& prefix) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream name;
  name << prefix << '_' << std::put_time(&tm, "%Y%m%d_%H%M%S");
  std::filesystem::create_directories(root);
  std::filesystem::path dir = root / name.str();
  for (int n = 1; !std::filesystem::create_directory(dir); ++n) {
    dir = root / (name.str() + "_" + std::to_string(n));
  }
  return dir;
}

}  // namespace cadlab::cli
