#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cadlab/eval.hpp"
#include "cadlab/experiment.hpp"
#include "cadlab/hil_server.hpp"
#include "cadlab/record.hpp"

namespace fs = std::filesystem;
using namespace cadlab;

namespace {

constexpr int kOk = 0;
constexpr int kRuntimeFailure = 1;
constexpr int kUsageError = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::shared_ptr<const sim::TrackSpec> load_track_for(const cli::ExperimentConfig& cfg) {
  try {
    return std::make_shared<const sim::TrackSpec>(sim::load_track_file(cfg.track_path.string()));
  } catch (const sim::TrackError& e) {
    throw cli::ConfigError(std::string("track: ") + e.what());
  }
}

void echo_config(const cli::ExperimentConfig& cfg, const fs::path& dir) {
  const fs::path path = dir / "config.json";
  if (fs::exists(path)) return;
  std::ofstream out(path);
  out << cfg.document.dump(2) << "\n";
}

nn::Policy<float> load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError("checkpoint not found: " + path.string());
  return nn::load_policy<float>(path.string());
}

struct TrainArgs {
  std::string config;
  bool all = false;
  int stage = 0;
  std::string run_dir;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  const cli::ExperimentConfig cfg = cli::load_experiment(a.config);
  const auto track = load_track_for(cfg);
  std::vector<int> stages;
  if (a.all) {
    stages = {1, 2, 3, 4};
  } else {
    stages = {a.stage};
  }
  fs::path dir;
  if (!a.run_dir.empty()) {
    dir = a.run_dir;
    if (!fs::is_directory(dir)) throw UsageError("run directory does not exist: " + dir.string());
    for (int k : stages) {
      if (fs::exists(dir / ppo::checkpoint_name(k))) {
        throw UsageError("refusing to overwrite " + (dir / ppo::checkpoint_name(k)).string());
      }
    }
  }
  // Fail on missing prerequisites before creating any directory.
  if (dir.empty()) {
    for (int k : stages) {
      const ppo::StagePlan plan = ppo::stage_plan(k);
      for (auto need : {plan.init_from_stage, plan.partner_from_stage}) {
        if (need && std::find(stages.begin(), stages.end(), *need) == stages.end()) {
          throw ppo::PrerequisiteError("stage " + std::to_string(k) + " needs the stage " +
                                       std::to_string(*need) +
                                       " checkpoint; pass --run-dir with a directory holding " +
                                       ppo::checkpoint_name(*need));
        }
      }
    }
    dir = cli::fresh_output_dir(cfg.output_root, "train");
  }
  echo_config(cfg, dir);
  std::cout << "run directory: " << dir.string() << std::endl;
  int current_stage = stages.front();
  auto progress = [&](const ppo::UpdateReport& r) {
    if (a.quiet) return;
    std::cout << "stage " << current_stage << " update " << r.update << " steps " << r.steps
              << std::fixed << std::setprecision(3) << " loss " << r.stats.loss << " value "
              << r.stats.value_loss << " entropy " << r.stats.entropy << " kl " << r.stats.approx_kl;
    if (r.mean_return) std::cout << " mean_return " << *r.mean_return;
    std::cout << std::endl;
  };
  for (int k : stages) {
    current_stage = k;
    const std::vector<int> one{k};
    ppo::run_curriculum(cfg.curriculum, track, dir, one, progress);
    std::cout << "wrote " << (dir / ppo::checkpoint_name(k)).string() << std::endl;
  }
  return kOk;
}

struct EvalArgs {
  std::string config;
  std::string checkpoints;
  std::string mode = "solo";
  std::string topology = "bi";
  std::string agent = "blue";
  int laps = 0;
  std::optional<std::uint64_t> seed;
  bool save_records = false;
};

// Blue/red checkpoints used for each duel condition.
std::pair<int, int> duel_stages(env::Topology t) {
  switch (t) {
    case env::Topology::None: return {1, 2};
    case env::Topology::UniToRed: return {1, 3};
    case env::Topology::Bidirectional: return {4, 3};
  }
  return {1, 2};
}

void save_records(const std::vector<env::EpisodeRecord>& records, const fs::path& dir,
                  const std::string& stem) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    env::save_record(records[i], (dir / (stem + "_lap" + std::to_string(i + 1) + ".jsonl")).string());
  }
}

int cmd_eval(const EvalArgs& a) {
  const cli::ExperimentConfig cfg = cli::load_experiment(a.config);
  const auto track = load_track_for(cfg);
  const fs::path ckpt_dir = a.checkpoints;
  eval::EvalOptions opt;
  opt.env = cfg.curriculum.env;
  opt.seed = a.seed.value_or(cfg.eval.seed);

  std::vector<eval::LapTable> tables;
  std::vector<std::vector<env::EpisodeRecord>> records;
  std::vector<std::string> stems;
  if (a.mode == "solo") {
    const ppo::Agent agent = a.agent == "red" ? ppo::Agent::Red : ppo::Agent::Blue;
    const int stage = agent == ppo::Agent::Blue ? 1 : 2;
    const auto policy = load_checkpoint(ckpt_dir / ppo::checkpoint_name(stage));
    opt.laps = a.laps > 0 ? a.laps : cfg.eval.solo_laps;
    opt.experiment = std::string("solo_") + ppo::agent_name(agent);
    records.emplace_back();
    tables.push_back(eval::run_solo_eval(policy, agent, track, opt, a.save_records ? &records.back() : nullptr));
    stems.push_back(opt.experiment + "_stage" + std::to_string(stage) + "_" + std::to_string(opt.seed));
  } else {
    std::vector<env::Topology> topologies;
    if (a.topology == "all") {
      topologies = {env::Topology::None, env::Topology::UniToRed, env::Topology::Bidirectional};
    } else {
      topologies = {env::parse_topology(a.topology)};
    }
    opt.laps = a.laps > 0 ? a.laps : cfg.eval.duel_laps;
    for (auto t : topologies) {
      const auto [b, r] = duel_stages(t);
      const auto blue = load_checkpoint(ckpt_dir / ppo::checkpoint_name(b));
      const auto red = load_checkpoint(ckpt_dir / ppo::checkpoint_name(r));
      opt.experiment = std::string("duel_") + env::topology_name(t);
      records.emplace_back();
      tables.push_back(eval::run_duel_eval(blue, red, t, track, opt, a.save_records ? &records.back() : nullptr));
      const int stage = t == env::Topology::None ? 2 : t == env::Topology::UniToRed ? 3 : 4;
      stems.push_back(opt.experiment + "_stage" + std::to_string(stage) + "_" + std::to_string(opt.seed));
    }
  }

  const fs::path dir = cli::fresh_output_dir(cfg.output_root, "eval_" + a.mode);
  echo_config(cfg, dir);
  for (std::size_t i = 0; i < tables.size(); ++i) {
    eval::write_lap_table(tables[i], (dir / (stems[i] + ".csv")).string(),
                          (dir / (stems[i] + ".txt")).string());
    if (a.save_records) save_records(records[i], dir, stems[i]);
    std::cout << eval::lap_table_text(tables[i]) << "\n";
  }
  const eval::Summary summary = eval::summarize(tables);
  std::ofstream(dir / "summary.csv") << eval::summary_csv(summary);
  std::cout << eval::summary_text(summary);
  for (const auto& t : tables) {
    std::cout << t.experiment << " accident %: " << std::fixed << std::setprecision(1)
              << t.accident_pct() << "\n";
  }
  std::cout << "output: " << dir.string() << std::endl;
  return kOk;
}

struct ReplayArgs {
  std::string record;
  std::string export_path;
};

int cmd_replay(const ReplayArgs& a) {
  const env::EpisodeRecord rec = env::load_record(a.record);
  const env::ReplayReport rep = env::replay(rec);
  if (!a.export_path.empty()) {
    eval::export_trajectory(rec, a.export_path);
    std::cout << "trajectory written to " << a.export_path << "\n";
  }
  if (rep.match) {
    std::cout << "MATCH (" << rep.steps_checked << " steps)" << std::endl;
    return kOk;
  }
  std::cout << "MISMATCH at step " << rep.first_mismatch_step.value_or(-1) << ": " << rep.detail
            << std::endl;
  return kRuntimeFailure;
}

struct ServeArgs {
  std::string config;
  std::string checkpoint;
  std::string archive_dir;
  std::optional<int> port;
};

int cmd_serve(const ServeArgs& a) {
  const cli::ExperimentConfig cfg = cli::load_experiment(a.config);
  const auto track = load_track_for(cfg);
  std::string ckpt = !a.checkpoint.empty() ? a.checkpoint : cfg.serve.checkpoint;
  if (ckpt.empty()) throw UsageError("serve needs an AV checkpoint (--checkpoint or serve.checkpoint)");
  const auto policy = std::make_shared<const nn::Policy<float>>(load_checkpoint(ckpt));

  hil::ServerOptions opt;
  opt.port = a.port.value_or(cfg.serve.port);
  opt.session.env = cfg.curriculum.env;
  opt.session.tick_hz = cfg.serve.tick_hz;
  opt.session.series_episodes = cfg.serve.series_episodes;
  opt.session.disconnect_timeout_s = cfg.serve.disconnect_timeout_s;
  opt.session.seed = cfg.seed;
  opt.archive_dir = a.archive_dir.empty() ? cli::fresh_output_dir(cfg.output_root, "serve") : fs::path(a.archive_dir);
  fs::create_directories(opt.archive_dir);

  opt.handle_signals = true;
  hil::Server server(track, policy, opt);
  const int port = server.start();
  std::cout << "listening on port " << port << std::endl;
  std::cout << "archive directory: " << opt.archive_dir.string() << std::endl;
  server.wait();
  std::cout << "server stopped; " << server.archived_count() << " session(s) archived" << std::endl;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cadlab: cooperative two-lane driving lab"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train curriculum stages");
  t->add_option("config", train.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  auto* all = t->add_flag("--all", train.all, "run stages 1 to 4");
  auto* stage = t->add_option("--stage", train.stage, "run one stage")->check(CLI::Range(1, 4));
  all->excludes(stage);
  t->add_option("--run-dir", train.run_dir, "existing run directory holding earlier stages");
  t->add_flag("--quiet", train.quiet, "suppress per-update progress");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate trained checkpoints");
  e->add_option("config", ev.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  e->add_option("--checkpoints", ev.checkpoints, "directory holding stage<k>.ckpt")->required();
  e->add_option("--mode", ev.mode, "solo or duel")->check(CLI::IsMember({"solo", "duel"}));
  e->add_option("--topology", ev.topology, "none, uni, bi or all (duel)")
      ->check(CLI::IsMember({"none", "uni", "bi", "all"}));
  e->add_option("--agent", ev.agent, "blue or red (solo)")->check(CLI::IsMember({"blue", "red"}));
  e->add_option("--laps", ev.laps, "number of laps")->check(CLI::PositiveNumber);
  e->add_option("--seed", ev.seed, "evaluation seed");
  e->add_flag("--records", ev.save_records, "also write one episode record per lap");

  ReplayArgs rp;
  auto* r = app.add_subcommand("replay", "re-simulate an episode record and verify it");
  r->add_option("record", rp.record, "episode record (.jsonl)")->required()->check(CLI::ExistingFile);
  r->add_option("--export-trajectory", rp.export_path, "write a trajectory CSV");

  ServeArgs sv;
  auto* s = app.add_subcommand("serve", "host live mixed-traffic sessions");
  s->add_option("config", sv.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  s->add_option("--checkpoint", sv.checkpoint, "AV policy checkpoint");
  s->add_option("--port", sv.port, "listen port, 0 for an ephemeral port")->check(CLI::Range(0, 65535));
  s->add_option("--archive-dir", sv.archive_dir, "where finished sessions are archived");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsageError;
  }
  if (t->parsed() && !train.all && train.stage == 0) {
    std::cerr << "train: pass --all or --stage k\n";
    return kUsageError;
  }

  try {
    if (t->parsed()) return cmd_train(train);
    if (e->parsed()) return cmd_eval(ev);
    if (r->parsed()) return cmd_replay(rp);
    if (s->parsed()) return cmd_serve(sv);
  } catch (const cli::ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kUsageError;
  } catch (const ppo::PrerequisiteError& err) {
    std::cerr << "missing prerequisite: " << err.what() << "\n";
    return kUsageError;
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsageError;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kRuntimeFailure;
  }
  return kOk;
}
