#include <cmath>
#include <fstream>
#include <sstream>

#include "cadlab/ppo.hpp"

namespace cadlab::ppo {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Nonzero seed derived from (base, a, b); zero is reserved for nominal starts.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  const std::uint64_t s = splitmix(splitmix(splitmix(base) ^ a) ^ b);
  return s == 0 ? 1 : s;
}

void load_column(nn::MatrixX<float>& m, Eigen::Index col, const env::Observation& obs) {
  for (int i = 0; i < env::kObsSize; ++i) m(i, col) = static_cast<float>(obs[static_cast<std::size_t>(i)]);
}

}  // namespace

RolloutWorkers::RolloutWorkers(std::shared_ptr<const sim::TrackSpec> track,
                               env::EnvConfig env_cfg, PPOConfig cfg, StagePlan plan)
    : track_(std::move(track)), env_cfg_(env_cfg), cfg_(std::move(cfg)), plan_(plan) {
  cfg_.validate();
  if (plan_.partner.has_value() == false && plan_.topology != env::Topology::None) {
    throw std::invalid_argument("a solo stage cannot use a sharing topology");
  }
  if (plan_.partner && *plan_.partner == plan_.trainable) {
    throw std::invalid_argument("partner must drive the other lane");
  }
  slots_.resize(static_cast<std::size_t>(cfg_.num_worlds));
  for (std::size_t w = 0; w < slots_.size(); ++w) {
    slots_[w].world = std::make_unique<env::World>(track_, env_cfg_);
    slots_[w].rng.seed(derive_seed(cfg_.seed, 0xac7, w));
  }
}

void RolloutWorkers::reset_slot(std::size_t w) {
  Slot& s = slots_[w];
  env::ResetSpec spec;
  spec.lanes.push_back(agent_lane(plan_.trainable));
  if (plan_.partner) spec.lanes.push_back(agent_lane(*plan_.partner));
  spec.topology = plan_.topology;
  spec.seed = derive_seed(cfg_.seed, 2 * w + 1, s.episodes);
  spec.layout_seed = derive_seed(cfg_.seed, 2 * w + 2, s.episodes);
  const auto obs = s.world->reset(spec);
  s.obs = obs[0];
  if (obs.size() > 1) s.partner_obs = obs[1];
  s.episodes += 1;
  s.needs_reset = false;
  s.episode_return = 0.0;
}

RolloutBuffer RolloutWorkers::collect(const nn::Policy<float>& policy,
                                      const nn::Policy<float>* partner) {
  if (plan_.partner.has_value() != (partner != nullptr)) {
    throw std::invalid_argument("partner policy must be given iff the stage has a partner");
  }
  const int nw = cfg_.num_worlds;
  const int h = cfg_.horizon;
  const auto n = static_cast<std::size_t>(nw) * static_cast<std::size_t>(h);
  const int na = policy.arch().actions;
  RolloutBuffer buf;
  buf.worlds = nw;
  buf.horizon = h;
  buf.observations.resize(env::kObsSize, static_cast<Eigen::Index>(n));
  buf.actions.resize(na, static_cast<Eigen::Index>(n));
  buf.log_probs.assign(n, 0.0);
  buf.rewards.assign(n, 0.0);
  buf.values.assign(n, 0.0);
  buf.dones.assign(n, 0);
  buf.bootstrap.assign(static_cast<std::size_t>(nw), 0.0);

  std::vector<double> log_std(static_cast<std::size_t>(na));
  for (int i = 0; i < na; ++i) log_std[i] = policy.log_std()[i];

  nn::MatrixX<float> obs(env::kObsSize, nw), partner_obs(env::kObsSize, nw);
  nn::ForwardTrace<float> trace, partner_trace;
  std::vector<double> mean(static_cast<std::size_t>(na));
  std::vector<sim::Control> controls;

  for (int t = 0; t < h; ++t) {
    for (int w = 0; w < nw; ++w) {
      Slot& s = slots_[static_cast<std::size_t>(w)];
      if (s.needs_reset) reset_slot(static_cast<std::size_t>(w));
      load_column(obs, w, s.obs);
      if (partner) load_column(partner_obs, w, s.partner_obs);
    }
    policy.forward(obs, trace);
    if (partner) partner->forward(partner_obs, partner_trace);

    for (int w = 0; w < nw; ++w) {
      Slot& s = slots_[static_cast<std::size_t>(w)];
      const auto idx = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) + static_cast<std::size_t>(t);
      const auto col = static_cast<Eigen::Index>(idx);
      for (int i = 0; i < na; ++i) mean[i] = trace.mean(i, w);
      const nn::ActionSample a = nn::sample_action(mean, log_std, s.rng);
      buf.observations.col(col) = obs.col(w);
      for (int i = 0; i < na; ++i) buf.actions(i, col) = static_cast<float>(a.raw[i]);
      buf.log_probs[idx] = a.log_prob;
      buf.values[idx] = trace.value(0, w);

      controls.assign(1, sim::Control{a.action[0], a.action[1]});
      if (partner) {
        controls.push_back({static_cast<double>(partner_trace.mean(0, w)),
                            static_cast<double>(partner_trace.mean(1, w))});
      }
      const auto out = s.world->step(controls);
      buf.rewards[idx] = out[0].reward * cfg_.reward_scale;
      s.episode_return += out[0].reward;
      s.obs = out[0].observation;
      if (partner) s.partner_obs = out[1].observation;
      if (out[0].done) {
        buf.dones[idx] = 1;
        buf.completed_returns.push_back(s.episode_return);
        s.needs_reset = true;
      }
    }
  }

  for (int w = 0; w < nw; ++w) load_column(obs, w, slots_[static_cast<std::size_t>(w)].obs);
  policy.forward(obs, trace);
  for (int w = 0; w < nw; ++w) {
    buf.bootstrap[static_cast<std::size_t>(w)] =
        slots_[static_cast<std::size_t>(w)].needs_reset ? 0.0 : static_cast<double>(trace.value(0, w));
  }
  steps_ += static_cast<std::int64_t>(n);
  return buf;
}

void write_curve_csv(const TrainingCurve& curve, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "step,mean_cum_reward\n";
  out.precision(17);
  for (const auto& p : curve) out << p.step << ',' << p.mean_cum_reward << '\n';
}

TrainingCurve read_curve_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::string line;
  std::getline(in, line);
  if (line != "step,mean_cum_reward") throw std::runtime_error("unexpected curve header in '" + path + "'");
  TrainingCurve curve;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::runtime_error("malformed curve row '" + line + "'");
    curve.push_back({std::stoll(line.substr(0, comma)), std::stod(line.substr(comma + 1))});
  }
  return curve;
}

StageResult train_stage(std::shared_ptr<const sim::TrackSpec> track, const env::EnvConfig& env_cfg,
                        const PPOConfig& cfg, const StagePlan& plan, nn::Policy<float> init,
                        const nn::Policy<float>* partner, const ProgressFn& progress) {
  cfg.validate();
  if (!(init.arch() == cfg.arch)) throw std::invalid_argument("initial policy shape differs from the config");
  RolloutWorkers workers(std::move(track), env_cfg, cfg, plan);
  StageResult result{std::move(init), {}};
  Adam adam(result.policy.size());
  std::mt19937_64 rng(derive_seed(cfg.seed, 0x5eed, static_cast<std::uint64_t>(plan.stage)));

  const std::int64_t per_update = static_cast<std::int64_t>(cfg.num_worlds) * cfg.horizon;
  const auto updates = static_cast<int>((cfg.total_steps + per_update - 1) / per_update);
  for (int u = 0; u < updates; ++u) {
    const double lr = cfg.lr_decay ? cfg.learning_rate * (1.0 - static_cast<double>(u) / updates)
                                   : cfg.learning_rate;
    const RolloutBuffer buf = workers.collect(result.policy, partner);
    UpdateReport report;
    report.update = u + 1;
    report.steps = workers.steps_collected();
    report.stats = ppo_update(result.policy, adam, buf, cfg, lr, rng);
    if (!buf.completed_returns.empty()) {
      double sum = 0.0;
      for (double r : buf.completed_returns) sum += r;
      report.mean_return = sum / static_cast<double>(buf.completed_returns.size());
      result.curve.push_back({report.steps, *report.mean_return});
    }
    if (progress) progress(report);
  }
  return result;
}

std::string checkpoint_name(int stage) { return "stage" + std::to_string(stage) + ".ckpt"; }

std::string curve_name(int stage) { return "stage" + std::to_string(stage) + "_curve.csv"; }

void run_curriculum(const CurriculumConfig& cfg, std::shared_ptr<const sim::TrackSpec> track,
                    const std::filesystem::path& out_dir, std::span<const int> stages,
                    const ProgressFn& progress) {
  if (!std::is_sorted(stages.begin(), stages.end()) ||
      std::adjacent_find(stages.begin(), stages.end()) != stages.end()) {
    throw std::invalid_argument("stages must be listed in increasing order");
  }
  auto check = [&](int stage, int needed, const char* role) {
    const auto path = out_dir / checkpoint_name(needed);
    const bool produced = std::find(stages.begin(), stages.end(), needed) != stages.end() &&
                          needed < stage;
    if (!produced && !std::filesystem::exists(path)) {
      throw PrerequisiteError("stage " + std::to_string(stage) + " needs the stage " +
                              std::to_string(needed) + " checkpoint (" + role + ") at " +
                              path.string());
    }
    return path;
  };
  for (int stage : stages) {
    const StagePlan plan = stage_plan(stage);
    if (plan.init_from_stage) check(stage, *plan.init_from_stage, "initial parameters");
    if (plan.partner_from_stage) check(stage, *plan.partner_from_stage, "frozen partner");
  }
  std::filesystem::create_directories(out_dir);
  auto require = [&](int stage, int needed, const char* role) {
    return nn::load_policy<float>(check(stage, needed, role).string());
  };
  for (int stage : stages) {
    const StagePlan plan = stage_plan(stage);
    const PPOConfig& pcfg = cfg.stages.at(static_cast<std::size_t>(stage - 1));
    nn::Policy<float> init(pcfg.arch);
    if (plan.init_from_stage) {
      init = require(stage, *plan.init_from_stage, "initial parameters");
    } else {
      init.init_orthogonal(pcfg.seed);
    }
    std::optional<nn::Policy<float>> partner;
    if (plan.partner_from_stage) partner = require(stage, *plan.partner_from_stage, "frozen partner");
    StageResult r = train_stage(track, cfg.env, pcfg, plan, std::move(init),
                                partner ? &*partner : nullptr, progress);
    nn::save_policy(r.policy, (out_dir / checkpoint_name(stage)).string());
    write_curve_csv(r.curve, (out_dir / curve_name(stage)).string());
  }
}

}  // namespace cadlab::ppo
