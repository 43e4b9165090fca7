#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cadlab/eval.hpp"
#include "cadlab/experiment.hpp"
#include "cadlab/hil_session.hpp"
#include "cadlab/ppo.hpp"
#include "cadlab/record.hpp"
#include "cadlab/sensing.hpp"

namespace fs = std::filesystem;
using namespace cadlab;
using nlohmann::json;
using sim::Control;
using sim::Lane;
using sim::Vec2;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int precision = 2) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

// Trained checkpoints shared by P5 to P8, cached under the artifacts directory.
class Artifacts {
 public:
  Artifacts(cli::ExperimentConfig cfg, fs::path root, bool reuse)
      : cfg_(std::move(cfg)), root_(std::move(root)) {
    track_ = std::make_shared<const sim::TrackSpec>(sim::load_track_file(cfg_.track_path.string()));
    const std::string stamp = cfg_.document.dump();
    for (const fs::path& dir : {main_dir(), ablation_dir()}) {
      const fs::path stamp_file = dir / "config.json";
      if (!reuse || !fs::exists(stamp_file) || read_bytes(stamp_file) != stamp) {
        fs::remove_all(dir);
        fs::create_directories(dir);
        std::ofstream(stamp_file, std::ios::binary) << stamp;
      }
    }
  }

  const cli::ExperimentConfig& config() const { return cfg_; }
  const std::shared_ptr<const sim::TrackSpec>& track() const { return track_; }
  fs::path main_dir() const { return root_ / "main"; }
  fs::path ablation_dir() const { return root_ / "ablation"; }
  fs::path work_dir(const std::string& name) const {
    const fs::path p = root_ / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }

  nn::Policy<float> stage(int k) {
    for (int need = 1; need <= k; ++need) ensure(main_dir(), cfg_.curriculum, need);
    return nn::load_policy<float>((main_dir() / ppo::checkpoint_name(k)).string());
  }

  // Stage 4 retrained without the caring signal from the same stage 1-3
  // checkpoints and seeds.
  nn::Policy<float> ablated_stage4() {
    for (int k = 1; k <= 3; ++k) {
      stage(k);
      const fs::path dst = ablation_dir() / ppo::checkpoint_name(k);
      if (!fs::exists(dst)) fs::copy_file(main_dir() / ppo::checkpoint_name(k), dst);
    }
    ppo::CurriculumConfig cc = cfg_.curriculum;
    cc.env.rewards.caring = 0.0;
    ensure(ablation_dir(), cc, 4);
    return nn::load_policy<float>((ablation_dir() / ppo::checkpoint_name(4)).string());
  }

  double training_seconds(int k) const {
    auto it = train_time_.find(k);
    return it == train_time_.end() ? -1.0 : it->second;
  }

 private:
  void ensure(const fs::path& dir, const ppo::CurriculumConfig& cc, int k) {
    if (fs::exists(dir / ppo::checkpoint_name(k))) return;
    std::cerr << "training stage " << k << " into " << dir.string() << " ("
              << cc.stages[static_cast<std::size_t>(k - 1)].total_steps << " steps)" << std::endl;
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<int> one{k};
    int last_report = 0;
    ppo::run_curriculum(cc, track_, dir, one, [&](const ppo::UpdateReport& r) {
      if (r.update - last_report >= 25 && r.mean_return) {
        last_report = r.update;
        std::cerr << "  stage " << k << " update " << r.update << " steps " << r.steps
                  << " mean_return " << fmt(*r.mean_return) << std::endl;
      }
    });
    if (dir == main_dir()) train_time_[k] = elapsed_s(t0);
  }

  cli::ExperimentConfig cfg_;
  fs::path root_;
  std::shared_ptr<const sim::TrackSpec> track_;
  std::map<int, double> train_time_;
};

// P1 ------------------------------------------------------------------------

Verdict p1_determinism(const Artifacts& art) {
  const auto& cfg = art.config();
  ppo::CurriculumConfig cc = cfg.curriculum;
  for (auto& s : cc.stages) {
    s.horizon = 128;
    s.minibatch = std::min(s.minibatch, 256);
    s.total_steps = 2LL * s.num_worlds * s.horizon;
  }
  const fs::path work = art.work_dir("p1");
  const std::vector<int> all{1, 2, 3, 4};
  ppo::run_curriculum(cc, art.track(), work / "a", all);
  ppo::run_curriculum(cc, art.track(), work / "b", all);
  int identical_files = 0;
  for (int k = 1; k <= 4; ++k) {
    for (const std::string& name : {ppo::checkpoint_name(k), ppo::curve_name(k)}) {
      if (read_bytes(work / "a" / name) != read_bytes(work / "b" / name)) {
        return {false, name + " differs between identical runs"};
      }
      ++identical_files;
    }
  }

  const auto blue = nn::load_policy<float>((work / "a" / ppo::checkpoint_name(4)).string());
  const auto red = nn::load_policy<float>((work / "a" / ppo::checkpoint_name(3)).string());
  eval::EvalOptions opt;
  opt.env = cc.env;
  opt.laps = 2;
  opt.seed = cfg.eval.seed;
  int records = 0;
  for (auto topology : {env::Topology::None, env::Topology::UniToRed, env::Topology::Bidirectional}) {
    std::vector<env::EpisodeRecord> ra, rb;
    eval::run_duel_eval(blue, red, topology, art.track(), opt, &ra);
    eval::run_duel_eval(blue, red, topology, art.track(), opt, &rb);
    for (std::size_t i = 0; i < ra.size(); ++i) {
      if (env::to_jsonl(ra[i]) != env::to_jsonl(rb[i])) {
        return {false, std::string("episode record differs under ") + env::topology_name(topology)};
      }
      ++records;
    }
  }
  return {true, std::to_string(identical_files) + " checkpoint/curve files and " + std::to_string(records) +
                    " episode records byte-identical across reruns"};
}

// P2 ------------------------------------------------------------------------

// Ray o + t d against segment a + u (b - a), solved with 2D cross products.
double oracle_ray(Vec2 o, double angle, const std::vector<sim::Segment>& segs, double range) {
  const Vec2 d{std::cos(angle), std::sin(angle)};
  auto cross = [](Vec2 p, Vec2 q) { return p.x * q.y - p.y * q.x; };
  double best = range;
  for (const auto& s : segs) {
    const Vec2 e{s.b.x - s.a.x, s.b.y - s.a.y};
    const double denom = cross(d, e);
    if (denom == 0.0) continue;
    const Vec2 w{s.a.x - o.x, s.a.y - o.y};
    const double t = cross(w, e) / denom;
    const double u = cross(w, d) / denom;
    if (t >= 0.0 && u >= 0.0 && u <= 1.0 && t < best) best = t;
  }
  return best;
}

Verdict p2_raycast(const Artifacts& art) {
  std::mt19937_64 rng(20240611);
  std::uniform_real_distribution<double> u(-60.0, 60.0), ang(-3.14159, 3.14159), ext(0.3, 3.0), unit(0.0, 1.0);
  const sim::TrackSpec& track = *art.track();
  std::vector<sim::Segment> track_segments;
  for (const auto& border : track.borders) {
    for (std::size_t i = 1; i < border.size(); ++i) track_segments.push_back({border[i - 1], border[i]});
  }
  double worst = 0.0;
  int rays = 0, hits = 0;
  for (int scene = 0; scene < 1000; ++scene) {
    const bool on_track = scene % 2 == 1;
    std::vector<sim::Segment> segs;
    sim::SegmentIndex own_index;
    const sim::SegmentIndex* statics = &track.border_index;
    sim::Pose pose;
    if (on_track) {
      segs = track_segments;
      pose = track.pose_at(unit(rng) * track.total_length, (2.0 * unit(rng) - 1.0) * track.lane_width * 0.9);
      pose.heading += 0.6 * ang(rng);
    } else {
      const int n = 5 + static_cast<int>(unit(rng) * 60);
      for (int i = 0; i < n; ++i) segs.push_back({{u(rng), u(rng)}, {u(rng), u(rng)}});
      own_index = sim::SegmentIndex(segs, 10.0);
      statics = &own_index;
      pose = {{u(rng) / 4, u(rng) / 4}, ang(rng)};
    }
    std::vector<sim::Box> boxes;
    const int nb = static_cast<int>(unit(rng) * 5);
    for (int i = 0; i < nb; ++i) {
      const double r = 3.0 + unit(rng) * 30.0, a = ang(rng);
      boxes.push_back({{pose.position.x + r * std::cos(a), pose.position.y + r * std::sin(a)}, {ext(rng), ext(rng)}, ang(rng)});
    }
    std::vector<sim::Segment> all = segs;
    for (const auto& b : boxes) {
      for (const auto& e : b.edges()) all.push_back(e);
    }
    const auto d = sim::cast_rays(pose, sim::RayScene{statics, boxes});
    for (int k = 0; k < sim::kRayCount; ++k) {
      const double expect = oracle_ray(pose.position, pose.heading + sim::ray_angle(k), all, sim::kRayRange);
      worst = std::max(worst, std::abs(d[static_cast<std::size_t>(k)] - expect));
      ++rays;
      hits += expect < sim::kRayRange ? 1 : 0;
    }
  }
  const bool pass = worst <= 1e-9;
  std::ostringstream s;
  s << "1000 scenes, " << rays << " rays (" << hits << " hits), max |error| " << std::scientific << std::setprecision(2) << worst
    << " m (tolerance 1e-9)";
  return {pass, s.str()};
}

// P3 ------------------------------------------------------------------------

// Reward values written out by hand, independent of RewardTable defaults.
double table_value(env::RewardKind k) {
  switch (k) {
    case env::RewardKind::TimeTick: return -0.1;  // -1 per second at 10 Hz
    case env::RewardKind::SubjectedCheckpoint: return 1.0;
    case env::RewardKind::OtherLaneCheckpoint: return -2.0;
    case env::RewardKind::FinishLine: return 100.0;
    case env::RewardKind::HitObstacle: return -5.0;
    case env::RewardKind::Crash: return -10.0;
    case env::RewardKind::SmoothTick: return 0.1;
    case env::RewardKind::Caring: return 100.0;
  }
  return std::nan("");
}

json straight_doc(double length, const std::vector<std::array<double, 2>>& obstacles) {
  json doc;
  doc["format_version"] = 1;
  doc["name"] = "straight";
  doc["lane_width"] = 3.5;
  doc["start_s"] = 5.0;
  doc["start_line"] = {{10.0, -3.5}, {10.0, 3.5}};
  doc["finish_line"] = {{length - 5.0, -3.5}, {length - 5.0, 3.5}};
  doc["checkpoint_spacing"] = 5.0;
  json pts = json::array();
  for (int i = 0; i <= static_cast<int>(length); ++i) pts.push_back({static_cast<double>(i), 0.0});
  doc["centerline"] = pts;
  json obs = json::array();
  for (const auto& o : obstacles) obs.push_back({{"center", {o[0], o[1]}}, {"half_extents", {1.0, 0.75}}});
  doc["obstacles"] = obs;
  return doc;
}

struct Script {
  std::string name;
  std::shared_ptr<const sim::TrackSpec> track;
  std::vector<Lane> lanes{Lane::Right};
  env::Topology topology = env::Topology::None;
  double t_max = 30.0;
  bool caring_off = false;
  std::function<Control(int agent, int step)> control;
  std::array<int, 2> expect_caring{-1, -1};   // -1: not checked
  std::array<int, 2> expect_finish{-1, -1};   // 1 finished, 0 not, -1 not checked
  bool gate_oracle = false;                   // straight run without crash or lane change
  bool expect_crash = false;
  bool expect_obstacle = false;
  bool expect_other_lane = false;
};

std::vector<Script> p3_scripts(const std::shared_ptr<const sim::TrackSpec>& reference) {
  auto straight = std::make_shared<const sim::TrackSpec>(sim::load_track(straight_doc(150.0, {}).dump()));
  auto blocked = std::make_shared<const sim::TrackSpec>(
      sim::load_track(straight_doc(150.0, {{{60.0, -1.75}}}).dump()));
  auto constant = [](double steer, double throttle) {
    return [=](int, int) { return Control{steer, throttle}; };
  };
  std::vector<Script> v;
  auto add = [&](Script s) { v.push_back(std::move(s)); };

  add({.name = "full throttle", .track = straight, .control = constant(0.0, 1.0), .expect_finish = {1, -1}, .gate_oracle = true});
  add({.name = "half throttle", .track = straight, .control = constant(0.0, 0.5), .expect_finish = {1, -1}, .gate_oracle = true});
  add({.name = "throttle pulses", .track = straight,
       .control = [](int, int t) { return Control{0.0, (t / 10) % 2 == 0 ? 1.0 : 0.0}; },
       .expect_finish = {1, -1}, .gate_oracle = true});
  add({.name = "gentle weave", .track = straight,
       .control = [](int, int t) { return Control{0.03 * std::sin(t * 0.3), 0.8}; },
       .expect_finish = {1, -1}, .gate_oracle = true});
  add({.name = "steer ramp under threshold", .track = straight,
       .control = [](int, int t) { return Control{std::min(0.09 * (t % 3), 0.18) - 0.09, 0.9}; }});
  add({.name = "zigzag over threshold", .track = straight,
       .control = [](int, int t) { return Control{t % 2 == 0 ? 0.25 : -0.25, 0.6}; }});
  add({.name = "hard right into the border", .track = straight, .t_max = 15.0,
       .control = constant(1.0, 1.0), .expect_finish = {0, -1}, .expect_crash = true});
  add({.name = "hard left across both lanes", .track = straight, .t_max = 15.0,
       .control = constant(-0.6, 1.0), .expect_crash = true});
  add({.name = "lane change into the left lane", .track = straight,
       .control = [](int, int t) { return Control{t >= 20 && t < 30 ? -0.2 : (t >= 30 && t < 40 ? 0.2 : 0.0), 0.7}; },
       .expect_other_lane = true});
  add({.name = "idle until timeout", .track = straight, .t_max = 8.0, .control = constant(0.0, 0.0),
       .expect_finish = {0, -1}});
  add({.name = "full brake", .track = straight, .t_max = 8.0, .control = constant(0.0, -1.0),
       .expect_finish = {0, -1}});
  add({.name = "straight into an obstacle", .track = blocked, .t_max = 20.0, .control = constant(0.0, 1.0),
       .expect_obstacle = true});
  add({.name = "random controls on the reference track", .track = reference, .t_max = 40.0,
       .control = [](int, int t) {
         std::mt19937_64 r(static_cast<std::uint64_t>(t) * 7919 + 1);
         std::uniform_real_distribution<double> u(-1.0, 1.0);
         return Control{u(r), 0.5 + 0.5 * u(r)};
       }});
  add({.name = "duo: both finish together (bidirectional)", .track = straight, .lanes = {Lane::Right, Lane::Left},
       .topology = env::Topology::Bidirectional, .control = constant(0.0, 1.0), .expect_caring = {1, 1},
       .expect_finish = {1, 1}, .gate_oracle = true});
  add({.name = "duo: blue first, red cares (bidirectional)", .track = straight, .lanes = {Lane::Right, Lane::Left},
       .topology = env::Topology::Bidirectional,
       .control = [](int a, int) { return Control{0.0, a == 0 ? 1.0 : 0.4}; }, .expect_caring = {0, 1},
       .expect_finish = {1, 1}, .gate_oracle = true});
  add({.name = "duo: red first, blue does not receive (uni)", .track = straight, .lanes = {Lane::Right, Lane::Left},
       .topology = env::Topology::UniToRed,
       .control = [](int a, int) { return Control{0.0, a == 1 ? 1.0 : 0.4}; }, .expect_caring = {0, 0},
       .expect_finish = {1, 1}, .gate_oracle = true});
  add({.name = "duo: blue first, red receives (uni)", .track = straight, .lanes = {Lane::Right, Lane::Left},
       .topology = env::Topology::UniToRed,
       .control = [](int a, int) { return Control{0.0, a == 0 ? 1.0 : 0.4}; }, .expect_caring = {0, 1},
       .expect_finish = {1, 1}, .gate_oracle = true});
  add({.name = "duo: no sharing, no caring", .track = straight, .lanes = {Lane::Right, Lane::Left},
       .topology = env::Topology::None, .control = [](int a, int) { return Control{0.0, a == 0 ? 1.0 : 0.4}; },
       .expect_caring = {0, 0}, .expect_finish = {1, 1}, .gate_oracle = true});
  add({.name = "duo: caring ablated", .track = straight, .lanes = {Lane::Right, Lane::Left},
       .topology = env::Topology::Bidirectional, .caring_off = true,
       .control = [](int a, int) { return Control{0.0, a == 0 ? 1.0 : 0.4}; }, .expect_caring = {0, 0},
       .expect_finish = {1, 1}, .gate_oracle = true});
  add({.name = "duo: red swerves into blue", .track = straight, .lanes = {Lane::Right, Lane::Left},
       .topology = env::Topology::Bidirectional, .t_max = 15.0,
       .control = [](int a, int t) { return Control{a == 1 && t >= 8 && t < 14 ? 0.5 : 0.0, 0.8}; },
       .expect_crash = true});
  return v;
}

std::string check_script(const Script& sc) {
  env::EnvConfig cfg;
  cfg.t_max = sc.t_max;
  if (sc.caring_off) cfg.rewards.caring = 0.0;
  env::World w(sc.track, cfg);
  env::EpisodeRecord rec;
  w.set_recorder(&rec);
  w.reset({sc.lanes, sc.topology, 0, 0});
  const std::size_t n = sc.lanes.size();
  std::vector<double> returned(n, 0.0), hand(n, 0.0);
  std::vector<std::map<env::RewardKind, int>> counts(n);
  std::vector<int> active(n, 0), smooth_oracle(n, 0);
  std::vector<Control> prev(n);
  const double x0 = w.agent(0).state.position.x;
  std::vector<int> crash_steps(n, 0);
  for (int t = 0; !w.terminated(); ++t) {
    std::vector<Control> c(n);
    for (std::size_t i = 0; i < n; ++i) c[i] = sc.control(static_cast<int>(i), t).clamped();
    const auto out = w.step(c);
    for (std::size_t i = 0; i < n; ++i) {
      if (!out[i].was_active) continue;
      ++active[i];
      if (std::abs(c[i].steer - prev[i].steer) <= 0.1) ++smooth_oracle[i];
      prev[i] = c[i];
      returned[i] += out[i].reward;
      for (const auto& e : out[i].events) {
        if (e.value != table_value(e.kind)) {
          return std::string("event ") + env::reward_kind_name(e.kind) + " carries " + std::to_string(e.value);
        }
        hand[i] += table_value(e.kind);
        counts[i][e.kind] += 1;
      }
      if (!out[i].collisions.empty()) ++crash_steps[i];
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const env::AgentStatus& a = w.agent(static_cast<int>(i));
    const std::string who = "agent " + std::to_string(i) + ": ";
    if (std::abs(returned[i] - hand[i]) > 1e-9) {
      return who + "reward sum " + std::to_string(returned[i]) + " != hand sum " + std::to_string(hand[i]);
    }
    if (std::abs(a.total_reward - hand[i]) > 1e-9) return who + "total_reward disagrees with the event sum";
    if (std::abs(env::cumulative_reward(rec, static_cast<int>(i)) - hand[i]) > 1e-9) {
      return who + "record event sum disagrees";
    }
    auto count = [&](env::RewardKind k) { return counts[i].count(k) ? counts[i].at(k) : 0; };
    if (count(env::RewardKind::TimeTick) != active[i]) return who + "TimeTick count != active steps";
    if (a.finished && std::abs(-0.1 * count(env::RewardKind::TimeTick) + a.finish_time) > 1e-9) {
      return who + "sum of TimeTick != -lap_time";
    }
    if (count(env::RewardKind::SmoothTick) != smooth_oracle[i]) {
      return who + "SmoothTick count " + std::to_string(count(env::RewardKind::SmoothTick)) + " != " +
             std::to_string(smooth_oracle[i]);
    }
    if (count(env::RewardKind::Crash) + count(env::RewardKind::HitObstacle) != a.state.crash_count) {
      return who + "crash events != respawn count";
    }
    if (count(env::RewardKind::FinishLine) != (a.finished ? 1 : 0)) return who + "FinishLine count wrong";
    if (sc.expect_finish[i] >= 0 && a.finished != (sc.expect_finish[i] == 1)) return who + "finish expectation";
    if (sc.expect_caring[i] >= 0 && count(env::RewardKind::Caring) != sc.expect_caring[i]) {
      return who + "Caring count " + std::to_string(count(env::RewardKind::Caring));
    }
    if (sc.gate_oracle) {
      const auto& gates = sc.track->checkpoints[sim::lane_index(sc.lanes[i])];
      const double x1 = a.state.position.x;
      int expect = 0;
      for (const auto& g : gates) expect += g.s > x0 && g.s <= x1 ? 1 : 0;
      if (count(env::RewardKind::SubjectedCheckpoint) != expect) {
        return who + "gates " + std::to_string(count(env::RewardKind::SubjectedCheckpoint)) + " != geometric " +
               std::to_string(expect);
      }
    }
  }
  auto any = [&](env::RewardKind k) {
    for (const auto& c : counts) {
      if (c.count(k)) return true;
    }
    return false;
  };
  if (sc.expect_crash && !any(env::RewardKind::Crash)) return "expected a crash";
  if (sc.expect_obstacle && !any(env::RewardKind::HitObstacle)) return "expected an obstacle hit";
  if (sc.expect_other_lane && !any(env::RewardKind::OtherLaneCheckpoint)) return "expected an other-lane gate";
  return "";
}

Verdict p3_rewards(const Artifacts& art) {
  const auto scripts = p3_scripts(art.track());
  int ok = 0;
  std::string failures;
  for (const auto& sc : scripts) {
    const std::string err = check_script(sc);
    if (err.empty()) {
      ++ok;
    } else {
      failures += " [" + sc.name + ": " + err + "]";
    }
  }
  return {ok == static_cast<int>(scripts.size()),
          std::to_string(ok) + "/" + std::to_string(scripts.size()) + " scripted sequences match the hand event sum" + failures};
}

// P4 ------------------------------------------------------------------------

std::vector<double> gae_double_sum(const std::vector<double>& r, const std::vector<double>& v,
                                   const std::vector<std::uint8_t>& d, double boot, double g, double l) {
  const std::size_t n = r.size();
  std::vector<double> a(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    double w = 1.0;
    for (std::size_t k = t; k < n; ++k) {
      const double next = k + 1 < n ? v[k + 1] : boot;
      a[t] += w * (r[k] + g * next * (d[k] ? 0.0 : 1.0) - v[k]);
      if (d[k]) break;
      w *= g * l;
    }
  }
  return a;
}

Verdict p4_gae_and_gradient() {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-3, 3), p(0, 1);
  std::uniform_int_distribution<int> len(1, 64);
  double worst_gae = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = len(rng);
    std::vector<double> r(n), v(n);
    std::vector<std::uint8_t> d(n);
    for (int i = 0; i < n; ++i) {
      r[i] = u(rng);
      v[i] = u(rng);
      d[i] = p(rng) < 0.1;
    }
    const double boot = u(rng), gamma = 0.9 + 0.1 * p(rng), lambda = p(rng);
    const auto g = ppo::compute_gae(r, v, d, boot, gamma, lambda);
    const auto o = gae_double_sum(r, v, d, boot, gamma, lambda);
    for (int i = 0; i < n; ++i) worst_gae = std::max(worst_gae, std::abs(g.advantages[i] - o[i]));
  }

  nn::Architecture arch;
  arch.hidden = {4, 4};
  nn::Policy<float> pol(arch);
  std::uniform_real_distribution<double> w(-0.5, 0.5);
  for (Eigen::Index i = 0; i < pol.size(); ++i) pol.params()[i] = static_cast<float>(w(rng));
  pol.log_std().setConstant(-0.5f);
  ppo::LossBatch<float> b;
  const int n = 16;
  b.observations.resize(37, n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < 37; ++i) b.observations(i, j) = static_cast<float>(w(rng) * 2);
  }
  nn::ForwardTrace<float> t;
  pol.forward(b.observations, t);
  b.actions.resize(2, n);
  const std::vector<double> ls{pol.log_std()[0], pol.log_std()[1]};
  for (int j = 0; j < n; ++j) {
    const std::vector<double> mean{t.mean(0, j), t.mean(1, j)};
    for (int i = 0; i < 2; ++i) b.actions(i, j) = static_cast<float>(mean[static_cast<std::size_t>(i)] + 0.4 * w(rng));
    const std::vector<double> act{b.actions(0, j), b.actions(1, j)};
    b.old_log_probs.push_back(nn::gaussian_log_prob(mean, ls, act) + 0.05 * w(rng));
    b.advantages.push_back(2 * w(rng));
    b.returns.push_back(4 * w(rng));
  }
  ppo::normalize_advantages(b.advantages);
  const ppo::PPOConfig cfg;
  const auto res = ppo::ppo_loss(pol, b, cfg, true);
  double num = 0.0, den = 0.0;
  const double h = 1e-2;
  for (Eigen::Index i = 0; i < pol.size(); ++i) {
    auto q = pol;
    q.params()[i] = static_cast<float>(pol.params()[i] + h);
    const double up = ppo::ppo_loss(q, b, cfg, false).stats.loss;
    q.params()[i] = static_cast<float>(pol.params()[i] - h);
    const double down = ppo::ppo_loss(q, b, cfg, false).stats.loss;
    const double fd = (up - down) / (2 * h);
    num += (res.grad[i] - fd) * (res.grad[i] - fd);
    den += fd * fd;
  }
  const double rel = std::sqrt(num / den);
  std::ostringstream s;
  s << std::scientific << std::setprecision(2) << "GAE max |recursion - double sum| " << worst_gae
    << " over 1000 inputs (tol 1e-8); float32 FD relative error " << rel << " on " << pol.size()
    << " parameters (tol 1e-3)";
  return {worst_gae < 1e-8 && rel < 1e-3, s.str()};
}

// P5 to P7 ------------------------------------------------------------------

eval::EvalOptions eval_options(const cli::ExperimentConfig& cfg, int laps, const std::string& name) {
  eval::EvalOptions opt;
  opt.env = cfg.curriculum.env;
  opt.laps = laps;
  opt.seed = cfg.eval.seed;
  opt.experiment = name;
  return opt;
}

void write_table(const fs::path& dir, const eval::LapTable& t) {
  fs::create_directories(dir);
  eval::write_lap_table(t, (dir / (t.experiment + ".csv")).string(), (dir / (t.experiment + ".txt")).string());
}

Verdict p5_stage1(Artifacts& art, const fs::path& out) {
  const auto policy = art.stage(1);
  const auto& cfg = art.config();
  const eval::LapTable t = eval::run_solo_eval(policy, ppo::Agent::Blue, art.track(),
                                               eval_options(cfg, cfg.eval.solo_laps, "solo_blue_stage1"));
  write_table(out, t);
  const int clean = t.clean_finishes(0);
  const double cov = t.lap_time_cov(0);
  const int need = static_cast<int>(std::ceil(0.9 * t.laps.size()));
  std::ostringstream s;
  s << clean << "/" << t.laps.size() << " clean laps (need " << need << "), lap time " << fmt(t.mean_lap_time(0))
    << " +/- " << fmt(t.std_lap_time(0)) << " s, CoV " << fmt(100 * cov) << "% (need < 5%)";
  if (art.training_seconds(1) >= 0) s << ", stage-1 training " << fmt(art.training_seconds(1) / 60, 1) << " min";
  return {clean >= need && clean > 0 && cov < 0.05, s.str()};
}

Verdict p6_topology(Artifacts& art, const fs::path& out) {
  const auto& cfg = art.config();
  const int laps = std::max(20, cfg.eval.duel_laps);
  const auto s1 = art.stage(1), s2 = art.stage(2), s3 = art.stage(3), s4 = art.stage(4);
  const auto none = eval::run_duel_eval(s1, s2, env::Topology::None, art.track(), eval_options(cfg, laps, "duel_none"));
  const auto uni = eval::run_duel_eval(s1, s3, env::Topology::UniToRed, art.track(), eval_options(cfg, laps, "duel_uni"));
  const auto bi = eval::run_duel_eval(s4, s3, env::Topology::Bidirectional, art.track(), eval_options(cfg, laps, "duel_bi"));
  for (const auto* t : {&none, &uni, &bi}) write_table(out, *t);
  std::ofstream(out / "summary.csv") << eval::summary_csv(eval::summarize({none, uni, bi}));
  const double a = none.accident_pct(), b = uni.accident_pct(), c = bi.accident_pct();
  std::ostringstream s;
  s << "accident % over " << laps << " laps: none " << fmt(a, 1) << ", uni " << fmt(b, 1) << ", bi " << fmt(c, 1)
    << " (need none > uni >= bi, bi <= 10)";
  return {a > b && b >= c && c <= 10.0, s.str()};
}

Verdict p7_caring(Artifacts& art, const fs::path& out) {
  const auto& cfg = art.config();
  const int laps = std::max(20, cfg.eval.duel_laps);
  const auto s3 = art.stage(3), s4 = art.stage(4);
  const auto ablated = art.ablated_stage4();
  const auto base = eval::run_duel_eval(s4, s3, env::Topology::Bidirectional, art.track(),
                                        eval_options(cfg, laps, "duel_bi_caring"));
  const auto abl = eval::run_duel_eval(ablated, s3, env::Topology::Bidirectional, art.track(),
                                       eval_options(cfg, laps, "duel_bi_no_caring"));
  write_table(out, base);
  write_table(out, abl);
  std::ostringstream s;
  s << "vehicle-vehicle collisions over " << laps << " laps: with caring " << base.vehicle_collisions()
    << ", ablated " << abl.vehicle_collisions() << " (need ablated > with caring); accident % "
    << fmt(base.accident_pct(), 1) << " vs " << fmt(abl.accident_pct(), 1);
  return {abl.vehicle_collisions() > base.vehicle_collisions(), s.str()};
}

// P8 ------------------------------------------------------------------------

struct CommandResult {
  int exit_code = -1;
  std::string output;
};

CommandResult run_command(const std::string& cmd) {
  CommandResult r;
  FILE* pipe = popen((cmd + " 2>&1").c_str(), "r");
  if (pipe == nullptr) return r;
  std::array<char, 512> buf{};
  while (fgets(buf.data(), static_cast<int>(buf.size()), pipe) != nullptr) r.output += buf.data();
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

Verdict p8_replay(Artifacts& art, const std::string& cli_path) {
  const auto& cfg = art.config();
  const fs::path dir = art.work_dir("p8");
  auto av = std::make_shared<const nn::Policy<float>>(art.stage(3));
  const auto human = art.stage(1);
  hil::SessionConfig sc;
  sc.env = cfg.curriculum.env;
  sc.series_episodes = 3;
  sc.seed = cfg.seed;
  hil::Session session("acceptance", art.track(), av, sc);
  session.set_driver_level(eval::DriverLevel::Intermediate);
  session.start();
  // Scripted stand-in for a human: a trained lane keeper with steering wobble.
  std::int64_t seq = 0;
  while (session.phase() == hil::Phase::Running) {
    const auto& world = session.world();
    const env::Observation obs = world.observe(hil::Session::kHuman);
    Control c = eval::act_mean(human, obs);
    c.steer += 0.15 * std::sin(0.37 * static_cast<double>(seq));
    session.ingest_control({++seq, c.steer, c.throttle});
    session.tick();
  }
  std::ofstream(dir / "archive.json") << session.archive().dump() << "\n";
  int matched = 0;
  std::string problems;
  for (const auto& r : session.results()) {
    const fs::path path = dir / ("episode" + std::to_string(r.episode) + ".jsonl");
    env::save_record(r.record, path.string());
    const env::ReplayReport in_process = env::replay(env::load_record(path.string()));
    if (!in_process.match) {
      problems += " [episode " + std::to_string(r.episode) + " in-process: " + in_process.detail + "]";
      continue;
    }
    const CommandResult res = run_command("\"" + cli_path + "\" replay \"" + path.string() + "\"");
    if (res.exit_code == 0 && res.output.find("MATCH") == 0) {
      ++matched;
    } else {
      problems += " [episode " + std::to_string(r.episode) + ": exit " + std::to_string(res.exit_code) + " " + res.output + "]";
    }
  }
  // A single edited control must be reported at its tick.
  env::EpisodeRecord tampered = session.results().front().record;
  int active_steps = 0;
  for (const auto& st : tampered.steps) active_steps += st.events[0].empty() ? 0 : 1;
  const int edit = active_steps / 2;
  tampered.steps[static_cast<std::size_t>(edit)].controls[0].throttle =
      tampered.steps[static_cast<std::size_t>(edit)].controls[0].throttle > 0 ? -1.0 : 1.0;
  const fs::path bad = dir / "tampered.jsonl";
  env::save_record(tampered, bad.string());
  const CommandResult res = run_command("\"" + cli_path + "\" replay \"" + bad.string() + "\"");
  const bool caught = res.exit_code == 1 && res.output.find("MISMATCH at step " + std::to_string(edit)) != std::string::npos;
  if (!caught) problems += " [tampered record: exit " + std::to_string(res.exit_code) + " " + res.output + "]";
  const int total = static_cast<int>(session.results().size());
  return {matched == total && caught,
          std::to_string(matched) + "/" + std::to_string(total) +
              " archived session records replay MATCH in process and via the CLI; edited control " +
              (caught ? "reported at step " + std::to_string(edit) : "not caught") + problems};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cadlab acceptance suite"};
  std::string config_path = std::string(CADLAB_SOURCE_DIR) + "/configs/acceptance.json";
  std::string artifacts = "acceptance_artifacts";
  std::string cli_path = CADLAB_CLI_PATH;
  std::vector<std::string> only;
  bool reuse = false;
  app.add_option("--config", config_path, "experiment config")->check(CLI::ExistingFile);
  app.add_option("--artifacts", artifacts, "directory for checkpoints and tables");
  app.add_option("--only", only, "subset of criteria, e.g. --only P1,P4")->delimiter(',');
  app.add_flag("--reuse", reuse, "reuse checkpoints trained with an identical config");
  app.add_option("--cli", cli_path, "path to the cadlab executable");
  CLI11_PARSE(app, argc, argv);

  cli::ExperimentConfig cfg;
  try {
    cfg = cli::load_experiment(config_path);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
  const std::set<std::string> selected(only.begin(), only.end());
  auto wanted = [&](const std::string& id) { return selected.empty() || selected.count(id) > 0; };

  Artifacts art(cfg, fs::absolute(artifacts), reuse);
  const fs::path tables = fs::absolute(artifacts) / "tables";

  struct Criterion {
    std::string id, title;
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> criteria{
      {"P1", "determinism", [&] { return p1_determinism(art); }},
      {"P2", "raycast oracle", [&] { return p2_raycast(art); }},
      {"P3", "reward accounting", [&] { return p3_rewards(art); }},
      {"P4", "GAE and gradient oracles", [] { return p4_gae_and_gradient(); }},
      {"P5", "stage-1 capability", [&] { return p5_stage1(art, tables); }},
      {"P6", "topology trend", [&] { return p6_topology(art, tables); }},
      {"P7", "caring ablation", [&] { return p7_caring(art, tables); }},
      {"P8", "replay integrity", [&] { return p8_replay(art, cli_path); }},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!wanted(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failed += v.pass ? 0 : 1;
    std::cout << c.id << " " << (v.pass ? "PASS" : "FAIL") << " " << c.title << ": " << v.detail << " ("
              << fmt(elapsed_s(t0), 1) << " s)" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
