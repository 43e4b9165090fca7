#include <algorithm>
#include <memory>
#include <numeric>

#include "doctest.h"

#include "cadlab/record.hpp"
#include "cadlab/world.hpp"
#include "test_support.hpp"

using namespace cadlab;
using namespace cadlab::env;
using sim::Control;
using sim::Lane;

namespace {

std::shared_ptr<const sim::TrackSpec> straight() {
  return std::make_shared<const sim::TrackSpec>(test::straight_track());
}

bool has_event(const AgentStep& s, RewardKind k) {
  return std::any_of(s.events.begin(), s.events.end(), [k](const auto& e) { return e.kind == k; });
}

EpisodeRecord two_agent_record(bool finish_a, bool finish_b, int crashes, int vehicle_hits) {
  EpisodeRecord r;
  r.spec.lanes = {Lane::Right, Lane::Left};
  AgentOutcome a{Lane::Right, finish_a, 20.0, crashes, vehicle_hits, 0.0};
  AgentOutcome b{Lane::Left, finish_b, 21.0, 0, vehicle_hits, 0.0};
  r.outcomes = {a, b};
  return r;
}

}  // namespace

TEST_CASE("observation normalizes ego speed and leaves partner block empty") {
  sim::VehicleState ego;
  ego.speed = 40.0 / 3.6;
  const std::vector<double> rays(16, 25.0);
  const Observation o = build_observation(ego, rays, std::nullopt);
  CHECK(o[0] == 0.0);
  CHECK(o[1] == doctest::Approx(1.0));
  CHECK(o[2] == doctest::Approx(0.5));
  for (int i = kPartnerOffset; i < kObsSize; ++i) CHECK(o[i] == 0.0);
}

TEST_CASE("partner 10 m ahead maps to (0.2, 0) in the ego frame") {
  sim::VehicleState ego, partner;
  ego.position = {3.0, 4.0};
  ego.heading = 0.9;
  partner.position = ego.position + sim::unit_from_angle(0.9) * 10.0;
  partner.lane = Lane::Left;
  const std::vector<double> rays(16, 50.0);
  const Observation o = build_observation(ego, rays, SharedPerception{&partner, rays});
  CHECK(o[19] == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(o[20] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(o[21] == 1.0);
}

TEST_CASE("topology delivery rules") {
  CHECK_FALSE(receives_partner(Topology::None, Lane::Left));
  CHECK(receives_partner(Topology::UniToRed, Lane::Left));
  CHECK_FALSE(receives_partner(Topology::UniToRed, Lane::Right));
  CHECK(receives_partner(Topology::Bidirectional, Lane::Right));
  CHECK(parse_topology("bi") == Topology::Bidirectional);
  CHECK_THROWS(parse_topology("mesh"));
}

TEST_CASE("score_step hand accounting") {
  const RewardTable table;
  StepFacts quiet;
  CHECK(score_step(quiet, {}, {0.05, 1.0}, Lane::Right, 0.1, table).reward ==
        doctest::Approx(0.0).epsilon(1e-15));
  StepFacts gate;
  gate.gates.push_back({Lane::Right, 3});
  CHECK(score_step(gate, {}, {}, Lane::Right, 0.1, table).reward == doctest::Approx(1.0));
  CHECK(score_step(gate, {}, {}, Lane::Left, 0.1, table).reward == doctest::Approx(-2.0));
  CHECK(score_step(quiet, {}, {0.5, 0.0}, Lane::Right, 0.1, table).reward == doctest::Approx(-0.1));
}

TEST_CASE("ten-step episode totals 102 by event-log summation") {
  const RewardTable table;
  double total = 0.0;
  double oracle = 0.0;
  for (int k = 0; k < 10; ++k) {
    StepFacts f;
    if (k == 3 || k == 6) f.gates.push_back({Lane::Right, k});
    f.finished = k == 9;
    const ScoredStep s = score_step(f, {}, {}, Lane::Right, 0.1, table);
    total += s.reward;
    for (const auto& e : s.events) oracle += e.value;
  }
  CHECK(total == doctest::Approx(102.0));
  CHECK(oracle == doctest::Approx(102.0));
}

TEST_CASE("caring is omitted when ablated") {
  RewardTable table;
  table.caring = 0.0;
  StepFacts f;
  f.caring = true;
  const ScoredStep s = score_step(f, {}, {}, Lane::Left, 0.1, table);
  CHECK(std::none_of(s.events.begin(), s.events.end(),
                     [](const auto& e) { return e.kind == RewardKind::Caring; }));
}

TEST_CASE("solo reset: lane flag 0 and zero partner block") {
  World w(straight(), EnvConfig{});
  const auto obs = w.reset({{Lane::Right}, Topology::None, 0, 0});
  REQUIRE(obs.size() == 1);
  CHECK(obs[0][0] == 0.0);
  for (int i = kPartnerOffset; i < kObsSize; ++i) CHECK(obs[0][i] == 0.0);
}

TEST_CASE("bidirectional reset shares partner blocks both ways") {
  World w(straight(), EnvConfig{});
  const auto obs = w.reset({{Lane::Right, Lane::Left}, Topology::Bidirectional, 0, 0});
  for (const auto& o : obs) {
    CHECK(o[18] == 0.0);
    CHECK(std::abs(o[19]) + std::abs(o[20]) > 0.0);
  }
  CHECK(obs[1][0] == 1.0);
}

TEST_CASE("reset rejects bad agent layouts") {
  World w(straight(), EnvConfig{});
  CHECK_THROWS(w.reset({{}, Topology::None, 0, 0}));
  CHECK_THROWS(w.reset({{Lane::Left, Lane::Left}, Topology::None, 0, 0}));
}

TEST_CASE("same seed gives identical states and observations") {
  auto run = [] {
    World w(straight(), EnvConfig{});
    auto obs = w.reset({{Lane::Right, Lane::Left}, Topology::Bidirectional, 17, 0});
    const std::vector<Control> c{{0.1, 1.0}, {-0.05, 0.7}};
    for (int i = 0; i < 30; ++i) obs[0] = w.step(c)[0].observation;
    return std::make_pair(w.agent(0).state, obs[0]);
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("driving straight reaches the finish with +100 and done") {
  World w(straight(), EnvConfig{});
  w.reset({{Lane::Right}, Topology::None, 0, 0});
  const std::vector<Control> c{{0.0, 1.0}};
  AgentStep last;
  double total = 0.0;
  int checkpoints = 0;
  while (!w.terminated()) {
    last = w.step(c)[0];
    total += last.reward;
    checkpoints += static_cast<int>(std::count_if(
        last.events.begin(), last.events.end(),
        [](const auto& e) { return e.kind == RewardKind::SubjectedCheckpoint; }));
  }
  CHECK(has_event(last, RewardKind::FinishLine));
  CHECK(last.done);
  CHECK(w.agent(0).finished);
  CHECK(checkpoints == 38);
  CHECK(total == doctest::Approx(w.agent(0).total_reward));
}

TEST_CASE("touching the border costs -10 and respawns at the start pose") {
  World w(straight(), EnvConfig{});
  w.reset({{Lane::Right}, Topology::None, 0, 0});
  const sim::Pose start = w.agent(0).start;
  const std::vector<Control> c{{1.0, 1.0}};
  bool crashed = false;
  for (int i = 0; i < 100 && !crashed; ++i) {
    const AgentStep s = w.step(c)[0];
    if (has_event(s, RewardKind::Crash)) {
      crashed = true;
      // the remaining substeps of the decision step run after the respawn
      CHECK(sim::norm(w.agent(0).state.position - start.position) < 0.2);
      CHECK(w.agent(0).state.speed < 0.2);
      CHECK(w.agent(0).state.crash_count == 1);
      CHECK(w.agent(0).state.gates_fired[0].none());
      CHECK_FALSE(s.done);
    }
  }
  CHECK(crashed);
}

TEST_CASE("caring goes to the receiving partner when the other finishes") {
  for (Topology topo : {Topology::Bidirectional, Topology::UniToRed, Topology::None}) {
    World w(straight(), EnvConfig{});
    w.reset({{Lane::Right, Lane::Left}, topo, 0, 0});
    const std::vector<Control> c{{0.0, 1.0}, {0.0, 0.0}};
    bool cared = false;
    while (!w.agent(0).finished) {
      const auto out = w.step(c);
      cared = cared || has_event(out[1], RewardKind::Caring);
      CHECK_FALSE(has_event(out[0], RewardKind::Caring));
    }
    CHECK(cared == (topo != Topology::None));
  }
}

TEST_CASE("timeout ends the episode") {
  EnvConfig cfg;
  cfg.t_max = 2.0;
  World w(straight(), cfg);
  w.reset({{Lane::Right}, Topology::None, 0, 0});
  const std::vector<Control> c{{0.0, 0.0}};
  int steps = 0;
  while (!w.terminated()) {
    w.step(c);
    ++steps;
  }
  CHECK(steps == 20);
  CHECK(w.agent(0).timed_out);
  CHECK_THROWS(w.step(c));
}

TEST_CASE("classify_outcome rules") {
  CHECK(classify_outcome(two_agent_record(true, true, 0, 0)) == Cooperation::Successful);
  CHECK(classify_outcome(two_agent_record(true, true, 0, 1)) == Cooperation::Failed);
  CHECK(classify_outcome(two_agent_record(true, false, 0, 0)) == Cooperation::Failed);
  CHECK(classify_outcome(two_agent_record(true, true, 2, 0)) == Cooperation::Failed);
  EpisodeRecord solo;
  solo.spec.lanes = {Lane::Right};
  CHECK_THROWS_AS(classify_outcome(solo), RecordError);
}

TEST_CASE("winner is the faster finisher") {
  std::vector<AgentOutcome> o(2);
  o[0].finished = true;
  o[0].lap_time = 30.0;
  o[1].finished = true;
  o[1].lap_time = 29.0;
  CHECK(decide_winner(o) == 1);
  o[1].finished = false;
  CHECK(decide_winner(o) == 0);
  o[0].finished = false;
  CHECK_FALSE(decide_winner(o).has_value());
}

TEST_CASE("records round-trip through JSONL and replay bit-exactly") {
  World w(std::make_shared<const sim::TrackSpec>(
              sim::load_track_file(test::reference_track_path())),
          EnvConfig{});
  EpisodeRecord rec;
  w.set_recorder(&rec);
  w.reset({{Lane::Right, Lane::Left}, Topology::Bidirectional, 5, 3});
  for (int i = 0; i < 150 && !w.terminated(); ++i) {
    const std::vector<Control> c{{0.3 * std::sin(i * 0.1), 0.8}, {-0.2 * std::cos(i * 0.07), 0.6}};
    w.step(c);
  }
  const EpisodeRecord back = from_jsonl(to_jsonl(rec));
  REQUIRE(back.steps.size() == rec.steps.size());
  CHECK(back.spec.layout_seed == 3);
  CHECK(cumulative_reward(back, 0) == doctest::Approx(w.agent(0).total_reward));
  const ReplayReport rep = replay(back);
  CHECK(rep.match);
  CHECK(rep.steps_checked == static_cast<int>(rec.steps.size()));

  EpisodeRecord tampered = back;
  tampered.steps[40].controls[0].throttle = -1.0;
  const ReplayReport bad = replay(tampered);
  CHECK_FALSE(bad.match);
  CHECK(bad.first_mismatch_step == 40);
}

TEST_CASE("corrupt records are rejected") {
  CHECK_THROWS_AS(from_jsonl("{\"record\":\"step\"}\n"), RecordError);
  CHECK_THROWS_AS(from_jsonl("not json\n"), RecordError);
  CHECK_THROWS_AS(from_jsonl(""), RecordError);
}
