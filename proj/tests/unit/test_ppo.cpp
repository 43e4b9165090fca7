#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "doctest.h"

#include "cadlab/ppo.hpp"
#include "test_support.hpp"

using namespace cadlab;
using namespace cadlab::ppo;

namespace {

// A_t = sum_k (gamma lambda)^(k-t) delta_k, truncated at the first terminal.
std::vector<double> gae_oracle(const std::vector<double>& r, const std::vector<double>& v,
                               const std::vector<std::uint8_t>& d, double boot, double g, double l) {
  const std::size_t n = r.size();
  std::vector<double> delta(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double next = k + 1 < n ? v[k + 1] : boot;
    delta[k] = r[k] + g * next * (d[k] ? 0.0 : 1.0) - v[k];
  }
  std::vector<double> a(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    double w = 1.0;
    for (std::size_t k = t; k < n; ++k) {
      a[t] += w * delta[k];
      if (d[k]) break;
      w *= g * l;
    }
  }
  return a;
}

nn::Architecture tiny_arch() {
  nn::Architecture a;
  a.hidden = {4, 4};
  return a;
}

template <class S>
LossBatch<S> random_batch(const nn::Policy<S>& p, int n, std::uint64_t seed, double ratio_noise) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  LossBatch<S> b;
  b.observations.resize(37, n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < 37; ++i) b.observations(i, j) = static_cast<S>(u(rng));
  }
  nn::ForwardTrace<S> t;
  p.forward(b.observations, t);
  b.actions.resize(2, n);
  const std::vector<double> ls{p.log_std()[0], p.log_std()[1]};
  for (int j = 0; j < n; ++j) {
    const std::vector<double> mean{t.mean(0, j), t.mean(1, j)};
    for (int i = 0; i < 2; ++i) b.actions(i, j) = static_cast<S>(mean[i] + 0.4 * u(rng));
    std::vector<double> act{static_cast<double>(b.actions(0, j)), static_cast<double>(b.actions(1, j))};
    b.old_log_probs.push_back(nn::gaussian_log_prob(mean, ls, act) + ratio_noise * u(rng));
    b.advantages.push_back(u(rng));
    b.returns.push_back(2.0 * u(rng));
  }
  normalize_advantages(b.advantages);
  return b;
}

template <class S>
nn::Policy<S> tiny_policy(std::uint64_t seed) {
  nn::Policy<S> p(tiny_arch());
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.params()[i] = static_cast<S>(u(rng));
  p.log_std().setConstant(static_cast<S>(-0.5));
  return p;
}

PPOConfig small_cfg() {
  PPOConfig c;
  c.arch = tiny_arch();
  c.num_worlds = 2;
  c.horizon = 64;
  c.minibatch = 32;
  c.total_steps = 256;
  c.seed = 3;
  return c;
}

std::shared_ptr<const sim::TrackSpec> reference_track() {
  return std::make_shared<const sim::TrackSpec>(sim::load_track_file(test::reference_track_path()));
}

}  // namespace

TEST_CASE("GAE one-step terminal case") {
  const std::vector<double> r{1.0}, v{0.0};
  const std::vector<std::uint8_t> d{1};
  const auto g = compute_gae(r, v, d, 123.0, 0.99, 0.95);
  CHECK(g.advantages[0] == 1.0);
  CHECK(g.returns[0] == 1.0);
}

TEST_CASE("GAE hand-computed two-step case") {
  const std::vector<double> r{0.0, 1.0}, v{0.5, 0.25};
  const std::vector<std::uint8_t> d{0, 1};
  const auto g = compute_gae(r, v, d, 0.0, 0.99, 0.95);
  CHECK(g.advantages[0] == doctest::Approx(0.452875).epsilon(1e-12));
  CHECK(g.advantages[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("GAE telescopes with gamma = lambda = 1") {
  const std::vector<double> r{0.3, -1.0, 2.0, 0.5}, v{0.1, 0.7, -0.2, 1.5};
  const std::vector<std::uint8_t> d(4, 0);
  const auto g = compute_gae(r, v, d, 4.0, 1.0, 1.0);
  for (std::size_t t = 0; t < 4; ++t) {
    double sum = 4.0;
    for (std::size_t k = t; k < 4; ++k) sum += r[k];
    CHECK(g.advantages[t] == doctest::Approx(sum - v[t]).epsilon(1e-14));
  }
}

TEST_CASE("GAE recursion equals the explicit double sum on random inputs") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-3, 3), p(0, 1);
  std::uniform_int_distribution<int> len(1, 64);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = len(rng);
    std::vector<double> r(n), v(n);
    std::vector<std::uint8_t> d(n);
    for (int i = 0; i < n; ++i) {
      r[i] = u(rng);
      v[i] = u(rng);
      d[i] = p(rng) < 0.1;
    }
    const double boot = u(rng), gamma = 0.9 + 0.1 * p(rng), lambda = p(rng);
    const auto g = compute_gae(r, v, d, boot, gamma, lambda);
    const auto o = gae_oracle(r, v, d, boot, gamma, lambda);
    for (int i = 0; i < n; ++i) {
      CHECK(std::abs(g.advantages[i] - o[i]) < 1e-8);
      CHECK(g.returns[i] == doctest::Approx(g.advantages[i] + v[i]));
    }
  }
}

TEST_CASE("GAE rejects misaligned inputs") {
  const std::vector<double> r{1.0, 2.0}, v{0.0};
  const std::vector<std::uint8_t> d{0, 0};
  CHECK_THROWS_AS(compute_gae(r, v, d, 0.0, 0.99, 0.95), std::invalid_argument);
}

TEST_CASE("advantage normalization gives zero mean and unit deviation") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd(3.0, 7.0);
  std::vector<double> a(513);
  for (double& x : a) x = nd(rng);
  normalize_advantages(a);
  double mean = 0.0, var = 0.0;
  for (double x : a) mean += x;
  mean /= a.size();
  for (double x : a) var += (x - mean) * (x - mean);
  CHECK(std::abs(mean) < 1e-6);
  CHECK(std::abs(std::sqrt(var / a.size()) - 1.0) < 1e-6);
}

TEST_CASE("ratio-one identity: policy loss is -mean(A)") {
  const auto p = tiny_policy<double>(1);
  auto b = random_batch(p, 16, 2, 0.0);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-2, 2);
  for (double& a : b.advantages) a = u(rng);
  const auto r = ppo_loss(p, b, PPOConfig{}, false);
  double mean = 0.0;
  for (double a : b.advantages) mean += a;
  CHECK(r.stats.policy_loss == doctest::Approx(-mean / 16).epsilon(1e-12));
  CHECK(r.stats.approx_kl == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.stats.clip_fraction == 0.0);
}

TEST_CASE("saturated clip branch contributes no policy gradient") {
  const auto p = tiny_policy<double>(4);
  PPOConfig cfg;
  cfg.value_coef = 0.0;
  cfg.entropy_coef = 0.0;
  auto b = random_batch(p, 8, 5, 0.0);
  for (std::size_t j = 0; j < 8; ++j) {
    b.old_log_probs[j] -= std::log(1.0 + 2.0 * cfg.clip);  // ratio = 1 + 2 eps
    b.advantages[j] = 1.0 + static_cast<double>(j);
  }
  const auto r = ppo_loss(p, b, cfg, true);
  CHECK(r.grad.cwiseAbs().maxCoeff() == 0.0);
  CHECK(r.stats.clip_fraction == 1.0);
}

TEST_CASE("PPO loss gradient matches finite differences on a width-4 net (float32)") {
  const auto p = tiny_policy<float>(6);
  const auto b = random_batch(p, 8, 7, 0.05);
  const PPOConfig cfg;
  const auto r = ppo_loss(p, b, cfg, true);
  double num = 0.0, den = 0.0;
  const double h = 1e-2;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    auto q = p;
    q.params()[i] = static_cast<float>(p.params()[i] + h);
    const double up = ppo_loss(q, b, cfg, false).stats.loss;
    q.params()[i] = static_cast<float>(p.params()[i] - h);
    const double down = ppo_loss(q, b, cfg, false).stats.loss;
    const double fd = (up - down) / (2 * h);
    num += (r.grad[i] - fd) * (r.grad[i] - fd);
    den += fd * fd;
  }
  CHECK(std::sqrt(num / den) < 1e-3);
}

TEST_CASE("with an unbounded clip the gradient is the unclipped surrogate gradient") {
  const auto p = tiny_policy<double>(9);
  auto b = random_batch(p, 12, 10, 0.8);
  PPOConfig cfg;
  cfg.clip = 1e12;
  cfg.value_coef = 0.0;
  cfg.entropy_coef = 0.0;
  const auto r = ppo_loss(p, b, cfg, true);

  // -(1/N) sum_j A_j rho_j grad(log pi_j), assembled sample by sample.
  nn::VectorX<double> oracle = nn::VectorX<double>::Zero(p.size());
  for (Eigen::Index j = 0; j < 12; ++j) {
    nn::ForwardTrace<double> t;
    p.forward(b.observations.col(j), t);
    nn::OutputGrads<double> g;
    g.d_mean.resize(2, 1);
    g.d_value = nn::MatrixX<double>::Zero(1, 1);
    g.d_log_std.resize(2);
    double lp = 0.0;
    for (int i = 0; i < 2; ++i) {
      const double ls = p.log_std()[i];
      const double diff = b.actions(i, j) - t.mean(i, 0);
      lp += -0.5 * diff * diff * std::exp(-2 * ls) - ls - 0.5 * std::log(2 * std::numbers::pi);
      g.d_mean(i, 0) = diff * std::exp(-2 * ls);
      g.d_log_std[i] = diff * diff * std::exp(-2 * ls) - 1.0;
    }
    const double rho = std::exp(lp - b.old_log_probs[j]);
    oracle -= b.advantages[j] * rho / 12.0 * p.backward(t, g);
  }
  CHECK((r.grad - oracle).cwiseAbs().maxCoeff() <= 1e-8 * std::max(1.0, oracle.cwiseAbs().maxCoeff()));
}

TEST_CASE("stage plans follow the curriculum") {
  CHECK(stage_plan(1).trainable == Agent::Blue);
  CHECK_FALSE(stage_plan(1).partner.has_value());
  CHECK(stage_plan(2).trainable == Agent::Red);
  CHECK(stage_plan(3).topology == env::Topology::UniToRed);
  CHECK(stage_plan(3).partner_from_stage == 1);
  CHECK(stage_plan(3).init_from_stage == 2);
  CHECK(stage_plan(4).topology == env::Topology::Bidirectional);
  CHECK(stage_plan(4).init_from_stage == 1);
  CHECK(stage_plan(4).partner_from_stage == 3);
  CHECK_THROWS(stage_plan(5));
}

TEST_CASE("stage 1 rollouts carry an empty partner block and are deterministic") {
  const auto track = reference_track();
  const PPOConfig cfg = small_cfg();
  nn::Policy<float> p(cfg.arch);
  p.init_orthogonal(1);
  RolloutWorkers a(track, env::EnvConfig{}, cfg, stage_plan(1));
  RolloutWorkers b(track, env::EnvConfig{}, cfg, stage_plan(1));
  const RolloutBuffer ba = a.collect(p, nullptr);
  const RolloutBuffer bb = b.collect(p, nullptr);
  CHECK(ba == bb);
  CHECK(ba.size() == 128);
  CHECK(ba.observations.bottomRows(env::kObsSize - env::kPartnerOffset).cwiseAbs().maxCoeff() == 0.0f);
  CHECK(ba.observations.row(0).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("stage 3 rollouts give red a partner block from the frozen blue policy") {
  const auto track = reference_track();
  const PPOConfig cfg = small_cfg();
  nn::Policy<float> red(cfg.arch), blue(cfg.arch);
  red.init_orthogonal(1);
  blue.init_orthogonal(2);
  RolloutWorkers w(track, env::EnvConfig{}, cfg, stage_plan(3));
  const RolloutBuffer buf = w.collect(red, &blue);
  CHECK(buf.observations.row(0).minCoeff() == 1.0f);
  CHECK(buf.observations.row(19).cwiseAbs().maxCoeff() > 0.0f);
  CHECK_THROWS(w.collect(red, nullptr));
}

TEST_CASE("curriculum at desk scale writes four checkpoints and curves; reruns are byte-identical") {
  const auto track = reference_track();
  CurriculumConfig cfg;
  for (auto& s : cfg.stages) s = small_cfg();
  cfg.env.t_max = 4.0;
  const auto root = std::filesystem::temp_directory_path() / "cadlab_curriculum_test";
  std::filesystem::remove_all(root);
  const std::vector<int> all{1, 2, 3, 4};
  run_curriculum(cfg, track, root / "a", all);
  run_curriculum(cfg, track, root / "b", all);
  for (int k = 1; k <= 4; ++k) {
    const auto ca = root / "a" / checkpoint_name(k);
    REQUIRE(std::filesystem::exists(ca));
    const auto curve = read_curve_csv((root / "a" / curve_name(k)).string());
    REQUIRE(curve.size() >= 2);
    for (std::size_t i = 1; i < curve.size(); ++i) CHECK(curve[i].step > curve[i - 1].step);
    std::ifstream fa(ca, std::ios::binary), fb(root / "b" / checkpoint_name(k), std::ios::binary);
    const std::string sa((std::istreambuf_iterator<char>(fa)), {});
    const std::string sb((std::istreambuf_iterator<char>(fb)), {});
    CHECK(sa == sb);
  }
  std::filesystem::remove_all(root);
}

TEST_CASE("stage 4 without a stage 3 checkpoint is a prerequisite error") {
  const auto root = std::filesystem::temp_directory_path() / "cadlab_prereq_test";
  std::filesystem::remove_all(root);
  CurriculumConfig cfg;
  const std::vector<int> only4{4};
  CHECK_THROWS_AS(run_curriculum(cfg, reference_track(), root, only4), PrerequisiteError);
  CHECK_FALSE(std::filesystem::exists(root));
}
