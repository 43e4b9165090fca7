#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cadlab/policy.hpp"
#include "cadlab/world.hpp"

namespace cadlab::ppo {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PrerequisiteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PPOConfig {
  double gamma = 0.99;
  double lambda = 0.95;
  double clip = 0.2;
  double learning_rate = 3e-4;
  bool lr_decay = true;  // linear decay to zero over total_steps
  int epochs = 3;
  int minibatch = 512;
  int horizon = 2048;  // steps per world per update
  double entropy_coef = 5e-3;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double reward_scale = 1.0;  // applied to rewards before GAE only
  std::int64_t total_steps = 1'000'000;
  int num_worlds = 8;
  std::uint64_t seed = 1;
  nn::Architecture arch;

  void validate() const;
};

// Blue drives the right lane, red the left lane.
enum class Agent { Blue, Red };
const char* agent_name(Agent a);
sim::Lane agent_lane(Agent a);

struct StagePlan {
  int stage = 1;
  Agent trainable = Agent::Blue;
  std::optional<Agent> partner;
  env::Topology topology = env::Topology::None;
  std::optional<int> init_from_stage;     // fresh parameters when empty
  std::optional<int> partner_from_stage;  // required iff partner is set
};

// The fixed four-stage curriculum.
StagePlan stage_plan(int stage);

struct AdvantageResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// GAE over one trajectory segment. dones[t] marks a terminal transition at t.
AdvantageResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                            std::span<const std::uint8_t> dones, double bootstrap, double gamma,
                            double lambda);

// In-place zero-mean, unit-variance (population) normalization.
void normalize_advantages(std::span<double> a);

// Steps are stored world-major: index = world * horizon + t.
struct RolloutBuffer {
  int worlds = 0;
  int horizon = 0;
  nn::MatrixX<float> observations;  // kObsSize x N
  nn::MatrixX<float> actions;       // raw (unclamped) samples, 2 x N
  std::vector<double> log_probs;
  std::vector<double> rewards;  // scaled
  std::vector<double> values;
  std::vector<std::uint8_t> dones;
  std::vector<double> bootstrap;  // one per world
  std::vector<double> completed_returns;  // unscaled episode returns finished during collection

  std::size_t size() const { return rewards.size(); }
  bool operator==(const RolloutBuffer&) const = default;
};

// One minibatch prepared for the loss.
template <class Scalar>
struct LossBatch {
  nn::MatrixX<Scalar> observations;
  nn::MatrixX<Scalar> actions;
  std::vector<double> old_log_probs;
  std::vector<double> advantages;  // already normalized
  std::vector<double> returns;
};

struct LossStats {
  double loss = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;
};

template <class Scalar>
struct LossResult {
  LossStats stats;
  nn::VectorX<Scalar> grad;  // empty unless requested
};

// Clipped-surrogate loss:
//   -mean(min(rA, clip(r, 1-e, 1+e)A)) + c_v * mean((v - R)^2) - c_e * entropy
template <class Scalar>
LossResult<Scalar> ppo_loss(const nn::Policy<Scalar>& policy, const LossBatch<Scalar>& batch,
                            const PPOConfig& cfg, bool with_grad);

class Adam {
 public:
  Adam() = default;
  explicit Adam(Eigen::Index size) : m_(nn::VectorX<float>::Zero(size)), v_(nn::VectorX<float>::Zero(size)) {}
  void step(nn::VectorX<float>& params, const nn::VectorX<float>& grad, const PPOConfig& cfg,
            double lr);
  std::int64_t steps() const { return t_; }

 private:
  nn::VectorX<float> m_, v_;
  std::int64_t t_ = 0;
};

// Epochs of shuffled minibatch updates over the whole buffer. Returns the
// statistics averaged over minibatches. Throws TrainingError on a non-finite
// loss, leaving the policy untouched by the failing step.
LossStats ppo_update(nn::Policy<float>& policy, Adam& adam, const RolloutBuffer& buffer,
                     const PPOConfig& cfg, double lr, std::mt19937_64& rng);

// Persistent set of training worlds. Worlds reset whenever the trainable
// agent is done; the partner (if any) acts at its distribution mean.
class RolloutWorkers {
 public:
  RolloutWorkers(std::shared_ptr<const sim::TrackSpec> track, env::EnvConfig env_cfg,
                 PPOConfig cfg, StagePlan plan);

  RolloutBuffer collect(const nn::Policy<float>& policy, const nn::Policy<float>* partner);
  std::int64_t steps_collected() const { return steps_; }

 private:
  struct Slot {
    std::unique_ptr<env::World> world;
    std::mt19937_64 rng;
    std::uint64_t episodes = 0;
    bool needs_reset = true;
    double episode_return = 0.0;
    env::Observation obs{};
    env::Observation partner_obs{};
  };
  void reset_slot(std::size_t w);

  std::shared_ptr<const sim::TrackSpec> track_;
  env::EnvConfig env_cfg_;
  PPOConfig cfg_;
  StagePlan plan_;
  std::vector<Slot> slots_;
  std::int64_t steps_ = 0;
};

struct CurvePoint {
  std::int64_t step = 0;
  double mean_cum_reward = 0.0;
};
using TrainingCurve = std::vector<CurvePoint>;

void write_curve_csv(const TrainingCurve& curve, const std::string& path);
TrainingCurve read_curve_csv(const std::string& path);

struct UpdateReport {
  int update = 0;
  std::int64_t steps = 0;
  LossStats stats;
  std::optional<double> mean_return;  // episodes completed in this update
};

using ProgressFn = std::function<void(const UpdateReport&)>;

struct StageResult {
  nn::Policy<float> policy;
  TrainingCurve curve;
};

// Trains one stage from `init` for cfg.total_steps environment steps.
StageResult train_stage(std::shared_ptr<const sim::TrackSpec> track, const env::EnvConfig& env_cfg,
                        const PPOConfig& cfg, const StagePlan& plan, nn::Policy<float> init,
                        const nn::Policy<float>* partner, const ProgressFn& progress = {});

std::string checkpoint_name(int stage);  // "stage<k>.ckpt"
std::string curve_name(int stage);       // "stage<k>_curve.csv"

struct CurriculumConfig {
  env::EnvConfig env;
  std::array<PPOConfig, 4> stages;
};

// Runs the listed stages in order, reading prerequisite checkpoints from and
// writing results to out_dir. Throws PrerequisiteError when a stage's init or
// partner checkpoint is missing.
void run_curriculum(const CurriculumConfig& cfg, std::shared_ptr<const sim::TrackSpec> track,
                    const std::filesystem::path& out_dir, std::span<const int> stages,
                    const ProgressFn& progress = {});

}  // namespace cadlab::ppo
