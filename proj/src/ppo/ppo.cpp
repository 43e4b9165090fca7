#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cadlab/ppo.hpp"

namespace cadlab::ppo {

void PPOConfig::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in (0, 1]");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must lie in [0, 1]");
  if (!(clip > 0.0)) throw std::invalid_argument("clip must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (epochs < 1 || minibatch < 1 || horizon < 1 || num_worlds < 1) {
    throw std::invalid_argument("epochs, minibatch, horizon and num_worlds must be positive");
  }
  if (total_steps < 1) throw std::invalid_argument("total_steps must be positive");
  if (!(max_grad_norm > 0.0)) throw std::invalid_argument("max_grad_norm must be positive");
  if (!(reward_scale > 0.0)) throw std::invalid_argument("reward_scale must be positive");
}

const char* agent_name(Agent a) { return a == Agent::Blue ? "blue" : "red"; }

sim::Lane agent_lane(Agent a) { return a == Agent::Blue ? sim::Lane::Right : sim::Lane::Left; }

StagePlan stage_plan(int stage) {
  switch (stage) {
    case 1: return {1, Agent::Blue, std::nullopt, env::Topology::None, std::nullopt, std::nullopt};
    case 2: return {2, Agent::Red, std::nullopt, env::Topology::None, std::nullopt, std::nullopt};
    case 3: return {3, Agent::Red, Agent::Blue, env::Topology::UniToRed, 2, 1};
    case 4: return {4, Agent::Blue, Agent::Red, env::Topology::Bidirectional, 1, 3};
    default: throw std::invalid_argument("stage must be 1, 2, 3 or 4");
  }
}

AdvantageResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                            std::span<const std::uint8_t> dones, double bootstrap, double gamma,
                            double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n) {
    throw std::invalid_argument("rewards, values and dones must have equal lengths");
  }
  AdvantageResult out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double next_adv = 0.0;
  double next_value = bootstrap;
  for (std::size_t k = n; k-- > 0;) {
    const double live = dones[k] ? 0.0 : 1.0;
    const double delta = rewards[k] + gamma * next_value * live - values[k];
    next_adv = delta + gamma * lambda * live * next_adv;
    out.advantages[k] = next_adv;
    out.returns[k] = next_adv + values[k];
    next_value = values[k];
  }
  return out;
}

void normalize_advantages(std::span<double> a) {
  if (a.size() < 2) return;
  const double mean = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
  double var = 0.0;
  for (double x : a) var += (x - mean) * (x - mean);
  var /= static_cast<double>(a.size());
  const double inv = 1.0 / (std::sqrt(var) + 1e-8);
  for (double& x : a) x = (x - mean) * inv;
}

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;

}  // namespace

template <class Scalar>
LossResult<Scalar> ppo_loss(const nn::Policy<Scalar>& policy, const LossBatch<Scalar>& batch,
                            const PPOConfig& cfg, bool with_grad) {
  const Eigen::Index n = batch.observations.cols();
  const int na = policy.arch().actions;
  if (n == 0 || batch.actions.cols() != n || batch.actions.rows() != na ||
      static_cast<Eigen::Index>(batch.old_log_probs.size()) != n ||
      static_cast<Eigen::Index>(batch.advantages.size()) != n ||
      static_cast<Eigen::Index>(batch.returns.size()) != n) {
    throw std::invalid_argument("loss batch has inconsistent sizes");
  }
  nn::ForwardTrace<Scalar> trace;
  policy.forward(batch.observations, trace);

  std::vector<double> log_std(static_cast<std::size_t>(na));
  for (int i = 0; i < na; ++i) log_std[i] = static_cast<double>(policy.log_std()[i]);

  nn::OutputGrads<Scalar> g;
  if (with_grad) {
    g.d_mean = nn::MatrixX<Scalar>::Zero(na, n);
    g.d_value = nn::MatrixX<Scalar>::Zero(1, n);
    g.d_log_std = nn::VectorX<Scalar>::Zero(na);
  }
  std::vector<double> d_log_std(static_cast<std::size_t>(na), 0.0);

  const double inv_n = 1.0 / static_cast<double>(n);
  LossStats s;
  double clipped = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    double lp = 0.0;
    for (int i = 0; i < na; ++i) {
      const double z = (static_cast<double>(batch.actions(i, j)) - static_cast<double>(trace.mean(i, j))) *
                       std::exp(-log_std[i]);
      lp += -0.5 * z * z - log_std[i] - kLogSqrt2Pi;
    }
    const double log_ratio = lp - batch.old_log_probs[j];
    const double ratio = std::exp(log_ratio);
    const double adv = batch.advantages[j];
    const double surr1 = ratio * adv;
    const double surr2 = std::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv;
    s.policy_loss -= std::min(surr1, surr2) * inv_n;
    s.approx_kl += ((ratio - 1.0) - log_ratio) * inv_n;
    if (std::abs(ratio - 1.0) > cfg.clip) clipped += 1.0;

    const double v = static_cast<double>(trace.value(0, j));
    const double err = v - batch.returns[j];
    s.value_loss += err * err * inv_n;

    if (with_grad) {
      const double d_lp = surr1 <= surr2 ? -adv * ratio * inv_n : 0.0;
      for (int i = 0; i < na; ++i) {
        const double sigma_inv = std::exp(-log_std[i]);
        const double diff = static_cast<double>(batch.actions(i, j)) - static_cast<double>(trace.mean(i, j));
        const double z = diff * sigma_inv;
        g.d_mean(i, j) = static_cast<Scalar>(d_lp * diff * sigma_inv * sigma_inv);
        d_log_std[i] += d_lp * (z * z - 1.0);
      }
      g.d_value(0, j) = static_cast<Scalar>(cfg.value_coef * 2.0 * err * inv_n);
    }
  }
  s.entropy = nn::gaussian_entropy(log_std);
  s.clip_fraction = clipped * inv_n;
  s.loss = s.policy_loss + cfg.value_coef * s.value_loss - cfg.entropy_coef * s.entropy;
  if (!std::isfinite(s.loss)) {
    std::ostringstream msg;
    msg << "non-finite PPO loss (policy " << s.policy_loss << ", value " << s.value_loss
        << ", entropy " << s.entropy << ")";
    throw TrainingError(msg.str());
  }

  LossResult<Scalar> out;
  out.stats = s;
  if (with_grad) {
    for (int i = 0; i < na; ++i) g.d_log_std[i] = static_cast<Scalar>(d_log_std[i] - cfg.entropy_coef);
    out.grad = policy.backward(trace, g);
  }
  return out;
}

template LossResult<float> ppo_loss(const nn::Policy<float>&, const LossBatch<float>&,
                                    const PPOConfig&, bool);
template LossResult<double> ppo_loss(const nn::Policy<double>&, const LossBatch<double>&,
                                     const PPOConfig&, bool);

void Adam::step(nn::VectorX<float>& params, const nn::VectorX<float>& grad, const PPOConfig& cfg,
                double lr) {
  if (m_.size() != params.size()) {
    m_ = nn::VectorX<float>::Zero(params.size());
    v_ = nn::VectorX<float>::Zero(params.size());
    t_ = 0;
  }
  t_ += 1;
  const auto b1 = static_cast<float>(cfg.adam_beta1);
  const auto b2 = static_cast<float>(cfg.adam_beta2);
  m_.array() = b1 * m_.array() + (1.0f - b1) * grad.array();
  v_.array() = b2 * v_.array() + (1.0f - b2) * grad.array().square();
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t_));
  const auto step = static_cast<float>(lr / c1);
  const auto eps = static_cast<float>(cfg.adam_eps);
  const auto inv_sqrt_c2 = static_cast<float>(1.0 / std::sqrt(c2));
  params.array() -= step * m_.array() / ((v_.array().sqrt() * inv_sqrt_c2) + eps);
}

LossStats ppo_update(nn::Policy<float>& policy, Adam& adam, const RolloutBuffer& buffer,
                     const PPOConfig& cfg, double lr, std::mt19937_64& rng) {
  const std::size_t n = buffer.size();
  if (n == 0 || buffer.worlds * buffer.horizon != static_cast<int>(n)) {
    throw std::invalid_argument("rollout buffer is empty or misaligned");
  }
  const auto h = static_cast<std::size_t>(buffer.horizon);
  std::vector<double> adv(n), ret(n);
  for (std::size_t w = 0; w < static_cast<std::size_t>(buffer.worlds); ++w) {
    const std::size_t off = w * h;
    const auto r = compute_gae(std::span(buffer.rewards).subspan(off, h),
                               std::span(buffer.values).subspan(off, h),
                               std::span(buffer.dones).subspan(off, h), buffer.bootstrap[w],
                               cfg.gamma, cfg.lambda);
    std::copy(r.advantages.begin(), r.advantages.end(), adv.begin() + static_cast<std::ptrdiff_t>(off));
    std::copy(r.returns.begin(), r.returns.end(), ret.begin() + static_cast<std::ptrdiff_t>(off));
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const auto mb = static_cast<std::size_t>(cfg.minibatch);
  LossStats mean;
  int count = 0;
  LossBatch<float> batch;
  const Eigen::Index obs_rows = buffer.observations.rows();
  const Eigen::Index act_rows = buffer.actions.rows();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += mb) {
      const std::size_t len = std::min(mb, n - start);
      batch.observations.resize(obs_rows, static_cast<Eigen::Index>(len));
      batch.actions.resize(act_rows, static_cast<Eigen::Index>(len));
      batch.old_log_probs.resize(len);
      batch.advantages.resize(len);
      batch.returns.resize(len);
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t i = order[start + k];
        const auto col = static_cast<Eigen::Index>(k);
        batch.observations.col(col) = buffer.observations.col(static_cast<Eigen::Index>(i));
        batch.actions.col(col) = buffer.actions.col(static_cast<Eigen::Index>(i));
        batch.old_log_probs[k] = buffer.log_probs[i];
        batch.advantages[k] = adv[i];
        batch.returns[k] = ret[i];
      }
      normalize_advantages(batch.advantages);
      LossResult<float> res = ppo_loss(policy, batch, cfg, true);
      const double norm = std::sqrt(res.grad.template cast<double>().squaredNorm());
      if (!std::isfinite(norm)) throw TrainingError("non-finite gradient norm");
      if (norm > cfg.max_grad_norm) res.grad *= static_cast<float>(cfg.max_grad_norm / norm);
      adam.step(policy.params(), res.grad, cfg, lr);
      res.stats.grad_norm = norm;

      mean.loss += res.stats.loss;
      mean.policy_loss += res.stats.policy_loss;
      mean.value_loss += res.stats.value_loss;
      mean.entropy += res.stats.entropy;
      mean.approx_kl += res.stats.approx_kl;
      mean.clip_fraction += res.stats.clip_fraction;
      mean.grad_norm += res.stats.grad_norm;
      ++count;
    }
  }
  const double inv = 1.0 / count;
  mean.loss *= inv;
  mean.policy_loss *= inv;
  mean.value_loss *= inv;
  mean.entropy *= inv;
  mean.approx_kl *= inv;
  mean.clip_fraction *= inv;
  mean.grad_norm *= inv;
  return mean;
}

}  // namespace cadlab::ppo
