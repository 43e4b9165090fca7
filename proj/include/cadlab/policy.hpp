#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cadlab::nn {

struct Architecture {
  int input = 37;
  std::vector<int> hidden{256, 256, 256};
  int actions = 2;

  bool operator==(const Architecture&) const = default;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Activations of one forward pass; samples are columns.
template <class Scalar>
struct ForwardTrace {
  std::vector<MatrixX<Scalar>> activations;  // [0] is the input, then one per trunk layer
  MatrixX<Scalar> mean;                      // actions x batch, in [-1, 1]
  MatrixX<Scalar> value;                     // 1 x batch
};

// Loss gradients with respect to the network outputs.
template <class Scalar>
struct OutputGrads {
  MatrixX<Scalar> d_mean;   // actions x batch
  MatrixX<Scalar> d_value;  // 1 x batch
  VectorX<Scalar> d_log_std;
};

// Actor-critic MLP: tanh trunk, tanh-squashed action means, linear value head
// and a state-independent log standard deviation. All parameters live in one
// flat vector: per trunk layer W (out x in, column-major) then b, followed by
// the actor head, the value head and log_std.
template <class Scalar>
class Policy {
 public:
  using Matrix = MatrixX<Scalar>;
  using Vector = VectorX<Scalar>;
  using Trace = ForwardTrace<Scalar>;

  Policy() : Policy(Architecture{}) {}
  explicit Policy(Architecture arch);

  const Architecture& arch() const { return arch_; }
  Eigen::Index size() const { return params_.size(); }
  Vector& params() { return params_; }
  const Vector& params() const { return params_; }

  // Layers 0..hidden-1 are the trunk, then the actor head, then the value head.
  int layer_count() const { return static_cast<int>(layers_.size()); }
  int actor_layer() const { return layer_count() - 2; }
  int value_layer() const { return layer_count() - 1; }
  Eigen::Map<const Matrix> weight(int layer) const;
  Eigen::Map<Matrix> weight(int layer);
  Eigen::Map<const Vector> bias(int layer) const;
  Eigen::Map<Vector> bias(int layer);
  Eigen::Map<const Vector> log_std() const;
  Eigen::Map<Vector> log_std();

  // Orthogonal init (seeded), zero biases, log_std filled with `log_std0`.
  void init_orthogonal(std::uint64_t seed, double trunk_gain = 1.0, double actor_gain = 0.01,
                       double value_gain = 1.0, double log_std0 = -0.6931471805599453);

  // obs is input x batch. Throws std::invalid_argument on a width mismatch.
  void forward(const Matrix& obs, Trace& trace) const;

  // Gradient of the loss with respect to the flat parameter vector.
  Vector backward(const Trace& trace, const OutputGrads<Scalar>& grads) const;

  template <class Other>
  Policy<Other> cast() const {
    Policy<Other> out(arch_);
    out.params() = params_.template cast<Other>();
    return out;
  }

 private:
  struct LayerSlot {
    Eigen::Index w_offset, b_offset;
    int rows, cols;
  };

  Architecture arch_;
  std::vector<LayerSlot> layers_;
  Eigen::Index log_std_offset_ = 0;
  Vector params_;
};

// Gaussian action draw. `raw` is the unclamped sample the log-probability
// refers to; `action` is raw clamped to [-1, 1].
struct ActionSample {
  std::vector<double> action;
  std::vector<double> raw;
  double log_prob = 0.0;
};

ActionSample sample_action(std::span<const double> mean, std::span<const double> log_std,
                           std::mt19937_64& rng);
double gaussian_log_prob(std::span<const double> mean, std::span<const double> log_std,
                         std::span<const double> x);
double gaussian_entropy(std::span<const double> log_std);

// Versioned binary checkpoint with shape header and a CRC-32 of the payload.
template <class Scalar>
std::string serialize_policy(const Policy<Scalar>& policy);
template <class Scalar>
Policy<Scalar> deserialize_policy(std::string_view bytes);
template <class Scalar>
void save_policy(const Policy<Scalar>& policy, const std::string& path);
template <class Scalar>
Policy<Scalar> load_policy(const std::string& path);

}  // namespace cadlab::nn
