#include "cadlab/policy.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include <zlib.h>

namespace cadlab::nn {

static_assert(std::endian::native == std::endian::little, "checkpoints are little-endian");

template <class Scalar>
Policy<Scalar>::Policy(Architecture arch) : arch_(std::move(arch)) {
  if (arch_.input < 1 || arch_.actions < 1 || arch_.hidden.empty()) {
    throw std::invalid_argument("invalid architecture");
  }
  Eigen::Index offset = 0;
  auto add = [&](int rows, int cols) {
    if (rows < 1 || cols < 1) throw std::invalid_argument("invalid layer width");
    layers_.push_back({offset, offset + static_cast<Eigen::Index>(rows) * cols, rows, cols});
    offset += static_cast<Eigen::Index>(rows) * cols + rows;
  };
  int in = arch_.input;
  for (int h : arch_.hidden) {
    add(h, in);
    in = h;
  }
  add(arch_.actions, in);
  add(1, in);
  log_std_offset_ = offset;
  params_ = Vector::Zero(offset + arch_.actions);
}

template <class Scalar>
Eigen::Map<const typename Policy<Scalar>::Matrix> Policy<Scalar>::weight(int layer) const {
  const auto& l = layers_.at(static_cast<std::size_t>(layer));
  return {params_.data() + l.w_offset, l.rows, l.cols};
}

template <class Scalar>
Eigen::Map<typename Policy<Scalar>::Matrix> Policy<Scalar>::weight(int layer) {
  const auto& l = layers_.at(static_cast<std::size_t>(layer));
  return {params_.data() + l.w_offset, l.rows, l.cols};
}

template <class Scalar>
Eigen::Map<const typename Policy<Scalar>::Vector> Policy<Scalar>::bias(int layer) const {
  const auto& l = layers_.at(static_cast<std::size_t>(layer));
  return {params_.data() + l.b_offset, l.rows};
}

template <class Scalar>
Eigen::Map<typename Policy<Scalar>::Vector> Policy<Scalar>::bias(int layer) {
  const auto& l = layers_.at(static_cast<std::size_t>(layer));
  return {params_.data() + l.b_offset, l.rows};
}

template <class Scalar>
Eigen::Map<const typename Policy<Scalar>::Vector> Policy<Scalar>::log_std() const {
  return {params_.data() + log_std_offset_, arch_.actions};
}

template <class Scalar>
Eigen::Map<typename Policy<Scalar>::Vector> Policy<Scalar>::log_std() {
  return {params_.data() + log_std_offset_, arch_.actions};
}

template <class Scalar>
void Policy<Scalar>::init_orthogonal(std::uint64_t seed, double trunk_gain, double actor_gain,
                                     double value_gain, double log_std0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  params_.setZero();
  for (int l = 0; l < layer_count(); ++l) {
    const auto& slot = layers_[static_cast<std::size_t>(l)];
    const int big = std::max(slot.rows, slot.cols);
    const int small = std::min(slot.rows, slot.cols);
    Eigen::MatrixXd g(big, small);
    for (Eigen::Index j = 0; j < g.cols(); ++j) {
      for (Eigen::Index i = 0; i < g.rows(); ++i) g(i, j) = normal(rng);
    }
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
    const Eigen::MatrixXd r = qr.matrixQR().topRows(small).template triangularView<Eigen::Upper>();
    for (int j = 0; j < small; ++j) {
      if (r(j, j) < 0.0) q.col(j) *= -1.0;
    }
    const double gain = l == actor_layer() ? actor_gain : l == value_layer() ? value_gain : trunk_gain;
    if (slot.rows >= slot.cols) {
      weight(l) = (gain * q).cast<Scalar>();
    } else {
      weight(l) = (gain * q.transpose()).cast<Scalar>();
    }
  }
  log_std().setConstant(static_cast<Scalar>(log_std0));
}

template <class Scalar>
void Policy<Scalar>::forward(const Matrix& obs, Trace& trace) const {
  if (obs.rows() != arch_.input) {
    throw std::invalid_argument("observation width " + std::to_string(obs.rows()) +
                                " does not match network input " + std::to_string(arch_.input));
  }
  const int trunk = static_cast<int>(arch_.hidden.size());
  trace.activations.resize(static_cast<std::size_t>(trunk) + 1);
  trace.activations[0] = obs;
  for (int l = 0; l < trunk; ++l) {
    Matrix z = weight(l) * trace.activations[static_cast<std::size_t>(l)];
    z.colwise() += bias(l);
    trace.activations[static_cast<std::size_t>(l) + 1] = z.array().tanh().matrix();
  }
  const Matrix& h = trace.activations.back();
  Matrix za = weight(actor_layer()) * h;
  za.colwise() += bias(actor_layer());
  trace.mean = za.array().tanh().matrix();
  trace.value = weight(value_layer()) * h;
  trace.value.colwise() += bias(value_layer());
}

template <class Scalar>
typename Policy<Scalar>::Vector Policy<Scalar>::backward(const Trace& trace,
                                                         const OutputGrads<Scalar>& g) const {
  const Eigen::Index batch = trace.mean.cols();
  if (g.d_mean.rows() != arch_.actions || g.d_mean.cols() != batch || g.d_value.rows() != 1 ||
      g.d_value.cols() != batch || g.d_log_std.size() != arch_.actions ||
      trace.activations.size() != arch_.hidden.size() + 1) {
    throw std::invalid_argument("gradient shapes do not match the forward trace");
  }
  Policy<Scalar> grad(arch_);
  const Matrix& h = trace.activations.back();

  const Matrix dza = (g.d_mean.array() * (Scalar(1) - trace.mean.array().square())).matrix();
  grad.weight(actor_layer()).noalias() = dza * h.transpose();
  grad.bias(actor_layer()) = dza.rowwise().sum();
  grad.weight(value_layer()).noalias() = g.d_value * h.transpose();
  grad.bias(value_layer()) = g.d_value.rowwise().sum();

  Matrix da = weight(actor_layer()).transpose() * dza;
  da.noalias() += weight(value_layer()).transpose() * g.d_value;
  for (int l = static_cast<int>(arch_.hidden.size()) - 1; l >= 0; --l) {
    const Matrix& a = trace.activations[static_cast<std::size_t>(l) + 1];
    const Matrix dz = (da.array() * (Scalar(1) - a.array().square())).matrix();
    const Matrix& prev = trace.activations[static_cast<std::size_t>(l)];
    grad.weight(l).noalias() = dz * prev.transpose();
    grad.bias(l) = dz.rowwise().sum();
    if (l > 0) da = weight(l).transpose() * dz;
  }
  grad.log_std() = g.d_log_std;
  return std::move(grad.params());
}

template class Policy<float>;
template class Policy<double>;

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;  // ln(sqrt(2 pi))

}  // namespace

ActionSample sample_action(std::span<const double> mean, std::span<const double> log_std,
                           std::mt19937_64& rng) {
  if (mean.size() != log_std.size()) throw std::invalid_argument("mean/log_std size mismatch");
  std::normal_distribution<double> normal(0.0, 1.0);
  ActionSample s;
  s.raw.resize(mean.size());
  s.action.resize(mean.size());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double z = normal(rng);
    s.raw[i] = mean[i] + std::exp(log_std[i]) * z;
    s.action[i] = std::clamp(s.raw[i], -1.0, 1.0);
    s.log_prob += -0.5 * z * z - log_std[i] - kLogSqrt2Pi;
  }
  return s;
}

double gaussian_log_prob(std::span<const double> mean, std::span<const double> log_std,
                         std::span<const double> x) {
  double lp = 0.0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double z = (x[i] - mean[i]) * std::exp(-log_std[i]);
    lp += -0.5 * z * z - log_std[i] - kLogSqrt2Pi;
  }
  return lp;
}

double gaussian_entropy(std::span<const double> log_std) {
  double h = 0.0;
  for (double ls : log_std) h += ls + 0.5 + kLogSqrt2Pi;
  return h;
}

namespace {

constexpr char kMagic[8] = {'C', 'D', 'L', 'B', 'P', 'O', 'L', 'Y'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view b) : bytes_(b) {}
  template <class T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw CheckpointError("checkpoint is truncated");
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::string_view bytes) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

}  // namespace

template <class Scalar>
std::string serialize_policy(const Policy<Scalar>& policy) {
  std::string out(kMagic, sizeof(kMagic));
  const Architecture& a = policy.arch();
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, sizeof(Scalar));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(a.input));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(a.hidden.size()));
  for (int h : a.hidden) put<std::uint32_t>(out, static_cast<std::uint32_t>(h));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(a.actions));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(policy.size()));
  out.append(reinterpret_cast<const char*>(policy.params().data()),
             static_cast<std::size_t>(policy.size()) * sizeof(Scalar));
  put<std::uint32_t>(out, crc_of(out));
  return out;
}

template <class Scalar>
Policy<Scalar> deserialize_policy(std::string_view bytes) {
  if (bytes.size() < sizeof(kMagic) + 4 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a policy checkpoint");
  }
  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  Reader tail(bytes.substr(bytes.size() - 4));
  if (tail.get<std::uint32_t>() != crc_of(body)) throw CheckpointError("checkpoint checksum mismatch");

  Reader r(body.substr(sizeof(kMagic)));
  if (r.get<std::uint32_t>() != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version");
  if (r.get<std::uint32_t>() != sizeof(Scalar)) throw CheckpointError("checkpoint scalar width mismatch");
  Architecture a;
  a.input = static_cast<int>(r.get<std::uint32_t>());
  const auto layers = r.get<std::uint32_t>();
  if (layers == 0 || layers > 64) throw CheckpointError("implausible layer count");
  a.hidden.clear();
  for (std::uint32_t i = 0; i < layers; ++i) a.hidden.push_back(static_cast<int>(r.get<std::uint32_t>()));
  a.actions = static_cast<int>(r.get<std::uint32_t>());
  Policy<Scalar> p(a);
  if (r.get<std::uint64_t>() != static_cast<std::uint64_t>(p.size())) {
    throw CheckpointError("checkpoint parameter count does not match its shape header");
  }
  const std::size_t start = sizeof(kMagic) + r.pos();
  const std::size_t nbytes = static_cast<std::size_t>(p.size()) * sizeof(Scalar);
  if (start + nbytes != body.size()) throw CheckpointError("checkpoint payload size mismatch");
  std::memcpy(p.params().data(), body.data() + start, nbytes);
  if (!p.params().allFinite()) throw CheckpointError("checkpoint holds non-finite parameters");
  return p;
}

template <class Scalar>
void save_policy(const Policy<Scalar>& policy, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write '" + path + "'");
  const std::string bytes = serialize_policy(policy);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for '" + path + "'");
}

template <class Scalar>
Policy<Scalar> load_policy(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_policy<Scalar>(ss.str());
}

template std::string serialize_policy(const Policy<float>&);
template std::string serialize_policy(const Policy<double>&);
template Policy<float> deserialize_policy<float>(std::string_view);
template Policy<double> deserialize_policy<double>(std::string_view);
template void save_policy(const Policy<float>&, const std::string&);
template void save_policy(const Policy<double>&, const std::string&);
template Policy<float> load_policy<float>(const std::string&);
template Policy<double> load_policy<double>(const std::string&);

}  // namespace cadlab::nn
