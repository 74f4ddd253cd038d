#pragma once

// Fully connected intent classifier with exact first- and second-order
// derivatives of the mean cross-entropy loss.
//
// Parameters live in one flat vector. Layer l occupies a contiguous block:
// its weight matrix (out x in, column-major) followed by its bias.

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaemg/dataio.hpp"
#include "metaemg/error.hpp"
#include "metaemg/rng.hpp"

namespace metaemg {

enum class Activation { ReLU, Tanh };

constexpr std::string_view to_token(Activation a) { return a == Activation::ReLU ? "relu" : "tanh"; }

inline Activation activation_from_token(std::string_view s) {
  if (s == "relu") return Activation::ReLU;
  if (s == "tanh") return Activation::Tanh;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

struct NetworkConfig {
  /// Input, hidden..., output widths. Default: 1600 -> 512 -> 128 -> 3.
  std::vector<std::size_t> layer_sizes{kChannels * 200, 512, 128, kIntents};
  Activation activation = Activation::ReLU;

  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t output_dim() const { return layer_sizes.back(); }
  std::size_t num_layers() const { return layer_sizes.size() - 1; }
};

inline constexpr std::string_view kFlatteningOrder = "layerwise:weights-colmajor(out,in),bias";

/// Flat parameter (or gradient) vector with per-layer views.
class ParamVector {
 public:
  ParamVector() = default;

  explicit ParamVector(std::vector<std::size_t> layer_sizes) : sizes_(std::move(layer_sizes)) {
    if (sizes_.size() < 2) throw ShapeError("a network needs at least one layer");
    offsets_.push_back(0);
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l)
      offsets_.push_back(offsets_.back() + sizes_[l + 1] * sizes_[l] + sizes_[l + 1]);
    data_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(offsets_.back()));
  }

  static ParamVector unflatten(std::vector<std::size_t> layer_sizes, std::span<const double> flat) {
    ParamVector p(std::move(layer_sizes));
    if (flat.size() != p.size())
      throw ShapeError("unflatten: expected " + std::to_string(p.size()) + " values, got " +
                       std::to_string(flat.size()));
    std::copy(flat.begin(), flat.end(), p.data_.data());
    return p;
  }

  std::vector<double> flatten() const { return {data_.data(), data_.data() + data_.size()}; }

  std::size_t size() const { return static_cast<std::size_t>(data_.size()); }
  std::size_t num_layers() const { return sizes_.empty() ? 0 : sizes_.size() - 1; }
  const std::vector<std::size_t>& layer_sizes() const { return sizes_; }

  Eigen::Map<Eigen::MatrixXd> weights(std::size_t l) {
    return {data_.data() + offsets_[l], rows(l), cols(l)};
  }
  Eigen::Map<const Eigen::MatrixXd> weights(std::size_t l) const {
    return {data_.data() + offsets_[l], rows(l), cols(l)};
  }
  Eigen::Map<Eigen::VectorXd> bias(std::size_t l) {
    return {data_.data() + offsets_[l] + rows(l) * cols(l), rows(l)};
  }
  Eigen::Map<const Eigen::VectorXd> bias(std::size_t l) const {
    return {data_.data() + offsets_[l] + rows(l) * cols(l), rows(l)};
  }

  Eigen::VectorXd& flat() { return data_; }
  const Eigen::VectorXd& flat() const { return data_; }
  double& operator[](std::size_t i) { return data_[static_cast<Eigen::Index>(i)]; }
  double operator[](std::size_t i) const { return data_[static_cast<Eigen::Index>(i)]; }

  bool same_shape(const ParamVector& o) const { return sizes_ == o.sizes_; }

  ParamVector& operator+=(const ParamVector& o) {
    require_shape(o);
    data_ += o.data_;
    return *this;
  }
  ParamVector& operator-=(const ParamVector& o) {
    require_shape(o);
    data_ -= o.data_;
    return *this;
  }
  ParamVector& operator*=(double s) {
    data_ *= s;
    return *this;
  }
  /// this += a * o
  ParamVector& axpy(double a, const ParamVector& o) {
    require_shape(o);
    data_.noalias() += a * o.data_;
    return *this;
  }
  friend ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
  friend ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
  friend ParamVector operator*(double s, ParamVector a) { return a *= s; }

  double dot(const ParamVector& o) const {
    require_shape(o);
    return data_.dot(o.data_);
  }

  friend bool operator==(const ParamVector& a, const ParamVector& b) {
    return a.sizes_ == b.sizes_ && a.data_ == b.data_;
  }

  void require_shape(const ParamVector& o) const {
    if (!same_shape(o)) throw ShapeError("parameter vectors have different architectures");
  }

 private:
  Eigen::Index rows(std::size_t l) const { return static_cast<Eigen::Index>(sizes_[l + 1]); }
  Eigen::Index cols(std::size_t l) const { return static_cast<Eigen::Index>(sizes_[l]); }

  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> offsets_;
  Eigen::VectorXd data_;
};

using ModelParams = ParamVector;
using GradientVector = ParamVector;

inline std::size_t parameter_count(const std::vector<std::size_t>& layer_sizes) {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) n += layer_sizes[l + 1] * (layer_sizes[l] + 1);
  return n;
}

/// Inputs as columns (input_dim x B) with integer labels.
struct Batch {
  Eigen::MatrixXd inputs;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
};

inline Batch make_batch(std::span<const WindowedSample> windows) {
  Batch b;
  if (windows.empty()) return b;
  const std::size_t dim = kChannels * windows.front().width();
  b.inputs.resize(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(windows.size()));
  b.labels.reserve(windows.size());
  for (std::size_t j = 0; j < windows.size(); ++j) {
    if (kChannels * windows[j].width() != dim) throw ShapeError("make_batch: windows of different widths");
    windows[j].flatten_into({b.inputs.col(static_cast<Eigen::Index>(j)).data(), dim});
    b.labels.push_back(static_cast<int>(windows[j].label()));
  }
  return b;
}

/// Selected columns of an existing batch.
inline Batch select_columns(const Batch& batch, std::span<const std::size_t> cols) {
  Batch b;
  b.inputs.resize(batch.inputs.rows(), static_cast<Eigen::Index>(cols.size()));
  b.labels.reserve(cols.size());
  for (std::size_t j = 0; j < cols.size(); ++j) {
    b.inputs.col(static_cast<Eigen::Index>(j)) = batch.inputs.col(static_cast<Eigen::Index>(cols[j]));
    b.labels.push_back(batch.labels[cols[j]]);
  }
  return b;
}

/// Mean of -log softmax(logits)[label] over the columns, via log-sum-exp.
inline double cross_entropy(const Eigen::MatrixXd& logits, std::span<const int> labels) {
  if (labels.empty()) throw PreconditionError("cross_entropy: empty batch");
  double total = 0.0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const auto z = logits.col(j);
    const double m = z.maxCoeff();
    const double lse = m + std::log((z.array() - m).exp().sum());
    total += lse - z[labels[static_cast<std::size_t>(j)]];
  }
  return total / static_cast<double>(labels.size());
}

/// Column-wise softmax with max subtraction.
inline Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd p(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const auto z = logits.col(j);
    p.col(j) = (z.array() - z.maxCoeff()).exp().matrix();
    p.col(j) /= p.col(j).sum();
  }
  return p;
}

inline IntentDistribution softmax(const Eigen::Vector3d& logits) {
  const Eigen::Vector3d e = (logits.array() - logits.maxCoeff()).exp();
  const double s = e.sum();
  return {e[0] / s, e[1] / s, e[2] / s};
}

class Network {
 public:
  explicit Network(NetworkConfig config = {}) : config_(std::move(config)) {
    if (config_.layer_sizes.size() < 2) throw ConfigError("network needs input and output widths");
    for (std::size_t s : config_.layer_sizes)
      if (s == 0) throw ConfigError("layer widths must be positive");
  }

  const NetworkConfig& config() const { return config_; }
  std::size_t num_layers() const { return config_.num_layers(); }
  std::size_t parameter_count() const { return metaemg::parameter_count(config_.layer_sizes); }

  ModelParams zeros() const { return ModelParams(config_.layer_sizes); }

  /// Uniform in +-sqrt(6 / (fan_in + fan_out)) per layer, zero biases.
  ModelParams init_params(std::uint64_t seed) const {
    ModelParams p = zeros();
    Rng rng(seed);
    for (std::size_t l = 0; l < num_layers(); ++l) {
      Rng layer_rng = rng.split(l);
      const double bound = init_bound(l);
      auto w = p.weights(l);
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = layer_rng.uniform(-bound, bound);
    }
    return p;
  }

  double init_bound(std::size_t layer) const {
    return std::sqrt(6.0 / static_cast<double>(config_.layer_sizes[layer] + config_.layer_sizes[layer + 1]));
  }

  /// Logits for every column of `inputs`.
  Eigen::MatrixXd forward(const ModelParams& params, const Eigen::MatrixXd& inputs) const {
    check(params, inputs);
    Eigen::MatrixXd a = inputs;
    for (std::size_t l = 0; l < num_layers(); ++l) {
      Eigen::MatrixXd z = params.weights(l) * a;
      z.colwise() += params.bias(l);
      if (l + 1 < num_layers())
        a = activate(z);
      else
        return z;
    }
    return a;
  }

  Eigen::Vector3d forward(const ModelParams& params, const WindowedSample& x) const {
    const Eigen::MatrixXd z = forward(params, Eigen::MatrixXd(x.flattened()));
    if (z.rows() != 3) throw ShapeError("intent classifier must have 3 outputs");
    return z.col(0);
  }

  IntentDistribution predict(const ModelParams& params, const WindowedSample& x) const {
    return softmax(forward(params, x));
  }

  /// Argmax class per column.
  std::vector<int> classify(const ModelParams& params, const Eigen::MatrixXd& inputs) const {
    const Eigen::MatrixXd z = forward(params, inputs);
    std::vector<int> out(static_cast<std::size_t>(z.cols()));
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      Eigen::Index best = 0;
      z.col(j).maxCoeff(&best);
      out[static_cast<std::size_t>(j)] = static_cast<int>(best);
    }
    return out;
  }

  double batch_loss(const ModelParams& params, const Batch& batch) const {
    if (batch.empty()) throw PreconditionError("batch_loss: empty batch");
    return cross_entropy(forward(params, batch.inputs), batch.labels);
  }

  double batch_loss(const ModelParams& params, std::span<const WindowedSample> windows) const {
    if (windows.empty()) throw PreconditionError("batch_loss: empty batch");
    return batch_loss(params, make_batch(windows));
  }

  /// Activations and backpropagated errors at one parameter point; reused by
  /// hvp() so a gradient step and its Hessian-vector product share one pass.
  struct Trace {
    const Eigen::MatrixXd* inputs = nullptr;
    std::vector<Eigen::MatrixXd> pre;    // z_l, l = 0..L-1
    std::vector<Eigen::MatrixXd> post;   // act(z_l) for hidden layers
    std::vector<Eigen::MatrixXd> delta;  // dLoss/dz_l
    Eigen::MatrixXd probs;
    std::vector<int> labels;
    double loss = 0.0;

    const Eigen::MatrixXd& layer_input(std::size_t l) const { return l == 0 ? *inputs : post[l - 1]; }
  };

  /// Forward and backward pass. `batch` must outlive the returned trace.
  Trace trace(const ModelParams& params, const Batch& batch, GradientVector* grad = nullptr) const {
    if (batch.empty()) throw PreconditionError("batch_gradient: empty batch");
    check(params, batch.inputs);
    const std::size_t L = num_layers();
    Trace t;
    t.inputs = &batch.inputs;
    t.labels = batch.labels;
    t.pre.resize(L);
    t.post.resize(L - 1);
    t.delta.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
      t.pre[l].noalias() = params.weights(l) * t.layer_input(l);
      t.pre[l].colwise() += params.bias(l);
      if (l + 1 < L) t.post[l] = activate(t.pre[l]);
    }
    t.loss = cross_entropy(t.pre[L - 1], batch.labels);
    t.probs = softmax_columns(t.pre[L - 1]);
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    t.delta[L - 1] = t.probs;
    for (std::size_t j = 0; j < batch.size(); ++j)
      t.delta[L - 1](batch.labels[j], static_cast<Eigen::Index>(j)) -= 1.0;
    t.delta[L - 1] *= inv_b;
    for (std::size_t l = L - 1; l > 0; --l) {
      t.delta[l - 1].noalias() = params.weights(l).transpose() * t.delta[l];
      t.delta[l - 1].array() *= activation_slope(t.pre[l - 1], t.post[l - 1]).array();
    }
    if (grad) {
      *grad = zeros();
      for (std::size_t l = 0; l < L; ++l) {
        grad->weights(l).noalias() = t.delta[l] * t.layer_input(l).transpose();
        grad->bias(l) = t.delta[l].rowwise().sum();
      }
    }
    return t;
  }

  GradientVector batch_gradient(const ModelParams& params, const Batch& batch) const {
    GradientVector g;
    trace(params, batch, &g);
    return g;
  }

  GradientVector batch_gradient(const ModelParams& params, std::span<const WindowedSample> windows) const {
    if (windows.empty()) throw PreconditionError("batch_gradient: empty batch");
    return batch_gradient(params, make_batch(windows));
  }

  /// Hessian of the mean loss at the traced point times `v`, by Pearlmutter's
  /// R-operator (forward-mode directional derivative of the backward pass).
  GradientVector hvp(const ModelParams& params, const Trace& t, const ParamVector& v) const {
    params.require_shape(v);
    const std::size_t L = num_layers();
    const double inv_b = 1.0 / static_cast<double>(t.labels.size());

    // R{z_l}, R{a_l}
    std::vector<Eigen::MatrixXd> r_pre(L), r_post(L - 1);
    for (std::size_t l = 0; l < L; ++l) {
      r_pre[l].noalias() = v.weights(l) * t.layer_input(l);
      if (l > 0) r_pre[l].noalias() += params.weights(l) * r_post[l - 1];
      r_pre[l].colwise() += v.bias(l);
      if (l + 1 < L) r_post[l] = activation_slope(t.pre[l], t.post[l]).cwiseProduct(r_pre[l]);
    }

    // R{delta_L} = J_softmax R{z_L} / B
    Eigen::MatrixXd r_delta = t.probs.cwiseProduct(r_pre[L - 1]);
    const Eigen::RowVectorXd weighted = r_delta.colwise().sum();
    r_delta -= t.probs * weighted.asDiagonal();
    r_delta *= inv_b;

    GradientVector hv = zeros();
    for (std::size_t l = L; l-- > 0;) {
      hv.weights(l).noalias() = r_delta * t.layer_input(l).transpose();
      if (l > 0) hv.weights(l).noalias() += t.delta[l] * r_post[l - 1].transpose();
      hv.bias(l) = r_delta.rowwise().sum();
      if (l == 0) break;
      Eigen::MatrixXd r_err = v.weights(l).transpose() * t.delta[l];
      r_err.noalias() += params.weights(l).transpose() * r_delta;
      Eigen::MatrixXd next = r_err.cwiseProduct(activation_slope(t.pre[l - 1], t.post[l - 1]));
      if (config_.activation == Activation::Tanh) {
        // d/dz of tanh'(z) = -2 a (1 - a^2)
        Eigen::MatrixXd err = params.weights(l).transpose() * t.delta[l];
        const auto& a = t.post[l - 1];
        const Eigen::ArrayXXd curvature = -2.0 * a.array() * (1.0 - a.array().square());
        next.array() += err.array() * curvature * r_pre[l - 1].array();
      }
      r_delta = std::move(next);
    }
    return hv;
  }

  GradientVector hvp(const ModelParams& params, const Batch& batch, const ParamVector& v) const {
    return hvp(params, trace(params, batch), v);
  }

 private:
  Eigen::MatrixXd activate(const Eigen::MatrixXd& z) const {
    if (config_.activation == Activation::ReLU) return z.cwiseMax(0.0);
    return z.array().tanh().matrix();
  }

  Eigen::MatrixXd activation_slope(const Eigen::MatrixXd& z, const Eigen::MatrixXd& a) const {
    if (config_.activation == Activation::ReLU) return (z.array() > 0.0).cast<double>().matrix();
    return (1.0 - a.array().square()).matrix();
  }

  void check(const ModelParams& params, const Eigen::MatrixXd& inputs) const {
    if (params.layer_sizes() != config_.layer_sizes) throw ShapeError("parameters do not match network");
    if (static_cast<std::size_t>(inputs.rows()) != config_.input_dim())
      throw ShapeError("input has " + std::to_string(inputs.rows()) + " entries, network expects " +
                       std::to_string(config_.input_dim()));
  }

  NetworkConfig config_;
};

/// Central differences (f(x + h e_j) - f(x - h e_j)) / 2h on selected
/// coordinates (all when `coords` is empty); other entries stay zero.
template <typename LossFn>
ParamVector central_difference(const ParamVector& at, LossFn&& loss, double h,
                               std::span<const std::size_t> coords = {}) {
  if (!(h > 0.0)) throw PreconditionError("finite-difference step must be positive");
  ParamVector out(at.layer_sizes());
  ParamVector probe = at;
  auto one = [&](std::size_t j) {
    const double orig = probe[j];
    probe[j] = orig + h;
    const double up = loss(probe);
    probe[j] = orig - h;
    const double down = loss(probe);
    probe[j] = orig;
    out[j] = (up - down) / (2.0 * h);
  };
  if (coords.empty())
    for (std::size_t j = 0; j < at.size(); ++j) one(j);
  else
    for (std::size_t j : coords) one(j);
  return out;
}

inline GradientVector fd_gradient(const Network& net, const ModelParams& params, const Batch& batch, double h,
                                  std::span<const std::size_t> coords = {}) {
  return central_difference(params, [&](const ModelParams& p) { return net.batch_loss(p, batch); }, h, coords);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  ParamVector m;
  ParamVector v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  explicit AdamState(const ParamVector& like) : m(like.layer_sizes()), v(like.layer_sizes()) {}
};

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(AdamState& state, ModelParams& params, const GradientVector& grad, double lr) {
  params.require_shape(grad);
  if (!state.m.same_shape(params) || !state.v.same_shape(params))
    throw ShapeError("Adam state does not match parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  auto m = state.m.flat().array();
  auto v = state.v.flat().array();
  const auto g = grad.flat().array();
  m = state.beta1 * m + (1.0 - state.beta1) * g;
  v = state.beta2 * v + (1.0 - state.beta2) * g.square();
  params.flat().array() -= lr * (m / c1) / ((v / c2).sqrt() + state.eps);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "MEMGCKPT" | u32 version | u64 header length | JSON header | u64 count |
// count little-endian IEEE-754 doubles
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'M', 'E', 'M', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  NetworkConfig network;
  ModelParams params;
  nlohmann::json metadata = nlohmann::json::object();
};

namespace detail {
template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");
  out.write(reinterpret_cast<const char*>(&value), sizeof value);
}
template <typename T>
T read_le(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof value);
  if (!in) throw Error("truncated checkpoint");
  return value;
}
}  // namespace detail

inline void write_checkpoint(const Checkpoint& ck, const std::string& path) {
  if (ck.params.layer_sizes() != ck.network.layer_sizes) throw ShapeError("checkpoint params do not match config");
  nlohmann::json header = {{"layer_sizes", ck.network.layer_sizes},
                           {"activation", to_token(ck.network.activation)},
                           {"flattening", kFlatteningOrder},
                           {"metadata", ck.metadata}};
  const std::string h = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path);
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::write_le<std::uint32_t>(out, kCheckpointVersion);
  detail::write_le<std::uint64_t>(out, h.size());
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  detail::write_le<std::uint64_t>(out, ck.params.size());
  out.write(reinterpret_cast<const char*>(ck.params.flat().data()),
            static_cast<std::streamsize>(ck.params.size() * sizeof(double)));
  if (!out) throw Error("write failed: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path);
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw Error(path + ": not a checkpoint");
  if (detail::read_le<std::uint32_t>(in) != kCheckpointVersion) throw Error(path + ": unsupported version");
  std::string h(detail::read_le<std::uint64_t>(in), '\0');
  in.read(h.data(), static_cast<std::streamsize>(h.size()));
  const auto header = nlohmann::json::parse(h);
  if (header.at("flattening").get<std::string>() != kFlatteningOrder) throw Error(path + ": unknown flattening order");
  Checkpoint ck;
  ck.network.layer_sizes = header.at("layer_sizes").get<std::vector<std::size_t>>();
  ck.network.activation = activation_from_token(header.at("activation").get<std::string>());
  ck.metadata = header.value("metadata", nlohmann::json::object());
  const auto count = detail::read_le<std::uint64_t>(in);
  if (count != parameter_count(ck.network.layer_sizes)) throw Error(path + ": parameter count mismatch");
  ck.params = ModelParams(ck.network.layer_sizes);
  in.read(reinterpret_cast<char*>(ck.params.flat().data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw Error(path + ": truncated parameter block");
  return ck;
}

}  // namespace metaemg
