#pragma once

// Dense feedforward networks with ELU hidden units and a linear output layer.
//
// Batches are stored column-major: an input batch is a (width x batch) matrix
// with one sample per column. All arithmetic is double precision.

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "itene/errors.hpp"
#include "itene/random.hpp"

namespace itene {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class OutputKind { logit_scalar, mean_and_logstd };

inline const char* to_string(OutputKind kind) {
  return kind == OutputKind::logit_scalar ? "logit_scalar" : "mean_and_logstd";
}

// Per-layer tensors shaped like a network's parameters. Gradients and
// optimizer moments use this type directly.
struct ParamTensors {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  std::size_t num_layers() const { return weights.size(); }

  std::size_t size() const {
    std::size_t total = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) total += weights[l].size() + biases[l].size();
    return total;
  }

  void set_zero() {
    for (auto& w : weights) w.setZero();
    for (auto& b : biases) b.setZero();
  }

  ParamTensors zeros_like() const {
    ParamTensors out = *this;
    out.set_zero();
    return out;
  }

  bool all_finite() const {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (!weights[l].allFinite() || !biases[l].allFinite()) return false;
    }
    return true;
  }

  double squared_norm() const {
    double s = 0.0;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      s += weights[l].squaredNorm() + biases[l].squaredNorm();
    }
    return s;
  }

  bool same_shape(const ParamTensors& other) const {
    if (weights.size() != other.weights.size() || biases.size() != other.biases.size()) return false;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (weights[l].rows() != other.weights[l].rows() || weights[l].cols() != other.weights[l].cols() ||
          biases[l].size() != other.biases[l].size()) {
        return false;
      }
    }
    return true;
  }

  ParamTensors& operator+=(const ParamTensors& other) {
    if (!same_shape(other)) throw ShapeError("parameter tensors differ in shape");
    for (std::size_t l = 0; l < weights.size(); ++l) {
      weights[l] += other.weights[l];
      biases[l] += other.biases[l];
    }
    return *this;
  }

  ParamTensors& operator-=(const ParamTensors& other) {
    if (!same_shape(other)) throw ShapeError("parameter tensors differ in shape");
    for (std::size_t l = 0; l < weights.size(); ++l) {
      weights[l] -= other.weights[l];
      biases[l] -= other.biases[l];
    }
    return *this;
  }

  ParamTensors& operator*=(double scale) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      weights[l] *= scale;
      biases[l] *= scale;
    }
    return *this;
  }

  // Layer by layer: weights (column-major) then biases.
  std::vector<double> flatten() const {
    std::vector<double> flat;
    flat.reserve(size());
    for (std::size_t l = 0; l < weights.size(); ++l) {
      flat.insert(flat.end(), weights[l].data(), weights[l].data() + weights[l].size());
      flat.insert(flat.end(), biases[l].data(), biases[l].data() + biases[l].size());
    }
    return flat;
  }

  void assign_flat(std::span<const double> flat) {
    if (flat.size() != size()) throw ShapeError("flat parameter vector has the wrong length");
    std::size_t pos = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      std::copy_n(flat.data() + pos, weights[l].size(), weights[l].data());
      pos += static_cast<std::size_t>(weights[l].size());
      std::copy_n(flat.data() + pos, biases[l].size(), biases[l].data());
      pos += static_cast<std::size_t>(biases[l].size());
    }
  }
};

using Gradient = ParamTensors;

// weights[l] maps layer l (width layer_sizes[l]) to layer l+1, so it has
// shape (layer_sizes[l+1] x layer_sizes[l]).
struct DenseNetParams : ParamTensors {
  std::vector<int> layer_sizes;
  OutputKind output_kind = OutputKind::logit_scalar;

  int input_width() const { return layer_sizes.front(); }
  int output_width() const { return layer_sizes.back(); }

  // Throws ShapeError when the tensors disagree with layer_sizes and
  // NumericError when an entry is not finite.
  void validate() const {
    if (layer_sizes.size() < 2) throw ShapeError("network needs at least an input and an output layer");
    if (weights.size() != layer_sizes.size() - 1 || biases.size() != weights.size()) {
      throw ShapeError("layer count does not match layer_sizes");
    }
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (weights[l].rows() != layer_sizes[l + 1] || weights[l].cols() != layer_sizes[l] ||
          biases[l].size() != layer_sizes[l + 1]) {
        throw ShapeError("layer " + std::to_string(l) + " does not match layer_sizes");
      }
    }
    if (output_kind == OutputKind::logit_scalar && output_width() != 1) {
      throw ShapeError("logit_scalar networks must have a single output");
    }
    if (output_kind == OutputKind::mean_and_logstd && output_width() % 2 != 0) {
      throw ShapeError("mean_and_logstd networks need an even output width");
    }
    if (!all_finite()) throw NumericError("network parameters contain non-finite values");
  }
};

inline double elu(double z) { return z > 0.0 ? z : std::expm1(z); }

// Derivative expressed through the activation value a = elu(z): 1 for z > 0,
// e^z = a + 1 otherwise. Both branches give 1 at z = 0.
inline double elu_slope_from_value(double a) { return a > 0.0 ? 1.0 : a + 1.0; }

// Uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
inline DenseNetParams init_network(const std::vector<int>& layer_sizes, OutputKind output_kind,
                                   std::uint64_t seed) {
  if (layer_sizes.size() < 2) throw ConfigError("layer_sizes needs at least two entries");
  for (int w : layer_sizes) {
    if (w <= 0) throw ConfigError("layer widths must be positive");
  }
  if (output_kind == OutputKind::logit_scalar && layer_sizes.back() != 1) {
    throw ConfigError("logit_scalar networks must have a single output");
  }
  if (output_kind == OutputKind::mean_and_logstd && layer_sizes.back() % 2 != 0) {
    throw ConfigError("mean_and_logstd networks need an even output width");
  }
  DenseNetParams p;
  p.layer_sizes = layer_sizes;
  p.output_kind = output_kind;
  Rng rng(seed);
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    const int fan_in = layer_sizes[l];
    const int fan_out = layer_sizes[l + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix w(fan_out, fan_in);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
    p.weights.push_back(std::move(w));
    p.biases.push_back(Vector::Zero(fan_out));
  }
  return p;
}

// Activations recorded by a forward pass, consumed by backward().
struct ForwardTape {
  // layer_inputs[l] feeds weights[l]; layer_inputs[0] is the network input.
  std::vector<Matrix> layer_inputs;
  Matrix output;
};

namespace detail {

inline void check_input(const DenseNetParams& params, Eigen::Index rows) {
  if (params.layer_sizes.empty() || rows != params.input_width()) {
    throw ShapeError("input width " + std::to_string(rows) + " does not match network input width " +
                     std::to_string(params.layer_sizes.empty() ? 0 : params.input_width()));
  }
}

inline void apply_elu(Matrix& z) {
  z = (z.array() > 0.0).select(z.array(), z.array().exp() - 1.0).matrix();
}

inline void check_output(const Matrix& out) {
  if (!out.allFinite()) throw NumericError("network output is not finite");
}

}  // namespace detail

inline ForwardTape forward_tape(const DenseNetParams& params, const Eigen::Ref<const Matrix>& inputs) {
  detail::check_input(params, inputs.rows());
  ForwardTape tape;
  const std::size_t layers = params.num_layers();
  tape.layer_inputs.reserve(layers);
  tape.layer_inputs.emplace_back(inputs);
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix z = params.weights[l] * tape.layer_inputs.back();
    z.colwise() += params.biases[l];
    if (l + 1 < layers) {
      detail::apply_elu(z);
      tape.layer_inputs.push_back(std::move(z));
    } else {
      tape.output = std::move(z);
    }
  }
  detail::check_output(tape.output);
  return tape;
}

inline Matrix forward_batch(const DenseNetParams& params, const Eigen::Ref<const Matrix>& inputs) {
  detail::check_input(params, inputs.rows());
  Matrix a = inputs;
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    Matrix z = params.weights[l] * a;
    z.colwise() += params.biases[l];
    if (l + 1 < params.num_layers()) detail::apply_elu(z);
    a = std::move(z);
  }
  detail::check_output(a);
  return a;
}

inline Vector forward(const DenseNetParams& params, std::span<const double> input) {
  Eigen::Map<const Matrix> x(input.data(), static_cast<Eigen::Index>(input.size()), 1);
  return forward_batch(params, x).col(0);
}

struct Backprop {
  Gradient params;   // empty when not requested
  Matrix inputs;     // empty when not requested
};

// Vector-Jacobian product: given dL/d(output) for every column of the batch,
// returns dL/d(params) summed over the batch and dL/d(input) per column.
inline Backprop backward(const DenseNetParams& params, const ForwardTape& tape,
                         const Eigen::Ref<const Matrix>& output_grad, bool want_params = true,
                         bool want_inputs = false) {
  if (output_grad.rows() != tape.output.rows() || output_grad.cols() != tape.output.cols()) {
    throw ShapeError("output gradient does not match the forward pass");
  }
  const std::size_t layers = params.num_layers();
  Backprop out;
  if (want_params) {
    out.params.weights.resize(layers);
    out.params.biases.resize(layers);
  }
  Matrix delta = output_grad;
  for (std::size_t l = layers; l-- > 0;) {
    const Matrix& a = tape.layer_inputs[l];
    if (want_params) {
      out.params.weights[l].noalias() = delta * a.transpose();
      out.params.biases[l] = delta.rowwise().sum();
    }
    if (l == 0 && !want_inputs) break;
    Matrix upstream = params.weights[l].transpose() * delta;
    if (l == 0) {
      out.inputs = std::move(upstream);
      break;
    }
    delta = upstream.array() * (a.array() > 0.0).select(1.0, a.array() + 1.0);
  }
  return out;
}

struct LossAndGradient {
  double loss = 0.0;
  Gradient gradient;
};

namespace detail {

// softplus(z) - a z, i.e. binary cross-entropy of sigmoid(z) against label a.
inline double bce_with_logit(double z, double label) {
  const double softplus = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
  return softplus - label * z;
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace detail

inline double sigmoid(double z) { return detail::sigmoid(z); }

inline double crossentropy_loss(const DenseNetParams& params, const Eigen::Ref<const Matrix>& inputs,
                                const Eigen::Ref<const Vector>& labels) {
  if (labels.size() != inputs.cols() || labels.size() == 0) throw ShapeError("labels do not match batch");
  const Matrix logits = forward_batch(params, inputs);
  double total = 0.0;
  for (Eigen::Index i = 0; i < labels.size(); ++i) total += detail::bce_with_logit(logits(0, i), labels[i]);
  const double loss = total / static_cast<double>(labels.size());
  if (!std::isfinite(loss)) throw NumericError("cross-entropy loss is not finite");
  return loss;
}

// Gradient of the mean binary cross-entropy between sigmoid(forward(x)) and
// the labels (which must be 0 or 1).
inline LossAndGradient grad_params_crossentropy(const DenseNetParams& params,
                                                const Eigen::Ref<const Matrix>& inputs,
                                                const Eigen::Ref<const Vector>& labels) {
  if (params.output_kind != OutputKind::logit_scalar) {
    throw ShapeError("cross-entropy needs a logit_scalar network");
  }
  if (labels.size() != inputs.cols() || labels.size() == 0) throw ShapeError("labels do not match batch");
  const ForwardTape tape = forward_tape(params, inputs);
  const double inv_n = 1.0 / static_cast<double>(labels.size());
  Matrix dz(1, labels.size());
  double total = 0.0;
  for (Eigen::Index i = 0; i < labels.size(); ++i) {
    const double z = tape.output(0, i);
    total += detail::bce_with_logit(z, labels[i]);
    dz(0, i) = (detail::sigmoid(z) - labels[i]) * inv_n;
  }
  LossAndGradient out;
  out.loss = total * inv_n;
  if (!std::isfinite(out.loss)) throw NumericError("cross-entropy loss is not finite");
  out.gradient = backward(params, tape, dz).params;
  return out;
}

// Jacobian of the network output with respect to its input, (out x in).
inline Matrix grad_input(const DenseNetParams& params, std::span<const double> input) {
  Eigen::Map<const Matrix> x(input.data(), static_cast<Eigen::Index>(input.size()), 1);
  detail::check_input(params, x.rows());
  const int out_w = params.output_width();
  // One column per output coordinate, each seeded with a unit cotangent.
  const Matrix replicated = x.replicate(1, out_w);
  const ForwardTape tape = forward_tape(params, replicated);
  const Matrix seed = Matrix::Identity(out_w, out_w);
  const Backprop bp = backward(params, tape, seed, false, true);
  return bp.inputs.transpose();
}

enum class UpdateRule { sgd, adam };

inline const char* to_string(UpdateRule rule) { return rule == UpdateRule::sgd ? "sgd" : "adam"; }

struct OptimizerState {
  UpdateRule rule = UpdateRule::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  ParamTensors first_moment;
  ParamTensors second_moment;
  std::int64_t step_count = 0;

  static OptimizerState make(UpdateRule rule, double learning_rate, const ParamTensors& like) {
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    OptimizerState s;
    s.rule = rule;
    s.learning_rate = learning_rate;
    if (rule == UpdateRule::adam) {
      s.first_moment = like.zeros_like();
      s.second_moment = like.zeros_like();
    }
    return s;
  }
};

inline void optimizer_step(ParamTensors& params, const Gradient& grad, OptimizerState& state) {
  if (!params.same_shape(grad)) throw ShapeError("gradient does not match parameters");
  ++state.step_count;
  if (state.rule == UpdateRule::sgd) {
    for (std::size_t l = 0; l < params.num_layers(); ++l) {
      params.weights[l] -= state.learning_rate * grad.weights[l];
      params.biases[l] -= state.learning_rate * grad.biases[l];
    }
  } else {
    if (!params.same_shape(state.first_moment)) throw ShapeError("optimizer state does not match parameters");
    const double t = static_cast<double>(state.step_count);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    const double step = state.learning_rate * std::sqrt(c2) / c1;
    const double eps_hat = state.epsilon * std::sqrt(c2);
    auto update = [&](auto& p, const auto& g, auto& m, auto& v) {
      m = state.beta1 * m + (1.0 - state.beta1) * g;
      v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseAbs2();
      p.array() -= step * m.array() / (v.array().sqrt() + eps_hat);
    };
    for (std::size_t l = 0; l < params.num_layers(); ++l) {
      update(params.weights[l], grad.weights[l], state.first_moment.weights[l], state.second_moment.weights[l]);
      update(params.biases[l], grad.biases[l], state.first_moment.biases[l], state.second_moment.biases[l]);
    }
  }
  if (!params.all_finite()) throw NumericError("optimizer step produced non-finite parameters");
}

// Checkpoint format, version 1 (text, one token stream):
//   itene-net 1
//   output_kind <logit_scalar|mean_and_logstd>
//   layers <count> <width>...
//   then per layer: "W <rows> <cols>" followed by row-major values and
//   "b <rows>" followed by the bias values; %.17g so reloads are exact.
inline void write_params(std::ostream& os, const DenseNetParams& params) {
  params.validate();
  const auto old_precision = os.precision(17);
  os << "itene-net 1\n";
  os << "output_kind " << to_string(params.output_kind) << '\n';
  os << "layers " << params.layer_sizes.size();
  for (int w : params.layer_sizes) os << ' ' << w;
  os << '\n';
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    const Matrix& w = params.weights[l];
    os << "W " << w.rows() << ' ' << w.cols() << '\n';
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) os << (c ? " " : "") << w(r, c);
      os << '\n';
    }
    os << "b " << params.biases[l].size() << '\n';
    for (Eigen::Index r = 0; r < params.biases[l].size(); ++r) os << (r ? " " : "") << params.biases[l][r];
    os << '\n';
  }
  os.precision(old_precision);
}

inline DenseNetParams read_params(std::istream& is) {
  auto expect = [&](const std::string& token) {
    std::string got;
    if (!(is >> got) || got != token) throw InputError("checkpoint: expected '" + token + "'");
  };
  expect("itene-net");
  int version = 0;
  if (!(is >> version) || version != 1) throw InputError("checkpoint: unsupported version");
  expect("output_kind");
  std::string kind;
  is >> kind;
  DenseNetParams p;
  if (kind == "logit_scalar") {
    p.output_kind = OutputKind::logit_scalar;
  } else if (kind == "mean_and_logstd") {
    p.output_kind = OutputKind::mean_and_logstd;
  } else {
    throw InputError("checkpoint: unknown output kind '" + kind + "'");
  }
  expect("layers");
  std::size_t count = 0;
  if (!(is >> count) || count < 2) throw InputError("checkpoint: bad layer count");
  p.layer_sizes.resize(count);
  for (int& w : p.layer_sizes) {
    if (!(is >> w) || w <= 0) throw InputError("checkpoint: bad layer width");
  }
  for (std::size_t l = 0; l + 1 < count; ++l) {
    expect("W");
    Eigen::Index rows = 0, cols = 0;
    is >> rows >> cols;
    if (rows != p.layer_sizes[l + 1] || cols != p.layer_sizes[l]) throw InputError("checkpoint: weight shape");
    Matrix w(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) {
        if (!(is >> w(r, c))) throw InputError("checkpoint: truncated weights");
      }
    }
    expect("b");
    Eigen::Index n = 0;
    is >> n;
    if (n != rows) throw InputError("checkpoint: bias shape");
    Vector b(n);
    for (Eigen::Index r = 0; r < n; ++r) {
      if (!(is >> b[r])) throw InputError("checkpoint: truncated biases");
    }
    p.weights.push_back(std::move(w));
    p.biases.push_back(std::move(b));
  }
  p.validate();
  return p;
}

}  // namespace itene
