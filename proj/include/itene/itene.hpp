#pragma once

// Intrinsic transfer entropy estimation.
//
// The target past y- is passed through a reparameterized Gaussian channel
//
//   ybar = mu_phi(y-) + sigma_phi(y-) * eps,   eps ~ N(0, I),
//
// and phi is trained to minimize I(X-; Y0, Ybar) - I(X-; Ybar), alternating
// classifier refits with pathwise gradient steps on phi. The smallest value of
// the smoothed objective is the ITE estimate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "itene/errors.hpp"
#include "itene/mine.hpp"
#include "itene/nn.hpp"
#include "itene/random.hpp"
#include "itene/series.hpp"
#include "itene/te.hpp"

namespace itene {

// Network outputs rows [0, n) are the mean head, rows [n, 2n) the raw log std.
struct ReparamChannel {
  DenseNetParams net;
  // mu(y-) = y- + head(y-) when set, head(y-) otherwise.
  bool identity_skip = true;
  double log_std_floor = -6.0;
  double log_std_ceiling = 2.0;

  int width() const { return net.input_width(); }

  void validate() const {
    net.validate();
    if (net.output_kind != OutputKind::mean_and_logstd || net.output_width() != 2 * net.input_width()) {
      throw ShapeError("channel network must map n inputs to n means and n log stds");
    }
    if (!(log_std_floor < log_std_ceiling)) throw ConfigError("log std floor must be below the ceiling");
  }
};

inline std::vector<int> channel_layers(int n, const std::vector<int>& hidden) {
  std::vector<int> sizes{n};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(2 * n);
  return sizes;
}

// Starts near the identity map: small output weights on top of the skip
// connection and log sigma biased to `initial_log_std`.
inline ReparamChannel make_channel(int n, const std::vector<int>& hidden, std::uint64_t seed,
                                   double initial_log_std = -3.0, double head_scale = 0.01) {
  if (n < 1) throw ConfigError("channel width must be positive");
  ReparamChannel c;
  c.net = init_network(channel_layers(n, hidden), OutputKind::mean_and_logstd, seed);
  c.net.weights.back() *= head_scale;
  c.net.biases.back().tail(n).setConstant(initial_log_std);
  c.validate();
  return c;
}

// All weights zero: ybar = mean + exp(log_std) * eps for every input, plus y-
// when identity_skip is set.
inline ReparamChannel make_constant_channel(int n, const std::vector<int>& hidden, bool identity_skip, double mean,
                                            double log_std) {
  ReparamChannel c;
  c.net = init_network(channel_layers(n, hidden), OutputKind::mean_and_logstd, 0);
  c.net.set_zero();
  c.net.biases.back().head(n).setConstant(mean);
  c.net.biases.back().tail(n).setConstant(log_std);
  c.identity_skip = identity_skip;
  c.validate();
  return c;
}

// mu = identity, sigma at the floor: ybar differs from y- by e^-6 * eps.
inline ReparamChannel make_identity_channel(int n, const std::vector<int>& hidden = {200}) {
  ReparamChannel c = make_constant_channel(n, hidden, true, 0.0, -6.0);
  return c;
}

struct NoiseBatch {
  Matrix epsilon;  // n x T, i.i.d. N(0, 1)
  std::uint64_t seed = 0;
};

inline NoiseBatch make_noise(int n, std::size_t rows, std::uint64_t seed) {
  NoiseBatch b;
  b.seed = seed;
  b.epsilon.resize(n, static_cast<Eigen::Index>(rows));
  Rng rng(seed);
  std::normal_distribution<double> normal;
  for (Eigen::Index i = 0; i < b.epsilon.size(); ++i) b.epsilon.data()[i] = normal(rng);
  return b;
}

struct ChannelPass {
  Matrix bar_y;
  Matrix std;
  // 1 where the raw log std lies inside [floor, ceiling], 0 where clamped.
  Matrix log_std_active;
  ForwardTape tape;
};

inline ChannelPass channel_forward(const ReparamChannel& channel, const Matrix& y_minus, const NoiseBatch& noise) {
  const Eigen::Index n = channel.width();
  if (y_minus.rows() != n || noise.epsilon.rows() != n || noise.epsilon.cols() != y_minus.cols()) {
    throw ShapeError("channel, target past and noise dimensions disagree");
  }
  ChannelPass pass;
  pass.tape = forward_tape(channel.net, y_minus);
  const auto raw_log_std = pass.tape.output.bottomRows(n).array();
  const Eigen::ArrayXXd log_std = raw_log_std.max(channel.log_std_floor).min(channel.log_std_ceiling);
  pass.log_std_active =
      ((raw_log_std >= channel.log_std_floor) && (raw_log_std <= channel.log_std_ceiling)).cast<double>().matrix();
  pass.std = log_std.exp().matrix();
  pass.bar_y = pass.tape.output.topRows(n);
  if (channel.identity_skip) pass.bar_y += y_minus;
  pass.bar_y.array() += pass.std.array() * noise.epsilon.array();
  if (!pass.bar_y.allFinite()) throw NumericError("channel output is not finite");
  return pass;
}

inline Matrix sample_bar_y(const ReparamChannel& channel, const Matrix& y_minus, const NoiseBatch& noise) {
  return channel_forward(channel, y_minus, noise).bar_y;
}

// Pulls dL/d(ybar) back to the channel parameters:
// d mu = g, d log sigma = g * sigma * eps (zero where log sigma is clamped).
inline Gradient channel_backward(const ReparamChannel& channel, const ChannelPass& pass, const NoiseBatch& noise,
                                 const Matrix& bar_y_grad) {
  const Eigen::Index n = channel.width();
  Matrix out_grad(2 * n, bar_y_grad.cols());
  out_grad.topRows(n) = bar_y_grad;
  out_grad.bottomRows(n) =
      (bar_y_grad.array() * pass.std.array() * noise.epsilon.array() * pass.log_std_active.array()).matrix();
  return backward(channel.net, pass.tape, out_grad).params;
}

// Which sub-estimate a classifier belongs to: A sees (x-, y0, ybar), B sees (x-, ybar).
enum class PhiTerm { a, b };

// How the product term of the pathwise gradient is normalized.
//   unclipped_denominator: E[grad r * J] / E[r]; rows outside the clip band
//     contribute no gradient to the numerator.
//   exact: derivative of log E[clip(r)], i.e. the clipped mean in the
//     denominator. Matches finite differences of the estimate itself.
enum class ProductGradient { unclipped_denominator, exact };

inline const char* to_string(ProductGradient g) {
  return g == ProductGradient::exact ? "exact" : "unclipped_denominator";
}

// Held-out rows used to evaluate one sub-estimate as a function of phi.
struct EvalRows {
  std::vector<std::size_t> joint;
  ProductPairs product;

  static EvalRows from(const MineDesign& d) { return {d.eval_joint, d.eval_product}; }
};

struct PhiTermResult {
  MiEstimate estimate;  // classifier field left empty
  Matrix bar_y_grad;    // d(estimate)/d(ybar), n x T; empty unless requested
  double max_ratio = 0.0;
  double min_one_minus_p = 1.0;
};

namespace detail {

inline Matrix phi_inputs(PhiTerm term, const EmbeddedDataset& data, const Matrix& bar_y,
                         const std::vector<std::size_t>& u_idx, const std::vector<std::size_t>& v_idx) {
  const Eigen::Index m = data.x_minus.rows();
  const Eigen::Index n = bar_y.rows();
  const Eigen::Index off = term == PhiTerm::a ? m + 1 : m;
  Matrix x(off + n, static_cast<Eigen::Index>(u_idx.size()));
  for (std::size_t k = 0; k < u_idx.size(); ++k) {
    const auto c = static_cast<Eigen::Index>(k);
    const auto u = static_cast<Eigen::Index>(u_idx[k]);
    const auto v = static_cast<Eigen::Index>(v_idx[k]);
    x.col(c).head(m) = data.x_minus.col(u);
    if (term == PhiTerm::a) x(m, c) = data.y0(0, v);
    x.col(c).tail(n) = bar_y.col(v);
  }
  return x;
}

}  // namespace detail

// The phi-dependent sub-estimate on held-out rows (joint term with unclipped
// odds, product term with clipped odds), optionally with its gradient with
// respect to every ybar column.
inline PhiTermResult evaluate_phi_term(PhiTerm term, const EmbeddedDataset& data, const Matrix& bar_y,
                                       const DenseNetParams& classifier, const EvalRows& rows, double tau,
                                       bool want_grad, ProductGradient mode = ProductGradient::exact) {
  if (rows.joint.empty() || rows.product.size() == 0) throw ConfigError("evaluation rows must be nonempty");
  if (bar_y.cols() != static_cast<Eigen::Index>(data.rows()) || bar_y.rows() != data.y_minus.rows()) {
    throw ShapeError("ybar does not match the embedded dataset");
  }
  const Eigen::Index n = bar_y.rows();
  const Eigen::Index off = (term == PhiTerm::a ? data.x_minus.rows() + 1 : data.x_minus.rows());
  PhiTermResult out;

  const Matrix xj = detail::phi_inputs(term, data, bar_y, rows.joint, rows.joint);
  const Matrix xp = detail::phi_inputs(term, data, bar_y, rows.product.u, rows.product.v);
  const ForwardTape tj = forward_tape(classifier, xj);
  const ForwardTape tp = forward_tape(classifier, xp);

  auto probs = [](const Matrix& z) {
    Vector p(z.cols());
    for (Eigen::Index i = 0; i < z.cols(); ++i) p[i] = sigmoid(z(0, i));
    return p;
  };
  const Vector pj = probs(tj.output);
  const Vector pp = probs(tp.output);
  Vector rj(pj.size()), rp(pp.size());
  for (Eigen::Index i = 0; i < pj.size(); ++i) rj[i] = odds(pj[i]);
  for (Eigen::Index i = 0; i < pp.size(); ++i) rp[i] = odds(pp[i]);
  out.estimate.value_nats = mi_from_ratios(rj, rp, tau, &out.estimate.joint_term, &out.estimate.product_term);
  out.estimate.n_eval = rows.joint.size();
  out.estimate.clip_tau = tau;
  out.max_ratio = std::max(rj.maxCoeff(), rp.maxCoeff());
  out.min_one_minus_p = std::min((1.0 - pj.array()).minCoeff(), (1.0 - pp.array()).minCoeff());
  if (!want_grad) return out;

  auto unclamped = [](double p) { return p >= kProbabilityFloor && p <= 1.0 - kProbabilityFloor; };
  // d log r / dz = 1 and d r / dz = r while p is inside the clamp band.
  const double nj = static_cast<double>(pj.size());
  Matrix dzj(1, pj.size());
  for (Eigen::Index i = 0; i < pj.size(); ++i) dzj(0, i) = unclamped(pj[i]) ? 1.0 / nj : 0.0;

  const double np = static_cast<double>(pp.size());
  const double lo = std::exp(-tau);
  const double hi = std::exp(tau);
  double denom = 0.0;
  for (Eigen::Index i = 0; i < rp.size(); ++i) denom += mode == ProductGradient::exact ? clip_ratio(rp[i], tau) : rp[i];
  denom /= np;
  Matrix dzp(1, pp.size());
  for (Eigen::Index i = 0; i < pp.size(); ++i) {
    const bool in_band = rp[i] > lo && rp[i] < hi && unclamped(pp[i]);
    dzp(0, i) = in_band ? -rp[i] / (np * denom) : 0.0;
  }

  const Matrix gj = backward(classifier, tj, dzj, false, true).inputs;
  const Matrix gp = backward(classifier, tp, dzp, false, true).inputs;
  out.bar_y_grad = Matrix::Zero(n, bar_y.cols());
  for (std::size_t k = 0; k < rows.joint.size(); ++k) {
    out.bar_y_grad.col(static_cast<Eigen::Index>(rows.joint[k])) += gj.col(static_cast<Eigen::Index>(k)).segment(off, n);
  }
  for (std::size_t k = 0; k < rows.product.size(); ++k) {
    out.bar_y_grad.col(static_cast<Eigen::Index>(rows.product.v[k])) +=
        gp.col(static_cast<Eigen::Index>(k)).segment(off, n);
  }
  if (!out.bar_y_grad.allFinite()) {
    throw NumericError("pathwise gradient is not finite (max ratio " + std::to_string(out.max_ratio) +
                       ", min 1-p " + std::to_string(out.min_one_minus_p) + ")");
  }
  return out;
}

// I_phi(X-; Y0, Ybar) on held-out rows for a fixed classifier theta.
inline double estimate_mi_a_phi(const ReparamChannel& channel, const EmbeddedDataset& data, const NoiseBatch& noise,
                                const DenseNetParams& theta, const EvalRows& rows, double tau) {
  const Matrix bar_y = sample_bar_y(channel, data.y_minus, noise);
  return evaluate_phi_term(PhiTerm::a, data, bar_y, theta, rows, tau, false).estimate.value_nats;
}

// I_phi(X-; Ybar) on held-out rows for a fixed classifier theta'.
inline double estimate_mi_b_phi(const ReparamChannel& channel, const EmbeddedDataset& data, const NoiseBatch& noise,
                                const DenseNetParams& theta_prime, const EvalRows& rows, double tau) {
  const Matrix bar_y = sample_bar_y(channel, data.y_minus, noise);
  return evaluate_phi_term(PhiTerm::b, data, bar_y, theta_prime, rows, tau, false).estimate.value_nats;
}

enum class ChannelTrainable { all, log_std_only };

struct PhiGradient {
  Gradient gradient;  // d(I_A - I_B)/d(phi)
  double mi_a = 0.0;
  double mi_b = 0.0;
  double objective = 0.0;
  double max_ratio = 0.0;
  double min_one_minus_p = 1.0;
};

// Keeps only the log-std rows of the output layer.
inline void mask_gradient(Gradient& g, int n, ChannelTrainable trainable) {
  if (trainable == ChannelTrainable::all) return;
  for (std::size_t l = 0; l + 1 < g.num_layers(); ++l) {
    g.weights[l].setZero();
    g.biases[l].setZero();
  }
  g.weights.back().topRows(n).setZero();
  g.biases.back().head(n).setZero();
}

// Pathwise gradient of I_A(phi) - I_B(phi) with theta, theta', noise and the
// evaluation rows held fixed.
inline PhiGradient pathwise_grad_phi(const ReparamChannel& channel, const EmbeddedDataset& data,
                                     const NoiseBatch& noise, const DenseNetParams& theta, const EvalRows& rows_a,
                                     const DenseNetParams& theta_prime, const EvalRows& rows_b, double tau,
                                     ProductGradient mode = ProductGradient::unclipped_denominator,
                                     ChannelTrainable trainable = ChannelTrainable::all) {
  if (noise.epsilon.cols() != static_cast<Eigen::Index>(data.rows())) {
    throw ShapeError("noise batch does not match the embedded dataset");
  }
  // Only rows referenced by the evaluation sets reach the objective; run the
  // channel on those alone and remap the indices.
  std::vector<std::size_t> touched;
  for (const EvalRows* rows : {&rows_a, &rows_b}) {
    touched.insert(touched.end(), rows->joint.begin(), rows->joint.end());
    touched.insert(touched.end(), rows->product.u.begin(), rows->product.u.end());
    touched.insert(touched.end(), rows->product.v.begin(), rows->product.v.end());
  }
  std::sort(touched.begin(), touched.end());
  touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
  std::vector<std::size_t> local(data.rows(), 0);
  for (std::size_t k = 0; k < touched.size(); ++k) local[touched[k]] = k;
  auto remap = [&](const EvalRows& rows) {
    EvalRows out = rows;
    for (auto& i : out.joint) i = local[i];
    for (auto& i : out.product.u) i = local[i];
    for (auto& i : out.product.v) i = local[i];
    return out;
  };
  EmbeddedDataset sub;
  NoiseBatch sub_noise;
  sub_noise.seed = noise.seed;
  const auto cols = static_cast<Eigen::Index>(touched.size());
  sub.x_minus.resize(data.x_minus.rows(), cols);
  sub.y0.resize(1, cols);
  sub.y_minus.resize(data.y_minus.rows(), cols);
  sub_noise.epsilon.resize(noise.epsilon.rows(), cols);
  for (Eigen::Index k = 0; k < cols; ++k) {
    const auto t = static_cast<Eigen::Index>(touched[static_cast<std::size_t>(k)]);
    sub.x_minus.col(k) = data.x_minus.col(t);
    sub.y0(0, k) = data.y0(0, t);
    sub.y_minus.col(k) = data.y_minus.col(t);
    sub_noise.epsilon.col(k) = noise.epsilon.col(t);
  }

  const ChannelPass pass = channel_forward(channel, sub.y_minus, sub_noise);
  const PhiTermResult a = evaluate_phi_term(PhiTerm::a, sub, pass.bar_y, theta, remap(rows_a), tau, true, mode);
  const PhiTermResult b =
      evaluate_phi_term(PhiTerm::b, sub, pass.bar_y, theta_prime, remap(rows_b), tau, true, mode);
  PhiGradient out;
  out.mi_a = a.estimate.value_nats;
  out.mi_b = b.estimate.value_nats;
  out.objective = out.mi_a - out.mi_b;
  out.max_ratio = std::max(a.max_ratio, b.max_ratio);
  out.min_one_minus_p = std::min(a.min_one_minus_p, b.min_one_minus_p);
  out.gradient = channel_backward(channel, pass, sub_noise, a.bar_y_grad - b.bar_y_grad);
  mask_gradient(out.gradient, channel.width(), trainable);
  if (!out.gradient.all_finite()) {
    throw NumericError("channel gradient is not finite (max ratio " + std::to_string(out.max_ratio) + ", min 1-p " +
                       std::to_string(out.min_one_minus_p) + ")");
  }
  return out;
}

struct IteneConfig {
  int outer_iterations = 20;
  int phi_steps_per_iter = 20;
  double phi_learning_rate = 1e-3;
  // Plain SGD at 1e-3 leaves phi essentially where it started within a
  // practical number of steps; Adam is the default.
  UpdateRule phi_optimizer = UpdateRule::adam;
  // Rows drawn (per class and term) for each phi step; 0 uses every held-out row.
  int phi_batch_size = 1024;
  std::vector<int> channel_hidden{200};
  double initial_log_std = -3.0;
  double log_std_floor = -6.0;
  double log_std_ceiling = 2.0;
  // Epochs for the warm-started classifier refits after the first iteration.
  int refit_epochs = 20;
  // Retrain both classifiers from scratch with the full epoch budget each iteration.
  bool cold_restart = false;
  double tolerance = 1e-4;
  int convergence_window = 5;
  int smoothing_window = 5;
  ProductGradient product_gradient = ProductGradient::unclipped_denominator;
  ChannelTrainable trainable = ChannelTrainable::all;
  // Keep phi fixed (no gradient steps).
  bool freeze_channel = false;
  // Start from make_identity_channel instead of the near-identity random init.
  bool identity_channel = false;
  MineConfig mine;
  std::uint64_t rng_seed = 0;

  void validate() const {
    mine.validate();
    if (outer_iterations < 1 || phi_steps_per_iter < 1 || refit_epochs < 1) {
      throw ConfigError("iteration and step counts must be positive");
    }
    if (convergence_window < 1 || smoothing_window < 1) throw ConfigError("windows must be positive");
    if (!(tolerance > 0.0)) throw ConfigError("tolerance must be positive");
    if (!(phi_learning_rate > 0.0)) throw ConfigError("phi learning rate must be positive");
    if (phi_batch_size < 0) throw ConfigError("phi batch size must be nonnegative");
    if (!(log_std_floor < log_std_ceiling)) throw ConfigError("log std floor must be below the ceiling");
  }
};

struct IteneTraceRow {
  int iteration = 0;
  double mi_a = 0.0;
  double mi_b = 0.0;
  double objective = 0.0;
  double smoothed = 0.0;  // trailing mean over smoothing_window (or fewer) iterations
  double mean_log_std = 0.0;
};

struct IteneResult {
  FlowEstimates flow;
  double te_mi_a = 0.0;
  double te_mi_b = 0.0;
  std::vector<IteneTraceRow> trace;
  ReparamChannel channel;
  bool converged = false;
};

namespace detail {

inline EvalRows subsample_rows(const EvalRows& rows, int batch, Rng& rng) {
  if (batch <= 0) return rows;
  EvalRows out;
  const auto pick_joint = std::min<std::size_t>(static_cast<std::size_t>(batch), rows.joint.size());
  const auto pick_product = std::min<std::size_t>(static_cast<std::size_t>(batch), rows.product.size());
  std::uniform_int_distribution<std::size_t> dj(0, rows.joint.size() - 1);
  std::uniform_int_distribution<std::size_t> dp(0, rows.product.size() - 1);
  for (std::size_t k = 0; k < pick_joint; ++k) out.joint.push_back(rows.joint[dj(rng)]);
  for (std::size_t k = 0; k < pick_product; ++k) {
    const std::size_t i = dp(rng);
    out.product.u.push_back(rows.product.u[i]);
    out.product.v.push_back(rows.product.v[i]);
  }
  return out;
}

inline double mean_log_std(const ReparamChannel& channel, const Matrix& y_minus) {
  const Matrix out = forward_batch(channel.net, y_minus);
  const auto raw = out.bottomRows(channel.width()).array();
  return raw.max(channel.log_std_floor).min(channel.log_std_ceiling).mean();
}

}  // namespace detail

// Minimum over the trajectory of the trailing moving average; plain mean
// when the trajectory is shorter than the window.
inline double min_smoothed(const std::vector<double>& values, int window) {
  if (values.empty()) throw ConfigError("empty objective trajectory");
  const auto w = static_cast<std::size_t>(window);
  if (values.size() < w) {
    double s = 0.0;
    for (double v : values) s += v;
    return s / static_cast<double>(values.size());
  }
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k = w - 1; k < values.size(); ++k) {
    double s = 0.0;
    for (std::size_t j = k + 1 - w; j <= k; ++j) s += values[j];
    best = std::min(best, s / static_cast<double>(w));
  }
  return best;
}

// Alternates classifier refits on D^A = {(x-, (y0, ybar))} and
// D^B = {(x-, ybar)} with pathwise descent steps on phi. Iteration 0 reuses
// the TE estimator's split and seeds, so a frozen identity channel reproduces
// the TE estimate.
inline IteneResult fit_itene(const EmbeddedDataset& data, const IteneConfig& cfg) {
  cfg.validate();
  const int n = static_cast<int>(data.y_minus.rows());
  const TeSeeds te_seeds = TeSeeds::derive(cfg.rng_seed);

  IteneResult result;
  const TeEstimate te = estimate_te(data, cfg.mine, te_seeds);
  result.te_mi_a = te.a.estimate.value_nats;
  result.te_mi_b = te.b.estimate.value_nats;

  ReparamChannel channel = cfg.identity_channel
                               ? make_identity_channel(n, cfg.channel_hidden)
                               : make_channel(n, cfg.channel_hidden, derive_seed(cfg.rng_seed, "itene/phi-init"),
                                              cfg.initial_log_std);
  channel.log_std_floor = cfg.log_std_floor;
  channel.log_std_ceiling = cfg.log_std_ceiling;
  OptimizerState phi_state = OptimizerState::make(cfg.phi_optimizer, cfg.phi_learning_rate, channel.net);
  Rng batch_rng(derive_seed(cfg.rng_seed, "itene/phi-batches"));

  const IndexSplit split = split_indices(data.rows(), cfg.mine.train_fraction, te_seeds.split);
  std::optional<DenseNetParams> theta, theta_prime;
  std::vector<double> objectives;

  for (int k = 0; k < cfg.outer_iterations; ++k) {
    const auto kk = static_cast<std::uint64_t>(k);
    const NoiseBatch noise = make_noise(n, data.rows(), derive_seed(cfg.rng_seed, "itene/noise", kk));
    const Matrix bar_y = sample_bar_y(channel, data.y_minus, noise);

    const MineSeeds seeds_a = k == 0 ? te_seeds.a : MineSeeds::derive(derive_seed(cfg.rng_seed, "itene/A", kk));
    const MineSeeds seeds_b = k == 0 ? te_seeds.b : MineSeeds::derive(derive_seed(cfg.rng_seed, "itene/B", kk));
    const bool full = k == 0 || cfg.cold_restart;
    const std::optional<int> epochs = full ? std::nullopt : std::optional<int>(cfg.refit_epochs);
    const MineRun run_a = run_mine(data.x_minus, stack_target(data.y0, bar_y), cfg.mine, split, seeds_a,
                                   full ? nullptr : &*theta, epochs);
    const MineRun run_b =
        run_mine(data.x_minus, bar_y, cfg.mine, split, seeds_b, full ? nullptr : &*theta_prime, epochs);
    theta = run_a.trained.params;
    theta_prime = run_b.trained.params;

    IteneTraceRow row;
    row.iteration = k;
    row.mi_a = run_a.estimate.value_nats;
    row.mi_b = run_b.estimate.value_nats;
    row.objective = row.mi_a - row.mi_b;
    objectives.push_back(row.objective);
    const auto w = std::min<std::size_t>(objectives.size(), static_cast<std::size_t>(cfg.smoothing_window));
    double s = 0.0;
    for (std::size_t j = objectives.size() - w; j < objectives.size(); ++j) s += objectives[j];
    row.smoothed = s / static_cast<double>(w);
    row.mean_log_std = detail::mean_log_std(channel, data.y_minus);
    result.trace.push_back(row);

    const auto cw = static_cast<std::size_t>(cfg.convergence_window);
    if (objectives.size() > cw && std::abs(objectives.back() - objectives[objectives.size() - 1 - cw]) < cfg.tolerance) {
      result.converged = true;
      break;
    }
    if (cfg.freeze_channel || k + 1 == cfg.outer_iterations) continue;

    const EvalRows rows_a = EvalRows::from(run_a.design);
    const EvalRows rows_b = EvalRows::from(run_b.design);
    for (int step = 0; step < cfg.phi_steps_per_iter; ++step) {
      const EvalRows ba = detail::subsample_rows(rows_a, cfg.phi_batch_size, batch_rng);
      const EvalRows bb = detail::subsample_rows(rows_b, cfg.phi_batch_size, batch_rng);
      const PhiGradient g = pathwise_grad_phi(channel, data, noise, *theta, ba, *theta_prime, bb, cfg.mine.clip_tau,
                                              cfg.product_gradient, cfg.trainable);
      optimizer_step(channel.net, g.gradient, phi_state);
    }
  }

  result.flow = FlowEstimates::from(te.te_nats, min_smoothed(objectives, cfg.smoothing_window));
  result.channel = std::move(channel);
  return result;
}

inline IteneResult fit_itene(const SeriesPair& series, const EmbeddingConfig& emb, const IteneConfig& cfg) {
  return fit_itene(embed(series, emb), cfg);
}

// Tab-separated per-iteration diagnostics.
inline void write_trace(std::ostream& os, const std::vector<IteneTraceRow>& trace) {
  const auto old = os.precision(10);
  os << "iteration\tmi_a\tmi_b\tobjective\tsmoothed\tmean_log_std\n";
  for (const auto& r : trace) {
    os << r.iteration << '\t' << r.mi_a << '\t' << r.mi_b << '\t' << r.objective << '\t' << r.smoothed << '\t'
       << r.mean_log_std << '\n';
  }
  os.precision(old);
}

}  // namespace itene
