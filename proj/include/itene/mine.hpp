#pragma once

// Classifier-based mutual information estimation.
//
// A network is trained to tell joint samples (u_t, v_t) from product samples
// (u_n, v_pi(n)). Its odds p / (1 - p) estimate the density ratio
// p(u, v) / (p(u) p(v)), and the held-out estimate is
//
//   I = mean_joint log r - log mean_product clip_tau(r)
//
// in nats, with clip_tau(r) = max(min(r, e^tau), e^-tau).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "itene/errors.hpp"
#include "itene/nn.hpp"
#include "itene/random.hpp"

namespace itene {

// Classifier probabilities are clamped to this band before forming odds.
inline constexpr double kProbabilityFloor = 1e-6;

enum class SampleLabel { product = 0, joint = 1 };

// Samples are stored as columns: u is (du x N), v is (dv x N).
struct PairDataset {
  Matrix u;
  Matrix v;
  SampleLabel label = SampleLabel::joint;

  std::size_t size() const { return static_cast<std::size_t>(u.cols()); }

  void validate() const {
    if (u.cols() != v.cols()) throw ShapeError("u and v hold different sample counts");
  }

  // Stacked classifier input, (du + dv) x N.
  Matrix stacked() const {
    Matrix x(u.rows() + v.rows(), u.cols());
    x.topRows(u.rows()) = u;
    x.bottomRows(v.rows()) = v;
    return x;
  }
};

struct MineConfig {
  std::vector<int> hidden_widths{100, 100};
  double clip_tau = 0.9;
  double learning_rate = 1e-3;
  double train_fraction = 0.75;
  int epochs = 200;
  int batch_size = 256;
  // Stop when the epoch loss improved by less than this over `patience` epochs.
  double early_stop_tolerance = 1e-5;
  int early_stop_patience = 10;
  UpdateRule optimizer = UpdateRule::adam;
  // Draw the held-out product rows from held-out indices only.
  bool coupled_split = true;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0, 1)");
    if (!(clip_tau >= 0.0)) throw ConfigError("clip_tau must be nonnegative");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (epochs < 0) throw ConfigError("epochs must be nonnegative");
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (early_stop_patience <= 0) throw ConfigError("early_stop_patience must be positive");
    for (int w : hidden_widths) {
      if (w <= 0) throw ConfigError("hidden widths must be positive");
    }
  }
};

// Independent streams used by one run of the estimator.
struct MineSeeds {
  std::uint64_t split = 0;
  std::uint64_t resample = 0;
  std::uint64_t init = 0;
  std::uint64_t shuffle = 0;

  static MineSeeds derive(std::uint64_t seed) {
    return {derive_seed(seed, "split"), derive_seed(seed, "resample"), derive_seed(seed, "init"),
            derive_seed(seed, "shuffle")};
  }
};

// pi(n) drawn i.i.d. uniformly (with replacement) from `pool`, one per entry
// of `rows`; rows[k] keeps its u and takes v from pool[pi].
struct ProductPairs {
  std::vector<std::size_t> u;
  std::vector<std::size_t> v;

  std::size_t size() const { return u.size(); }
};

inline ProductPairs draw_product_pairs(const std::vector<std::size_t>& rows, const std::vector<std::size_t>& pool,
                                       std::uint64_t seed) {
  if (rows.empty() || pool.empty()) throw ConfigError("cannot resample an empty dataset");
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  ProductPairs out;
  out.u = rows;
  out.v.reserve(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) out.v.push_back(pool[pick(rng)]);
  return out;
}

inline std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

inline PairDataset gather(const Matrix& u, const Matrix& v, const std::vector<std::size_t>& u_idx,
                          const std::vector<std::size_t>& v_idx, SampleLabel label) {
  PairDataset out;
  out.label = label;
  out.u.resize(u.rows(), static_cast<Eigen::Index>(u_idx.size()));
  out.v.resize(v.rows(), static_cast<Eigen::Index>(v_idx.size()));
  for (std::size_t k = 0; k < u_idx.size(); ++k) out.u.col(static_cast<Eigen::Index>(k)) = u.col(static_cast<Eigen::Index>(u_idx[k]));
  for (std::size_t k = 0; k < v_idx.size(); ++k) out.v.col(static_cast<Eigen::Index>(k)) = v.col(static_cast<Eigen::Index>(v_idx[k]));
  return out;
}

inline PairDataset select_rows(const PairDataset& data, const std::vector<std::size_t>& idx) {
  return gather(data.u, data.v, idx, idx, data.label);
}

// {(u_n, v_pi(n))}, pi(n) uniform on {1..T} with replacement.
inline PairDataset resample_product(const PairDataset& joint, std::uint64_t seed) {
  joint.validate();
  if (joint.size() == 0) throw ConfigError("cannot resample an empty dataset");
  const auto all = iota_indices(joint.size());
  const ProductPairs pairs = draw_product_pairs(all, all, seed);
  return gather(joint.u, joint.v, pairs.u, pairs.v, SampleLabel::product);
}

struct IndexSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> eval;
};

// Random partition with |train| = round(fraction * n); both index lists are
// returned in ascending order.
inline IndexSplit split_indices(std::size_t n, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0, 1)");
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  if (n < 2 || n_train == 0 || n_train >= n) {
    throw ConfigError("split of " + std::to_string(n) + " rows leaves an empty side");
  }
  auto idx = iota_indices(n);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  IndexSplit s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.eval.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.eval.begin(), s.eval.end());
  return s;
}

inline std::pair<PairDataset, PairDataset> split_train_eval(const PairDataset& data, double train_fraction,
                                                            std::uint64_t seed) {
  const IndexSplit s = split_indices(data.size(), train_fraction, seed);
  return {select_rows(data, s.train), select_rows(data, s.eval)};
}

// Which rows of a T-row joint sample enter training and evaluation, for both
// classes. Joint rows are plain indices; product rows are (u, v) index pairs.
struct MineDesign {
  std::vector<std::size_t> train_joint;
  ProductPairs train_product;
  std::vector<std::size_t> eval_joint;
  ProductPairs eval_product;
};

// Coupled: one index split; each side's product rows resample v within that
// side. Uncoupled (the literal two-split procedure): resample over all T rows,
// then split the joint and product sets with independent partitions.
inline MineDesign make_design(std::size_t n, const MineConfig& cfg, const IndexSplit& split,
                              std::uint64_t resample_seed) {
  MineDesign d;
  d.train_joint = split.train;
  d.eval_joint = split.eval;
  if (cfg.coupled_split) {
    d.train_product = draw_product_pairs(split.train, split.train, derive_seed(resample_seed, "train"));
    d.eval_product = draw_product_pairs(split.eval, split.eval, derive_seed(resample_seed, "eval"));
  } else {
    const auto all = iota_indices(n);
    const ProductPairs product = draw_product_pairs(all, all, resample_seed);
    const IndexSplit ps = split_indices(n, cfg.train_fraction, derive_seed(resample_seed, "product-split"));
    for (std::size_t k : ps.train) {
      d.train_product.u.push_back(product.u[k]);
      d.train_product.v.push_back(product.v[k]);
    }
    for (std::size_t k : ps.eval) {
      d.eval_product.u.push_back(product.u[k]);
      d.eval_product.v.push_back(product.v[k]);
    }
  }
  return d;
}

struct TrainedClassifier {
  DenseNetParams params;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int epochs_run = 0;
};

inline std::vector<int> classifier_layers(int input_width, const std::vector<int>& hidden) {
  std::vector<int> sizes{input_width};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(1);
  return sizes;
}

struct TrainOptions {
  std::uint64_t init_seed = 0;
  std::uint64_t shuffle_seed = 0;
  // Continue from these parameters instead of a fresh initialization.
  const DenseNetParams* warm_start = nullptr;
  // Overrides MineConfig::epochs.
  std::optional<int> epochs;
};

// Minibatch minimization of the binary cross-entropy of sigmoid(forward(.))
// over the joint (label 1) and product (label 0) rows.
inline TrainedClassifier train_classifier(const PairDataset& joint, const PairDataset& product, const MineConfig& cfg,
                                          const TrainOptions& opts) {
  cfg.validate();
  joint.validate();
  product.validate();
  if (joint.size() == 0 || product.size() == 0) throw ConfigError("both classes need training rows");
  if (joint.u.rows() != product.u.rows() || joint.v.rows() != product.v.rows()) {
    throw ShapeError("joint and product rows differ in dimension");
  }
  const Eigen::Index dim = joint.u.rows() + joint.v.rows();
  const Eigen::Index n_joint = static_cast<Eigen::Index>(joint.size());
  const Eigen::Index n = n_joint + static_cast<Eigen::Index>(product.size());
  Matrix x(dim, n);
  x.leftCols(n_joint) = joint.stacked();
  x.rightCols(n - n_joint) = product.stacked();
  Vector labels(n);
  labels.head(n_joint).setOnes();
  labels.tail(n - n_joint).setZero();

  TrainedClassifier out;
  if (opts.warm_start) {
    out.params = *opts.warm_start;
    if (out.params.input_width() != dim) throw ShapeError("warm-start classifier has the wrong input width");
  } else {
    out.params = init_network(classifier_layers(static_cast<int>(dim), cfg.hidden_widths), OutputKind::logit_scalar,
                              opts.init_seed);
  }
  out.initial_loss = crossentropy_loss(out.params, x, labels);

  const int epochs = opts.epochs.value_or(cfg.epochs);
  OptimizerState state = OptimizerState::make(cfg.optimizer, cfg.learning_rate, out.params);
  Rng rng(opts.shuffle_seed);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const Eigen::Index batch = std::min<Eigen::Index>(cfg.batch_size, n);
  Matrix xb(dim, batch);
  Vector yb(batch);
  std::vector<double> history;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (Eigen::Index start = 0; start < n; start += batch) {
      const Eigen::Index len = std::min(batch, n - start);
      if (xb.cols() != len) {
        xb.resize(dim, len);
        yb.resize(len);
      }
      for (Eigen::Index k = 0; k < len; ++k) {
        const Eigen::Index col = order[static_cast<std::size_t>(start + k)];
        xb.col(k) = x.col(col);
        yb[k] = labels[col];
      }
      LossAndGradient lg;
      try {
        lg = grad_params_crossentropy(out.params, xb, yb);
        optimizer_step(out.params, lg.gradient, state);
      } catch (const NumericError& e) {
        throw NumericError(std::string("classifier training diverged at epoch ") + std::to_string(epoch) + ": " +
                               e.what(),
                           epoch);
      }
      epoch_loss += lg.loss * static_cast<double>(len);
    }
    epoch_loss /= static_cast<double>(n);
    out.epochs_run = epoch + 1;
    history.push_back(epoch_loss);
    const auto p = static_cast<std::size_t>(cfg.early_stop_patience);
    if (history.size() > p) {
      const double before = history[history.size() - 1 - p];
      const double best_recent = *std::min_element(history.end() - static_cast<std::ptrdiff_t>(p), history.end());
      if (before - best_recent < cfg.early_stop_tolerance) break;
    }
  }
  out.final_loss = crossentropy_loss(out.params, x, labels);
  return out;
}

inline double clip_ratio(double r, double tau) {
  return std::max(std::min(r, std::exp(tau)), std::exp(-tau));
}

inline double clamp_probability(double p) { return std::clamp(p, kProbabilityFloor, 1.0 - kProbabilityFloor); }

inline double odds(double p) {
  const double c = clamp_probability(p);
  return c / (1.0 - c);
}

// Odds p / (1 - p) of the classifier on the concatenated (u, v).
inline double ratio_estimate(const DenseNetParams& classifier, std::span<const double> u, std::span<const double> v) {
  std::vector<double> input(u.begin(), u.end());
  input.insert(input.end(), v.begin(), v.end());
  const Vector z = forward(classifier, input);
  return odds(sigmoid(z[0]));
}

// Odds for every column of a stacked input batch.
inline Vector ratio_batch(const DenseNetParams& classifier, const Eigen::Ref<const Matrix>& inputs) {
  const Matrix z = forward_batch(classifier, inputs);
  Vector r(z.cols());
  for (Eigen::Index i = 0; i < z.cols(); ++i) r[i] = odds(sigmoid(z(0, i)));
  return r;
}

struct MiEstimate {
  double value_nats = 0.0;
  double joint_term = 0.0;    // mean log r over held-out joint rows
  double product_term = 0.0;  // log mean clip(r) over held-out product rows
  std::size_t n_train = 0;
  std::size_t n_eval = 0;
  double clip_tau = 0.0;
  std::uint64_t seed = 0;
  DenseNetParams classifier;
};

// Joint term uses the unclipped odds, product term the clipped ones.
inline double mi_from_ratios(const Vector& joint_ratios, const Vector& product_ratios, double tau,
                             double* joint_term = nullptr, double* product_term = nullptr) {
  if (joint_ratios.size() == 0 || product_ratios.size() == 0) throw ConfigError("evaluation sets must be nonempty");
  double log_sum = 0.0;
  for (double r : joint_ratios) log_sum += std::log(r);
  double clip_sum = 0.0;
  for (double r : product_ratios) clip_sum += clip_ratio(r, tau);
  const double jt = log_sum / static_cast<double>(joint_ratios.size());
  const double pt = std::log(clip_sum / static_cast<double>(product_ratios.size()));
  if (joint_term) *joint_term = jt;
  if (product_term) *product_term = pt;
  const double value = jt - pt;
  if (!std::isfinite(value)) throw NumericError("mutual information estimate is not finite");
  return value;
}

inline MiEstimate estimate_mi(const PairDataset& eval_joint, const PairDataset& eval_product,
                              const DenseNetParams& classifier, double tau) {
  if (eval_joint.size() == 0 || eval_product.size() == 0) throw ConfigError("evaluation sets must be nonempty");
  MiEstimate est;
  est.value_nats = mi_from_ratios(ratio_batch(classifier, eval_joint.stacked()),
                                  ratio_batch(classifier, eval_product.stacked()), tau, &est.joint_term,
                                  &est.product_term);
  est.n_eval = eval_joint.size();
  est.clip_tau = tau;
  est.classifier = classifier;
  return est;
}

// Everything produced by one pass of the estimator on a joint sample.
struct MineRun {
  MiEstimate estimate;
  MineDesign design;
  TrainedClassifier trained;
};

inline MineRun run_mine(const Matrix& u, const Matrix& v, const MineConfig& cfg, const IndexSplit& split,
                        const MineSeeds& seeds, const DenseNetParams* warm_start = nullptr,
                        std::optional<int> epochs = std::nullopt) {
  cfg.validate();
  if (u.cols() != v.cols()) throw ShapeError("u and v hold different sample counts");
  MineRun run;
  run.design = make_design(static_cast<std::size_t>(u.cols()), cfg, split, seeds.resample);
  const PairDataset train_joint = gather(u, v, run.design.train_joint, run.design.train_joint, SampleLabel::joint);
  const PairDataset train_product =
      gather(u, v, run.design.train_product.u, run.design.train_product.v, SampleLabel::product);
  run.trained = train_classifier(train_joint, train_product, cfg,
                                 TrainOptions{seeds.init, seeds.shuffle, warm_start, epochs});
  const PairDataset eval_joint = gather(u, v, run.design.eval_joint, run.design.eval_joint, SampleLabel::joint);
  const PairDataset eval_product =
      gather(u, v, run.design.eval_product.u, run.design.eval_product.v, SampleLabel::product);
  run.estimate = estimate_mi(eval_joint, eval_product, run.trained.params, cfg.clip_tau);
  run.estimate.n_train = train_joint.size();
  run.estimate.seed = cfg.rng_seed;
  return run;
}

// The full estimator on a joint sample, seeded from cfg.rng_seed.
inline MiEstimate estimate_mi_from_samples(const PairDataset& joint, const MineConfig& cfg) {
  joint.validate();
  const MineSeeds seeds = MineSeeds::derive(cfg.rng_seed);
  const IndexSplit split = split_indices(joint.size(), cfg.train_fraction, seeds.split);
  return run_mine(joint.u, joint.v, cfg, split, seeds).estimate;
}

}  // namespace itene
