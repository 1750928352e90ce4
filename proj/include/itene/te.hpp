#pragma once

// Sliding-window embedding and the transfer entropy estimator
//
//   TE = I(X-; Y0, Y-) - I(X-; Y-)
//
// with each term estimated by the classifier-based estimator in mine.hpp.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "itene/errors.hpp"
#include "itene/mine.hpp"
#include "itene/random.hpp"
#include "itene/series.hpp"

namespace itene {

struct EmbeddingConfig {
  int m = 1;  // source memory
  int n = 1;  // target memory
  // Exclude the first max(m, n) rows, which contain zero padding.
  bool drop_padded = false;

  void validate(std::size_t length) const {
    if (m < 1 || n < 1) throw ConfigError("embedding memories must be at least 1");
    if (length < static_cast<std::size_t>(std::max(m, n)) + 1) {
      throw ConfigError("series of length " + std::to_string(length) + " is too short for memories (" +
                        std::to_string(m) + ", " + std::to_string(n) + ")");
    }
  }
};

// Column t holds x_minus = (x_{t-m}, ..., x_{t-1}), y0 = y_t and
// y_minus = (y_{t-n}, ..., y_{t-1}), with zeros for indices before the start.
struct EmbeddedDataset {
  Matrix x_minus;  // m x T
  Matrix y0;       // 1 x T
  Matrix y_minus;  // n x T

  std::size_t rows() const { return static_cast<std::size_t>(y0.cols()); }
};

inline EmbeddedDataset embed(const SeriesPair& series, const EmbeddingConfig& cfg) {
  series.validate();
  cfg.validate(series.size());
  const auto total = static_cast<Eigen::Index>(series.size());
  const Eigen::Index first = cfg.drop_padded ? std::max(cfg.m, cfg.n) : 0;
  const Eigen::Index rows = total - first;
  EmbeddedDataset e;
  e.x_minus = Matrix::Zero(cfg.m, rows);
  e.y0.resize(1, rows);
  e.y_minus = Matrix::Zero(cfg.n, rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const Eigen::Index t = r + first;
    e.y0(0, r) = series.y[static_cast<std::size_t>(t)];
    for (int k = 0; k < cfg.m; ++k) {
      const Eigen::Index src = t - cfg.m + k;
      if (src >= 0) e.x_minus(k, r) = series.x[static_cast<std::size_t>(src)];
    }
    for (int k = 0; k < cfg.n; ++k) {
      const Eigen::Index src = t - cfg.n + k;
      if (src >= 0) e.y_minus(k, r) = series.y[static_cast<std::size_t>(src)];
    }
  }
  return e;
}

// (y0; past) stacked into one (1 + n) x T block.
inline Matrix stack_target(const Matrix& y0, const Matrix& past) {
  Matrix v(1 + past.rows(), y0.cols());
  v.topRows(1) = y0;
  v.bottomRows(past.rows()) = past;
  return v;
}

// Seeds for the two sub-estimates. Both share one index split; product
// resampling, initialization and shuffling are independent.
struct TeSeeds {
  std::uint64_t split = 0;
  MineSeeds a;
  MineSeeds b;

  static TeSeeds derive(std::uint64_t run_seed) {
    TeSeeds s;
    s.split = derive_seed(run_seed, "te/split");
    s.a = MineSeeds::derive(derive_seed(run_seed, "te/A"));
    s.b = MineSeeds::derive(derive_seed(run_seed, "te/B"));
    return s;
  }

  TeSeeds swapped() const { return {split, b, a}; }
};

struct TeEstimate {
  MineRun a;  // I(X-; Y0, Y-)
  MineRun b;  // I(X-; Y-)
  double te_nats = 0.0;
};

inline TeEstimate estimate_te(const EmbeddedDataset& data, const MineConfig& cfg, const TeSeeds& seeds) {
  cfg.validate();
  const IndexSplit split = split_indices(data.rows(), cfg.train_fraction, seeds.split);
  TeEstimate out;
  out.a = run_mine(data.x_minus, stack_target(data.y0, data.y_minus), cfg, split, seeds.a);
  out.b = run_mine(data.x_minus, data.y_minus, cfg, split, seeds.b);
  out.te_nats = out.a.estimate.value_nats - out.b.estimate.value_nats;
  return out;
}

inline TeEstimate estimate_te(const SeriesPair& series, const EmbeddingConfig& emb, const MineConfig& cfg) {
  return estimate_te(embed(series, emb), cfg, TeSeeds::derive(cfg.rng_seed));
}

// TE, ITE and their residual STE = TE - ITE, in nats.
struct FlowEstimates {
  double te_nats = 0.0;
  double ite_nats = 0.0;
  double ste_nats = 0.0;

  static FlowEstimates from(double te, double ite) { return {te, ite, te - ite}; }
};

inline double nats_to_bits(double nats) { return nats / std::numbers::ln2; }

}  // namespace itene
