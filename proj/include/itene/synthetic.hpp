#pragma once

// Seeded benchmark processes and their closed-form information values.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include "itene/errors.hpp"
#include "itene/mine.hpp"
#include "itene/random.hpp"
#include "itene/series.hpp"

namespace itene {

// Standard normal upper tail Q(x) = P(N(0,1) > x).
inline double normal_q(double x) { return 0.5 * std::erfc(x / std::sqrt(2.0)); }

// Y_t = Z_t                          if Y_{t-1} <  lambda
//     = rho X_{t-1} + sqrt(1-rho^2) Z_t  if Y_{t-1} >= lambda
// with X_t, Z_t i.i.d. N(0, 1) and Y_1 = Z_1.
struct ThresholdProcessSpec {
  double rho = 0.9;
  double lambda = 0.0;
  std::size_t length = 0;
  std::uint64_t seed = 0;
};

inline SeriesPair gen_threshold_process(const ThresholdProcessSpec& spec) {
  if (!(std::abs(spec.rho) < 1.0)) throw ConfigError("threshold process needs |rho| < 1");
  if (spec.length < 2) throw ConfigError("threshold process needs at least two samples");
  Rng rng(spec.seed);
  std::normal_distribution<double> normal;
  const double mix = std::sqrt(1.0 - spec.rho * spec.rho);
  SeriesPair s;
  s.x.resize(spec.length);
  s.y.resize(spec.length);
  for (std::size_t t = 0; t < spec.length; ++t) {
    s.x[t] = normal(rng);
    const double z = normal(rng);
    if (t == 0 || s.y[t - 1] < spec.lambda) {
      s.y[t] = z;
    } else {
      s.y[t] = spec.rho * s.x[t - 1] + mix * z;
    }
  }
  return s;
}

// TE_{X->Y}(1,1) of the threshold process in nats: -0.5 Q(lambda) ln(1 - rho^2).
inline double closed_form_te(double rho, double lambda) {
  if (!(std::abs(rho) < 1.0)) throw ConfigError("closed-form TE needs |rho| < 1");
  return -0.5 * normal_q(lambda) * std::log1p(-rho * rho);
}

// Mutual information of a unit-variance bivariate normal pair, in nats.
inline double gaussian_mi(double rho) {
  if (!(std::abs(rho) < 1.0)) throw ConfigError("Gaussian MI needs |rho| < 1");
  return -0.5 * std::log1p(-rho * rho);
}

// i.i.d. rows of a unit-variance bivariate normal with correlation rho.
inline PairDataset gen_gaussian_pair(double rho, std::size_t length, std::uint64_t seed) {
  if (!(std::abs(rho) < 1.0)) throw ConfigError("Gaussian pair needs |rho| < 1");
  Rng rng(seed);
  std::normal_distribution<double> normal;
  const double mix = std::sqrt(1.0 - rho * rho);
  PairDataset d;
  d.label = SampleLabel::joint;
  d.u.resize(1, static_cast<Eigen::Index>(length));
  d.v.resize(1, static_cast<Eigen::Index>(length));
  for (Eigen::Index i = 0; i < d.u.cols(); ++i) {
    const double a = normal(rng);
    const double b = normal(rng);
    d.u(0, i) = a;
    d.v(0, i) = rho * a + mix * b;
  }
  return d;
}

// Binary synergy process: fair bits X_{t-1}, Y_{t-1} and
// Y_t = X_{t-1} xor Y_{t-1}. Every emitted value carries N(0, noise_std^2)
// dither; the recursion runs on the clean bits.
inline SeriesPair gen_xor_process(double noise_std, std::size_t length, std::uint64_t seed) {
  if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be nonnegative");
  if (length < 2) throw ConfigError("XOR process needs at least two samples");
  Rng rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> normal;
  std::vector<int> xb(length), yb(length);
  yb[0] = coin(rng) ? 1 : 0;
  for (std::size_t t = 0; t < length; ++t) {
    xb[t] = coin(rng) ? 1 : 0;
    if (t > 0) yb[t] = xb[t - 1] ^ yb[t - 1];
  }
  SeriesPair s;
  s.x.resize(length);
  s.y.resize(length);
  for (std::size_t t = 0; t < length; ++t) {
    s.x[t] = xb[t] + (noise_std > 0.0 ? noise_std * normal(rng) : 0.0);
    s.y[t] = yb[t] + (noise_std > 0.0 ? noise_std * normal(rng) : 0.0);
  }
  return s;
}

// Two independent i.i.d. N(0, 1) series.
inline SeriesPair gen_independent(std::size_t length, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal;
  SeriesPair s;
  s.x.resize(length);
  s.y.resize(length);
  for (std::size_t t = 0; t < length; ++t) {
    s.x[t] = normal(rng);
    s.y[t] = normal(rng);
  }
  return s;
}

}  // namespace itene
