#pragma once

// Row-by-row reference for the phi objective I_A(phi) - I_B(phi), written
// without the batched helpers in itene.hpp, plus random tiny instances for
// finite-difference checks of the pathwise gradient.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "itene/itene.hpp"
#include "test_support.hpp"

namespace itene::testing {

inline std::vector<double> column(const Matrix& m, std::size_t c) {
  const Vector v = m.col(static_cast<Eigen::Index>(c));
  return {v.data(), v.data() + v.size()};
}

inline std::vector<double> reference_bar_y(const ReparamChannel& ch, const std::vector<double>& y_minus,
                                           const std::vector<double>& eps) {
  const Vector out = forward(ch.net, y_minus);
  const std::size_t n = y_minus.size();
  std::vector<double> bar(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double mu = out[static_cast<Eigen::Index>(i)] + (ch.identity_skip ? y_minus[i] : 0.0);
    const double log_std =
        std::clamp(out[static_cast<Eigen::Index>(n + i)], ch.log_std_floor, ch.log_std_ceiling);
    bar[i] = mu + std::exp(log_std) * eps[i];
  }
  return bar;
}

inline double reference_ratio(const DenseNetParams& classifier, const std::vector<double>& input) {
  const double p = 1.0 / (1.0 + std::exp(-forward(classifier, input)[0]));
  const double c = std::clamp(p, 1e-6, 1.0 - 1e-6);
  return c / (1.0 - c);
}

inline double reference_term(PhiTerm term, const ReparamChannel& ch, const EmbeddedDataset& data,
                             const NoiseBatch& noise, const DenseNetParams& classifier, const EvalRows& rows,
                             double tau) {
  auto input = [&](std::size_t u, std::size_t v) {
    std::vector<double> in = column(data.x_minus, u);
    if (term == PhiTerm::a) in.push_back(data.y0(0, static_cast<Eigen::Index>(v)));
    const auto bar = reference_bar_y(ch, column(data.y_minus, v), column(noise.epsilon, v));
    in.insert(in.end(), bar.begin(), bar.end());
    return in;
  };
  double joint = 0.0;
  for (std::size_t t : rows.joint) joint += std::log(reference_ratio(classifier, input(t, t)));
  joint /= static_cast<double>(rows.joint.size());
  double product = 0.0;
  for (std::size_t k = 0; k < rows.product.size(); ++k) {
    const double r = reference_ratio(classifier, input(rows.product.u[k], rows.product.v[k]));
    product += std::max(std::min(r, std::exp(tau)), std::exp(-tau));
  }
  product /= static_cast<double>(rows.product.size());
  return joint - std::log(product);
}

struct PhiInstance {
  EmbeddedDataset data;
  NoiseBatch noise;
  ReparamChannel channel;
  DenseNetParams theta;
  DenseNetParams theta_prime;
  EvalRows rows_a;
  EvalRows rows_b;
  double tau = 0.9;

  double reference_objective(const ReparamChannel& ch) const {
    return reference_term(PhiTerm::a, ch, data, noise, theta, rows_a, tau) -
           reference_term(PhiTerm::b, ch, data, noise, theta_prime, rows_b, tau);
  }
};

inline void randomize_biases(DenseNetParams& p, Rng& rng, double scale) {
  std::normal_distribution<double> normal;
  for (auto& b : p.biases) {
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = scale * normal(rng);
  }
}

// T = 8 rows, every width at most 4.
inline PhiInstance make_phi_instance(std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> mem(1, 2);
  std::uniform_int_distribution<int> width(1, 4);
  std::normal_distribution<double> normal;
  const int m = mem(rng);
  const int n = mem(rng);
  const std::size_t t = 8;
  PhiInstance inst;
  inst.data.x_minus.resize(m, t);
  inst.data.y0.resize(1, t);
  inst.data.y_minus.resize(n, t);
  for (Eigen::Index i = 0; i < inst.data.x_minus.size(); ++i) inst.data.x_minus.data()[i] = normal(rng);
  for (Eigen::Index i = 0; i < inst.data.y0.size(); ++i) inst.data.y0.data()[i] = normal(rng);
  for (Eigen::Index i = 0; i < inst.data.y_minus.size(); ++i) inst.data.y_minus.data()[i] = normal(rng);
  inst.noise = make_noise(n, t, seed + 1);

  inst.channel = make_channel(n, {width(rng)}, seed + 2, -1.0, 0.5);
  inst.channel.identity_skip = std::bernoulli_distribution(0.5)(rng);
  randomize_biases(inst.channel.net, rng, 0.2);
  for (int i = 0; i < n; ++i) inst.channel.net.biases.back()[n + i] += -1.0;

  inst.theta = init_network(classifier_layers(m + 1 + n, {width(rng), width(rng)}), OutputKind::logit_scalar, seed + 3);
  inst.theta_prime = init_network(classifier_layers(m + n, {width(rng)}), OutputKind::logit_scalar, seed + 4);
  randomize_biases(inst.theta, rng, 0.3);
  randomize_biases(inst.theta_prime, rng, 0.3);

  std::uniform_int_distribution<std::size_t> row(0, t - 1);
  for (EvalRows* rows : {&inst.rows_a, &inst.rows_b}) {
    for (int k = 0; k < 4; ++k) {
      rows->joint.push_back(row(rng));
      rows->product.u.push_back(row(rng));
      rows->product.v.push_back(row(rng));
    }
  }
  inst.tau = seed % 2 == 0 ? 0.9 : 10.0;
  return inst;
}

// Relative error between the pathwise gradient (exact product normalization)
// and central differences of the row-by-row objective.
inline double phi_gradient_error(const PhiInstance& inst) {
  const PhiGradient g = pathwise_grad_phi(inst.channel, inst.data, inst.noise, inst.theta, inst.rows_a,
                                          inst.theta_prime, inst.rows_b, inst.tau, ProductGradient::exact);
  ReparamChannel probe = inst.channel;
  const auto numeric = central_differences(inst.channel.net.flatten(), [&](std::span<const double> flat) {
    probe.net.assign_flat(flat);
    return inst.reference_objective(probe);
  });
  return relative_error(g.gradient.flatten(), numeric);
}

}  // namespace itene::testing
