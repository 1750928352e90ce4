// Transfer entropy on the threshold process next to its closed form.
//
//   te_on_threshold [T] [seed]

#include <cstdio>
#include <cstdlib>

#include "itene/synthetic.hpp"
#include "itene/te.hpp"

int main(int argc, char** argv) {
  const std::size_t length = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 5000;
  const std::uint64_t seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 1;
  const double rho = 0.9;

  itene::MineConfig mine;
  mine.rng_seed = seed;
  std::printf("%8s %10s %10s\n", "lambda", "estimate", "truth");
  for (double lambda : {-3.0, -1.0, 0.0, 1.0, 3.0}) {
    const itene::SeriesPair s = itene::gen_threshold_process({rho, lambda, length, seed});
    const auto te = itene::estimate_te(s, {1, 1}, mine);
    std::printf("%8.1f %10.4f %10.4f\n", lambda, te.te_nats, itene::closed_form_te(rho, lambda));
  }
  return 0;
}
