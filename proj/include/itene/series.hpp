#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "itene/errors.hpp"

namespace itene {

// Two aligned scalar time series {(x_t, y_t)}.
struct SeriesPair {
  std::vector<double> x;
  std::vector<double> y;

  std::size_t size() const { return x.size(); }

  void validate() const {
    if (x.size() != y.size()) {
      throw ShapeError("series lengths differ: " + std::to_string(x.size()) + " vs " + std::to_string(y.size()));
    }
    for (std::size_t t = 0; t < x.size(); ++t) {
      if (!std::isfinite(x[t]) || !std::isfinite(y[t])) {
        throw NumericError("series value at index " + std::to_string(t) + " is not finite");
      }
    }
  }

  friend bool operator==(const SeriesPair&, const SeriesPair&) = default;
};

}  // namespace itene
