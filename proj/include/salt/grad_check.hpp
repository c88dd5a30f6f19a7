#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "salt/tape.hpp"

namespace salt {

// Builds a scalar loss from parameter leaf node ids; called on fresh tapes.
using TapeBuilder = std::function<int(Tape&, const std::vector<int>&)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  bool nonfinite = false;      // a loss or gradient came out non-finite
  std::size_t checked = 0;     // number of components compared
  std::string worst;           // location of the worst component
};

// Compares backward() against central finite differences, componentwise.
// A component passes when |analytic - fd| <= 1e-8 (absolute fallback near
// zero) or the relative error against max(|analytic|, |fd|) is < tol.
// max_components_per_tensor = 0 checks every component; a positive value
// checks a seeded random subset of that size per parameter tensor.
GradCheckReport grad_check(const TapeBuilder& f, const std::vector<Tensor>& params, double h,
                           double tol, std::size_t max_components_per_tensor = 0,
                           std::uint64_t sample_seed = 0);

}  // namespace salt
