#pragma once

// Central finite-difference oracle for float64 gradients.

#include "plm/autodiff.hpp"
#include "plm/random.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace plm::testing {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst;
};

/// Compares tape gradients against central differences for every listed Var.
/// At most `samples` coordinates per Var are probed; error is the norm-wise
/// relative difference over the probed coordinates.
inline GradCheckResult grad_check(const std::function<Var<double>()>& loss_fn, std::vector<Var<double>> vars,
                                  double h = 1e-6, Index samples = 48, std::uint64_t seed = 7) {
  for (auto& v : vars) v.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Var<double> loss = loss_fn();
    tape.backward(loss);
  }
  Rng rng(seed);
  GradCheckResult result;
  for (auto& v : vars) {
    const Index n = v.value().size();
    std::vector<Index> coords(n);
    for (Index i = 0; i < n; ++i) coords[i] = i;
    if (n > samples) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(samples);
    }
    double diff2 = 0, an2 = 0, nu2 = 0;
    for (Index i : coords) {
      const double orig = v.value()[i];
      v.mutable_value()[i] = orig + h;
      const double up = loss_fn().value().item();
      v.mutable_value()[i] = orig - h;
      const double down = loss_fn().value().item();
      v.mutable_value()[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double analytic = v.has_grad() ? v.grad()[i] : 0.0;
      diff2 += (numeric - analytic) * (numeric - analytic);
      an2 += analytic * analytic;
      nu2 += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(an2), std::sqrt(nu2), 1e-4});
    const double rel = std::sqrt(diff2) / denom;
    if (rel > result.max_relative_error || result.worst.empty()) {
      if (rel >= result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst = v.name();
      }
    }
  }
  return result;
}

/// Weighted sum of all outputs with fixed random weights, so every output
/// coordinate contributes a distinct gradient.
inline Var<double> probe_loss(const Var<double>& out, std::uint64_t seed = 99);

}  // namespace plm::testing

#include "plm/ops.hpp"

namespace plm::testing {

inline Var<double> probe_loss(const Var<double>& out, std::uint64_t seed) {
  Rng rng(seed);
  Var<double> w(normal_tensor<double>(out.shape(), 1.0, rng));
  return sum_all(mul(out, w));
}

}  // namespace plm::testing
