// Shared test helpers: random fills and the central finite-difference harness
// used to validate reverse-mode gradients.
#pragma once

#include "eomt/autodiff.hpp"
#include "eomt/rng.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace eomt::test {

template <typename S>
Tensor<S> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<S> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

struct FdReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::int64_t checked = 0;
};

// Central differences on every element of every listed parameter. `fn` must
// rebuild the full forward pass from the parameters' current values.
// The relative-error denominator is floored at kFdFloor so that elements whose
// true gradient sits below the O(h^2) truncation noise of the difference
// quotient are compared with an absolute tolerance of kFdRelTol * kFdFloor.
inline constexpr double kFdStep = 1e-4;
inline constexpr double kFdRelTol = 1e-3;
inline constexpr double kFdFloor = 1e-4;

template <typename Fn>
FdReport fd_check(std::vector<Var<double>*> params, Fn&& fn, double h = kFdStep) {
  // analytic gradients
  {
    Tape<double> tape;
    for (auto* p : params) {
      p->zero_grad();
      tape.watch(*p);
    }
    Var<double> loss = fn();
    tape.backward(loss);
  }
  FdReport rep;
  for (auto* p : params) {
    for (std::int64_t i = 0; i < p->numel(); ++i) {
      const double saved = p->value()[i];
      p->value()[i] = saved + h;
      const double up = fn().value()[0];
      p->value()[i] = saved - h;
      const double dn = fn().value()[0];
      p->value()[i] = saved;
      const double fd = (up - dn) / (2 * h);
      const double an = p->has_grad() ? p->grad()[i] : 0.0;
      const double abs_err = std::abs(fd - an);
      const double rel_err = abs_err / std::max({std::abs(fd), std::abs(an), kFdFloor});
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
      rep.max_rel_err = std::max(rep.max_rel_err, rel_err);
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace eomt::test
