#pragma once

// Shared test helpers: the central finite-difference gradient oracle and
// small random-tensor builders. The oracle only re-evaluates the loss
// callable; it never touches the backward path it is checking.

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "ptie/ops.hpp"
#include "ptie/optim.hpp"
#include "ptie/tensor.hpp"

namespace ptie::test {

template <class S>
Tensor<S> random_tensor(Shape shape, Rng& rng, bool requires_grad = false,
                        double lo = -1.0, double hi = 1.0) {
  Tensor<S> t = Tensor<S>::zeros(shape, requires_grad);
  for (int64_t i = 0; i < t.numel(); ++i) (*t.data)[i] = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

// Fixed pseudo-random weights turn any tensor into a well-conditioned scalar
// loss; a plain sum would hide direction-dependent gradient errors.
template <class S>
Tensor<S> weighted_sum(const Tensor<S>& x, uint64_t seed = 99) {
  Rng rng(seed);
  Tensor<S> w = random_tensor<S>(x.shape, rng, false, -1.0, 1.0);
  return sum(mul(x, w));
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t checked = 0;
};

inline double rel_err(double a, double b) {
  const double m = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / m;
}

// Central differences against the tape. make_loss() must rebuild the graph
// from the current parameter values on every call. A coordinate that fails
// is re-checked at smaller steps: a ReLU kink inside the +-h window stops
// being straddled once h shrinks past it, while a genuine backward bug keeps
// the same relative error at every step size.
template <class S, class F>
GradCheckResult grad_check(std::vector<Tensor<S>*> tensors, F make_loss, double h = 1e-4,
                           int64_t max_per_tensor = -1, uint64_t sample_seed = 12345,
                           double accept = 1e-5) {
  for (auto* t : tensors) t->zero_grad();
  {
    Tensor<S> loss = make_loss();
    backward(loss);
  }
  std::vector<std::vector<S>> analytic;
  analytic.reserve(tensors.size());
  for (auto* t : tensors) analytic.push_back(*t->grad);

  Rng rng(sample_seed);
  GradCheckResult res;
  for (size_t ti = 0; ti < tensors.size(); ++ti) {
    Tensor<S>& t = *tensors[ti];
    const int64_t n = t.numel();
    std::vector<int64_t> idx;
    if (max_per_tensor < 0 || n <= max_per_tensor) {
      idx.resize(n);
      for (int64_t i = 0; i < n; ++i) idx[i] = i;
    } else {
      for (int64_t i = 0; i < max_per_tensor; ++i) idx.push_back(rng.below(n));
    }
    for (int64_t i : idx) {
      const S orig = (*t.data)[i];
      double best = std::numeric_limits<double>::infinity();
      for (double step : {h, h / 8.0, h / 64.0}) {
        double lp, lm;
        {
          NoGradGuard ng;
          (*t.data)[i] = orig + static_cast<S>(step);
          lp = static_cast<double>(make_loss().item());
          (*t.data)[i] = orig - static_cast<S>(step);
          lm = static_cast<double>(make_loss().item());
        }
        (*t.data)[i] = orig;
        const double numeric = (lp - lm) / (2.0 * step);
        best = std::min(best, rel_err(static_cast<double>(analytic[ti][i]), numeric));
        if (best < accept) break;
      }
      res.max_rel_err = std::max(res.max_rel_err, best);
      ++res.checked;
    }
  }
  return res;
}

}  // namespace ptie::test
