#pragma once

// Adam with the inverse-sqrt warmup schedule.

#include <cmath>
#include <string>
#include <vector>

#include "ptie/tensor.hpp"

namespace ptie {

template <class S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
};

template <class S>
using ParamRegistry = std::vector<NamedParam<S>>;

// lr(step) = base_lr * min(step^-1/2, step * warmup^-3/2); peaks at step == warmup.
inline double warmup_lr(int64_t step, double base_lr = 0.02, int64_t warmup = 6000) {
  const double s = static_cast<double>(step);
  return base_lr * std::min(1.0 / std::sqrt(s), s / (std::sqrt(static_cast<double>(warmup)) *
                                                     static_cast<double>(warmup)));
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double base_lr = 0.02;
  int64_t warmup = 6000;
};

template <class S>
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  int64_t step_count() const { return step_; }
  double last_lr() const { return last_lr_; }
  const AdamConfig& config() const { return cfg_; }

  // One update over the registry; zeroes grads afterwards.
  void step(ParamRegistry<S>& params) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params[i].tensor.numel(), S(0));
        v_[i].assign(params[i].tensor.numel(), S(0));
      }
    }
    ++step_;
    const double lr = warmup_lr(step_, cfg_.base_lr, cfg_.warmup);
    last_lr_ = lr;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor<S>& t = params[i].tensor;
      if (!t.grad) continue;
      const S* g = t.gptr();
      const int64_t n = t.numel();
      for (int64_t j = 0; j < n; ++j) {
        if (!std::isfinite(static_cast<double>(g[j])))
          throw NumericError("adam: non-finite gradient in parameter '" + params[i].name +
                             "'");
      }
      S* p = t.ptr();
      S* m = m_[i].data();
      S* v = v_[i].data();
      const double b1 = cfg_.beta1, b2 = cfg_.beta2, eps = cfg_.eps;
      parallel_for(n, [&](int64_t j) {
        const double gj = static_cast<double>(g[j]);
        const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
        const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
        m[j] = static_cast<S>(mj);
        v[j] = static_cast<S>(vj);
        const double mhat = mj / bc1;
        const double vhat = vj / bc2;
        p[j] = static_cast<S>(static_cast<double>(p[j]) - lr * mhat / (std::sqrt(vhat) + eps));
      }, int64_t(1) << 14);
      t.zero_grad();
    }
  }

 private:
  AdamConfig cfg_;
  int64_t step_ = 0;
  double last_lr_ = 0.0;
  std::vector<std::vector<S>> m_, v_;
};

}  // namespace ptie
