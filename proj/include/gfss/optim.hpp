#pragma once

#include <cmath>
#include <vector>

#include "gfss/autograd.hpp"
#include "gfss/config.hpp"

namespace gfss {

// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
//   v <- momentum * v + (g + wd * w);  w <- w - lr * v
// A positive clip_norm rescales the raw gradients so their global L2 norm
// is at most clip_norm.
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<Var<T>> params, double momentum, double weight_decay, double clip_norm = 0)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay), clip_norm_(clip_norm) {
    for (const auto& p : params_) velocity_.emplace_back(p.value().shape());
  }

  double grad_norm() const {
    double s = 0;
    for (const auto& p : params_)
      if (p.requires_grad() && p.has_grad())
        for (std::size_t j = 0; j < p.grad().size(); ++j) s += double(p.grad()[j]) * double(p.grad()[j]);
    return std::sqrt(s);
  }

  void step(double lr) {
    double gs = 1.0;
    if (clip_norm_ > 0) {
      const double n = grad_norm();
      if (n > clip_norm_) gs = clip_norm_ / n;
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.requires_grad()) continue;
      auto& w = p.mutable_value();
      auto& v = velocity_[i];
      const bool has = p.has_grad();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double g = (has ? gs * double(p.grad()[j]) : 0.0) + weight_decay_ * double(w[j]);
        v[j] = static_cast<T>(momentum_ * double(v[j]) + g);
        w[j] = static_cast<T>(double(w[j]) - lr * double(v[j]));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const std::vector<Var<T>>& params() const { return params_; }

 private:
  std::vector<Var<T>> params_;
  std::vector<Tensor<T>> velocity_;
  double momentum_, weight_decay_, clip_norm_;
};

// base * (1 - iter / max_iter)^power for poly, base otherwise.
inline double learning_rate(LrSchedule schedule, double base, std::size_t iter,
                            std::size_t max_iter, double power) {
  if (schedule == LrSchedule::constant || max_iter == 0) return base;
  const double frac = std::min(1.0, double(iter) / double(max_iter));
  return base * std::pow(1.0 - frac, power);
}

}  // namespace gfss
