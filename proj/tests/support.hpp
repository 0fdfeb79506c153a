#pragma once

// Hand-rolled generators shared by the property tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "gfss/autograd.hpp"
#include "gfss/data.hpp"
#include "gfss/rng.hpp"
#include "gfss/tensor.hpp"

namespace gfss::fixtures {

inline Tensor<double> random_matrix(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
  Tensor<double> t({r, c});
  for (auto& v : t.values()) v = rng.normal() * sd;
  return t;
}

inline Tensor<double> random_tensor(Shape s, Rng& rng, double sd = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = rng.normal() * sd;
  return t;
}

// Rectangles of random classes (ids 1..classes) on background, sometimes
// with ignore pixels, so boxes of every shape and position turn up.
inline Tensor<int> random_mask(std::size_t H, std::size_t W, int classes, Rng& rng) {
  Tensor<int> m({H, W}, kBackgroundId);
  const std::size_t rects = rng.index(5);
  for (std::size_t k = 0; k < rects; ++k) {
    const int cls = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(classes)));
    const std::size_t y0 = rng.index(H), x0 = rng.index(W);
    const std::size_t y1 = std::min(H - 1, y0 + rng.index(H / 2 + 1));
    const std::size_t x1 = std::min(W - 1, x0 + rng.index(W / 2 + 1));
    for (std::size_t y = y0; y <= y1; ++y)
      for (std::size_t x = x0; x <= x1; ++x) m(y, x) = cls;
  }
  if (rng.bernoulli(0.2)) m(rng.index(H), rng.index(W)) = kIgnoreId;
  return m;
}

inline Sample random_sample(std::size_t H, std::size_t W, int classes, Rng& rng) {
  Sample s;
  s.mask = random_mask(H, W, classes, rng);
  s.image = Tensor<float>({H, W, 3});
  for (auto& v : s.image.values()) v = static_cast<float>(rng.normal());
  return s;
}

// Reduces any matrix-valued output to a scalar with fixed random weights,
// so every output entry contributes to the checked gradient.
inline Var<double> weighted_sum(const Var<double>& out, Rng& rng) {
  const auto& v = out.value();
  return ag::sum(ag::col_dot(out, Var<double>::constant(random_matrix(v.rows(), v.cols(), rng))));
}

struct GradientReport {
  double worst_relative = 0;
  std::size_t checked = 0;
};

// Central differences on every entry of every parameter. The relative error
// of an entry is |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline GradientReport check_gradients(const std::function<Var<double>()>& loss,
                                      std::vector<Var<double>> params, double step = 1e-4,
                                      double floor = 1e-6) {
  for (auto& p : params) p.zero_grad();
  backward(loss());
  GradientReport rep;
  for (auto& p : params) {
    const Tensor<double> analytic =
        p.has_grad() ? p.grad() : Tensor<double>(p.value().shape());
    for (std::size_t i = 0; i < p.value().size(); ++i) {
      const double orig = p.value()[i];
      p.mutable_value()[i] = orig + step;
      const double up = loss().value()[0];
      p.mutable_value()[i] = orig - step;
      const double down = loss().value()[0];
      p.mutable_value()[i] = orig;
      const double numeric = (up - down) / (2 * step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      rep.worst_relative = std::max(rep.worst_relative, std::abs(analytic[i] - numeric) / denom);
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace gfss::fixtures
