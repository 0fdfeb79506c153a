#pragma once

// Classifier heads over decomposed sub-features, probability assembly,
// weight statistics, and calibration of the novel head against the base
// head's weight distribution.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "gfss/autograd.hpp"
#include "gfss/backbone.hpp"
#include "gfss/log.hpp"
#include "gfss/prototypes.hpp"

namespace gfss {

enum class ClassifierRole { base, novel, background };

// d x C, one weight column theta_i per class. No bias terms.
template <typename T>
struct ClassifierWeights {
  Tensor<T> theta;
  ClassifierRole role = ClassifierRole::base;

  std::size_t dim() const { return theta.rows(); }
  std::size_t classes() const { return theta.cols(); }

  static ClassifierWeights random(std::size_t d, std::size_t classes, ClassifierRole role,
                                  Rng& rng, double sd) {
    ClassifierWeights w{Tensor<T>({d, classes}), role};
    for (auto& v : w.theta.values()) v = static_cast<T>(rng.normal() * sd);
    return w;
  }
};

struct WeightStats {
  std::vector<double> mu;     // per-class channel mean
  std::vector<double> sigma;  // per-class population std
  double mu_bar = 0;
  double sigma_bar = 0;
};

template <typename T>
WeightStats weight_stats(const Tensor<T>& theta) {
  if (theta.rank() != 2 || theta.rows() < 2)
    throw ShapeError("weight_stats needs a d x C matrix with d >= 2");
  const std::size_t d = theta.rows(), C = theta.cols();
  WeightStats s;
  s.mu.resize(C);
  s.sigma.resize(C);
  for (std::size_t i = 0; i < C; ++i) {
    double m = 0;
    for (std::size_t j = 0; j < d; ++j) m += double(theta(j, i));
    m /= double(d);
    double v = 0;
    for (std::size_t j = 0; j < d; ++j) v += (double(theta(j, i)) - m) * (double(theta(j, i)) - m);
    s.mu[i] = m;
    s.sigma[i] = std::sqrt(v / double(d));
  }
  for (std::size_t i = 0; i < C; ++i) {
    s.mu_bar += s.mu[i];
    s.sigma_bar += s.sigma[i];
  }
  if (C > 0) {
    s.mu_bar /= double(C);
    s.sigma_bar /= double(C);
  }
  return s;
}

template <typename T>
WeightStats weight_stats(const ClassifierWeights<T>& w) {
  return weight_stats(w.theta);
}

enum class SigmaMode { per_class, averaged };
enum class CalibrationOrder { shift_then_scale, scale_then_shift };

struct CalibrationOptions {
  // per_class scales column i by sigma_bar_b / sigma_i; averaged uses
  // sigma_bar_b / sigma_bar_n for every column.
  SigmaMode sigma = SigmaMode::per_class;
  // shift_then_scale: Z - mu_bar_n + mu_bar_b, then scale each column.
  // scale_then_shift: scale each column about its own mean, then shift.
  CalibrationOrder order = CalibrationOrder::shift_then_scale;
  double eps = 1e-8;
};

template <typename T>
struct CalibrationResult {
  Tensor<T> theta;
  std::vector<std::size_t> degenerate_columns;  // left uncalibrated
};

namespace detail {

template <typename T>
CalibrationResult<T> calibrate_towards(const Tensor<T>& theta, double target_mu,
                                       double target_sigma, const CalibrationOptions& opts,
                                       const char* what) {
  const WeightStats own = weight_stats(theta);
  const std::size_t d = theta.rows(), C = theta.cols();
  CalibrationResult<T> out{theta, {}};
  for (std::size_t i = 0; i < C; ++i) {
    const double sigma_ref = opts.sigma == SigmaMode::per_class ? own.sigma[i] : own.sigma_bar;
    if (!(sigma_ref > opts.eps)) {
      out.degenerate_columns.push_back(i);
      log::warn(std::string(what) + ": column " + std::to_string(i) +
                " has degenerate standard deviation; left uncalibrated");
      continue;
    }
    const double ratio = target_sigma / sigma_ref;
    for (std::size_t j = 0; j < d; ++j) {
      const double z = double(theta(j, i));
      double v;
      if (opts.order == CalibrationOrder::shift_then_scale)
        v = ratio * (z - own.mu_bar + target_mu);
      else
        v = (z - own.mu[i]) * ratio + own.mu[i] - own.mu_bar + target_mu;
      out.theta(j, i) = static_cast<T>(v);
    }
  }
  return out;
}

}  // namespace detail

// Mean shift toward mu_bar_b, then std scaling toward sigma_bar_b.
template <typename T>
CalibrationResult<T> calibrate_novel(const Tensor<T>& novel_theta, const WeightStats& base_stats,
                                     const CalibrationOptions& opts = {}) {
  return detail::calibrate_towards(novel_theta, base_stats.mu_bar, base_stats.sigma_bar, opts,
                                   "calibrate_novel");
}

// Ablation: both heads move toward the pooled statistics
// ((mu_bar_b + mu_bar_n) / 2, (sigma_bar_b + sigma_bar_n) / 2).
template <typename T>
std::pair<CalibrationResult<T>, CalibrationResult<T>> calibrate_both_variant(
    const Tensor<T>& base_theta, const Tensor<T>& novel_theta,
    const CalibrationOptions& opts = {}) {
  const WeightStats b = weight_stats(base_theta), n = weight_stats(novel_theta);
  const double mu = 0.5 * (b.mu_bar + n.mu_bar), sigma = 0.5 * (b.sigma_bar + n.sigma_bar);
  return {detail::calibrate_towards(base_theta, mu, sigma, opts, "calibrate_both(base)"),
          detail::calibrate_towards(novel_theta, mu, sigma, opts, "calibrate_both(novel)")};
}

// Logits from explicit sub-features: channel 0 is theta_bg . f_0, channel i
// is theta_i . f_i. sub_features = [f_0, f_1..f_M, f_{M+1}..f_{M+N}];
// pass an empty novel head in phase 1.
template <typename T>
Tensor<T> score(const std::vector<FeatureMap<T>>& sub_features, const Tensor<T>& base_w,
                const Tensor<T>& novel_w, const Tensor<T>& background_w) {
  const std::size_t classes = base_w.cols() + (novel_w.empty() ? 0 : novel_w.cols());
  if (sub_features.size() != classes + 1)
    throw ShapeError("score: " + std::to_string(sub_features.size()) + " sub-features for " +
                     std::to_string(classes + 1) + " classifier columns");
  const std::size_t d = sub_features[0].dim();
  if (base_w.rows() != d || (!novel_w.empty() && novel_w.rows() != d) ||
      background_w.rows() != d || background_w.cols() != 1)
    throw ShapeError("score: classifier dim does not match features");
  const std::size_t h = sub_features[0].height(), w = sub_features[0].width();
  Tensor<T> logits({h, w, classes + 1});
  auto column = [&](std::size_t c, std::size_t j) -> T {
    if (c == 0) return background_w(j, 0);
    if (c <= base_w.cols()) return base_w(j, c - 1);
    return novel_w(j, c - 1 - base_w.cols());
  };
  for (std::size_t c = 0; c <= classes; ++c) {
    const auto& f = sub_features[c].values;
    if (f.shape() != sub_features[0].values.shape()) throw ShapeError("score: ragged sub-features");
    for (std::size_t p = 0; p < h * w; ++p) {
      T s{};
      for (std::size_t j = 0; j < d; ++j) s += column(c, j) * f[p * d + j];
      logits[p * (classes + 1) + c] = s;
    }
  }
  return logits;
}

// Fused decomposition + scoring on per-cell rows.
//   features [P, d], prototypes [C, d], theta [d, C], theta_bg [d, 1]
//   -> logits [P, C + 1] with background first.
// Because f_i = c_i u_hat_i, theta_i . f_i = c_i (theta_i . u_hat_i).
template <typename T>
Var<T> score_rows(const Var<T>& features, const Var<T>& prototypes, const Var<T>& theta,
                  const Var<T>& theta_bg) {
  using namespace ag;
  const std::size_t d = features.value().cols();
  if (prototypes.value().cols() != d || theta.value().rows() != d ||
      theta.value().cols() != prototypes.value().rows())
    throw ShapeError("score_rows: prototypes " + shape_str(prototypes.shape()) +
                     ", classifier " + shape_str(theta.shape()) + ", feature dim " +
                     std::to_string(d));
  require_shape(theta_bg.value(), {d, 1}, "score_rows background weight");
  Var<T> unit = normalize_rows(prototypes, static_cast<T>(kMinPrototypeNorm));
  Var<T> unit_t = transpose(unit);
  Var<T> coeff = matmul(features, unit_t);
  Var<T> fg = mul_row(coeff, col_dot(theta, unit_t));
  Var<T> residual = sub(features, matmul(coeff, unit));
  return concat_cols(matmul(residual, theta_bg), fg);
}

// Per-pixel softmax over the last axis of [..., C].
template <typename T>
Tensor<T> combine_probabilities(const Tensor<T>& logits) {
  const std::size_t C = logits.shape().back();
  return ag::softmax_rows_value(logits.reshaped({logits.size() / C, C})).reshaped(logits.shape());
}

// Per-pixel argmax over the last axis; ties resolve to the lowest index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& scores) {
  const std::size_t C = scores.shape().back(), P = scores.size() / C;
  std::vector<int> out(P);
  for (std::size_t p = 0; p < P; ++p) {
    const T* r = scores.data() + p * C;
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (r[c] > r[best]) best = c;
    out[p] = static_cast<int>(best);
  }
  return out;
}

}  // namespace gfss
