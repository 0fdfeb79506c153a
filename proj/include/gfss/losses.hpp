#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "gfss/autograd.hpp"
#include "gfss/error.hpp"

namespace gfss {

enum class Phase { pretrain, finetune };

inline const char* phase_name(Phase p) { return p == Phase::pretrain ? "pretrain" : "finetune"; }

namespace ag {

// Mean over labelled rows of -log softmax(logits)[label]; label -1 is
// ignored. Throws UndefinedLossError when every row is ignored.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels) {
  const auto& L = logits.value();
  const std::size_t P = L.rows(), C = L.cols();
  if (labels.size() != P) throw ShapeError("cross_entropy: label count mismatch");
  Tensor<T> prob = softmax_rows_value(L);
  T loss{};
  std::size_t count = 0;
  for (std::size_t p = 0; p < P; ++p) {
    const int y = labels[p];
    if (y < 0) continue;
    if (static_cast<std::size_t>(y) >= C)
      throw DataError("cross_entropy: label " + std::to_string(y) + " outside " +
                      std::to_string(C) + " classes");
    // log-sum-exp form for stability
    const T* r = L.data() + p * C;
    T mx = r[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, r[c]);
    T s{};
    for (std::size_t c = 0; c < C; ++c) s += std::exp(r[c] - mx);
    loss += mx + std::log(s) - r[y];
    ++count;
  }
  if (count == 0) throw UndefinedLossError("cross_entropy: every pixel is ignored");
  const T inv = T{1} / static_cast<T>(count);
  return make_op<T>(Tensor<T>({1}, loss * inv), {logits},
                    [P, C, inv, labels, prob = std::move(prob)](Node<T>& n) {
                      auto* g = parent_grad(n, 0);
                      if (!g) return;
                      const T s = n.grad[0] * inv;
                      for (std::size_t p = 0; p < P; ++p) {
                        const int y = labels[p];
                        if (y < 0) continue;
                        for (std::size_t c = 0; c < C; ++c)
                          (*g)(p, c) += s * (prob(p, c) - (static_cast<int>(c) == y ? T{1} : T{0}));
                      }
                    });
}

// Mean over rows of -sum_c target(p, c) log softmax(logits)(p, c). The
// target receives a gradient only if it requires one.
template <typename T>
Var<T> soft_cross_entropy(const Var<T>& target, const Var<T>& logits) {
  if (target.shape() != logits.shape()) throw ShapeError("soft_cross_entropy: shape mismatch");
  const auto& L = logits.value();
  const std::size_t P = L.rows(), C = L.cols();
  Tensor<T> logp({P, C});
  for (std::size_t p = 0; p < P; ++p) {
    const T* r = L.data() + p * C;
    T mx = r[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, r[c]);
    T s{};
    for (std::size_t c = 0; c < C; ++c) s += std::exp(r[c] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t c = 0; c < C; ++c) logp(p, c) = r[c] - lse;
  }
  T loss{};
  for (std::size_t i = 0; i < logp.size(); ++i) loss -= target.value()[i] * logp[i];
  const T inv = T{1} / static_cast<T>(P);
  return make_op<T>(Tensor<T>({1}, loss * inv), {target, logits},
                    [P, C, inv, logp = std::move(logp)](Node<T>& n) {
                      const T s = n.grad[0] * inv;
                      const auto& Tg = n.parents[0]->value;
                      if (auto* gt = parent_grad(n, 0))
                        for (std::size_t i = 0; i < gt->size(); ++i) (*gt)[i] -= s * logp[i];
                      if (auto* gl = parent_grad(n, 1))
                        for (std::size_t p = 0; p < P; ++p) {
                          T mass{};
                          for (std::size_t c = 0; c < C; ++c) mass += Tg(p, c);
                          for (std::size_t c = 0; c < C; ++c)
                            (*gl)(p, c) += s * (std::exp(logp(p, c)) * mass - Tg(p, c));
                        }
                    });
}

// Rows divided by max(|row|, eps); zero rows map to zero.
template <typename T>
Var<T> normalize_rows_clamped(const Var<T>& a, T eps = T(1e-8)) {
  const std::size_t rows = a.value().rows(), cols = a.value().cols();
  Tensor<T> out = a.value();
  std::vector<T> denom(rows);
  std::vector<bool> clamped(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    T s{};
    for (std::size_t j = 0; j < cols; ++j) s += out(i, j) * out(i, j);
    const T n = std::sqrt(s);
    clamped[i] = n < eps;
    denom[i] = clamped[i] ? eps : n;
    for (std::size_t j = 0; j < cols; ++j) out(i, j) /= denom[i];
  }
  return make_op<T>(std::move(out), {a}, [rows, cols, denom, clamped](Node<T>& n) {
    auto* g = parent_grad(n, 0);
    if (!g) return;
    const auto& U = n.value;
    for (std::size_t i = 0; i < rows; ++i) {
      T dot{};
      if (!clamped[i])
        for (std::size_t j = 0; j < cols; ++j) dot += n.grad(i, j) * U(i, j);
      for (std::size_t j = 0; j < cols; ++j)
        (*g)(i, j) += (n.grad(i, j) - dot * U(i, j)) / denom[i];
    }
  });
}

}  // namespace ag

// ---------------------------------------------------------------------------
// Losses on probability fields (reference forms) and on logits (training).

// Mean of -log p[label] over non-ignored rows of a [P, C] probability field.
template <typename T>
T segmentation_loss(const Tensor<T>& probs, const std::vector<int>& labels) {
  const std::size_t P = probs.rows();
  if (labels.size() != P) throw ShapeError("segmentation_loss: label count mismatch");
  T s{};
  std::size_t n = 0;
  for (std::size_t p = 0; p < P; ++p) {
    if (labels[p] < 0) continue;
    s -= std::log(probs(p, static_cast<std::size_t>(labels[p])));
    ++n;
  }
  if (n == 0) throw UndefinedLossError("segmentation_loss: every pixel is ignored");
  return s / static_cast<T>(n);
}

template <typename T>
Var<T> segmentation_loss(const Var<T>& logits, const std::vector<int>& labels) {
  return ag::cross_entropy(logits, labels);
}

// (1 / P) sum_p -sum_c p_w(p, c) log p_s(p, c).
template <typename T>
T consistency_loss(const Tensor<T>& p_weak, const Tensor<T>& p_strong) {
  if (p_weak.shape() != p_strong.shape()) throw ShapeError("consistency_loss: shape mismatch");
  T s{};
  for (std::size_t i = 0; i < p_weak.size(); ++i)
    if (p_weak[i] != T{0}) s -= p_weak[i] * std::log(p_strong[i]);
  return s / static_cast<T>(p_weak.rows());
}

// Training form: logits of both views; the weak view is a constant target
// when stop_gradient is set.
template <typename T>
Var<T> consistency_loss(const Var<T>& logits_weak, const Var<T>& logits_strong,
                        bool stop_gradient = true) {
  Var<T> target = stop_gradient
                      ? Var<T>::constant(ag::softmax_rows_value(logits_weak.value()))
                      : ag::softmax_rows(logits_weak);
  return ag::soft_cross_entropy(target, logits_strong);
}

struct AuxOptions {
  double temperature = 0.1;
};

// Base prototypes used as a cosine classifier over the raw feature:
// score_i = cos(f, u_i) / tau for base classes, plus a background column
// (fixed 0, or a learned scalar when `background` is given).
template <typename T>
Var<T> auxiliary_loss(const Var<T>& features, const Var<T>& base_prototypes,
                      const std::vector<int>& labels, const AuxOptions& opts = {},
                      const Var<T>& background = {}) {
  using namespace ag;
  const std::size_t P = features.value().rows();
  Var<T> cos = matmul(normalize_rows_clamped(features),
                      transpose(normalize_rows(base_prototypes, T(1e-8))));
  Var<T> scores = scale(cos, static_cast<T>(1.0 / opts.temperature));
  Var<T> bg = Var<T>::constant(Tensor<T>({P, 1}));
  if (background.defined()) bg = add_row(bg, background);
  return cross_entropy(concat_cols(bg, scores), labels);
}

struct LossComponents {
  double seg = 0;
  double orth = 0;
  std::optional<double> aux;
  std::optional<double> con;
};

struct LossBundle {
  double seg = 0;
  double orth = 0;
  double aux = 0;
  double con = 0;
  double total = 0;
};

// pretrain: seg + orth + aux; finetune: seg + orth + con. Unit weights.
inline LossBundle total_loss(const LossComponents& c, Phase phase) {
  LossBundle b{c.seg, c.orth, c.aux.value_or(0), c.con.value_or(0), 0};
  if (phase == Phase::pretrain) {
    if (!c.aux || c.con)
      throw ConfigError("pre-training loss takes seg, orth and aux components");
    b.total = b.seg + b.orth + b.aux;
  } else {
    if (c.aux || !c.con)
      throw ConfigError("fine-tuning loss takes seg, orth and con components");
    b.total = b.seg + b.orth + b.con;
  }
  for (double v : {b.seg, b.orth, b.aux, b.con, b.total})
    if (!std::isfinite(v)) throw InvariantError("non-finite loss component");
  return b;
}

}  // namespace gfss
