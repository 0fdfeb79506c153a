#pragma once

// Class prototypes, projection-based feature decomposition, the pairwise
// orthogonality penalty, and novel-prototype modulation by cross-attention
// over the base prototypes.

#include <cmath>
#include <string>
#include <vector>

#include "gfss/autograd.hpp"
#include "gfss/backbone.hpp"
#include "gfss/rng.hpp"

namespace gfss {

inline constexpr double kMinPrototypeNorm = 1e-8;

enum class PrototypeRole { base, novel };

// C x d, one prototype per row.
template <typename T>
struct PrototypeSet {
  Tensor<T> vectors;
  PrototypeRole role = PrototypeRole::base;
  bool learnable = true;

  std::size_t count() const { return vectors.rows(); }
  std::size_t dim() const { return vectors.cols(); }

  void validate() const {
    if (vectors.rank() != 2) throw ShapeError("prototype set must be a matrix");
    if (!vectors.all_finite()) throw InvariantError("prototype set has non-finite entries");
    for (std::size_t i = 0; i < count(); ++i) {
      double s = 0;
      for (std::size_t j = 0; j < dim(); ++j) s += double(vectors(i, j)) * double(vectors(i, j));
      if (std::sqrt(s) < kMinPrototypeNorm)
        throw InvariantError("prototype " + std::to_string(i) + " has zero norm");
    }
  }

  // i.i.d. standard normal rows scaled to unit norm.
  static PrototypeSet random(std::size_t count, std::size_t dim, PrototypeRole role, Rng& rng) {
    PrototypeSet p{Tensor<T>({count, dim}), role, true};
    for (std::size_t i = 0; i < count; ++i) {
      double s = 0;
      std::vector<double> row(dim);
      for (auto& v : row) {
        v = rng.normal();
        s += v * v;
      }
      const double n = std::sqrt(s);
      for (std::size_t j = 0; j < dim; ++j) p.vectors(i, j) = static_cast<T>(row[j] / n);
    }
    return p;
  }
};

template <typename T>
struct Decomposition {
  std::vector<FeatureMap<T>> sub_features;  // one per prototype, in order
  FeatureMap<T> residual;                   // background component f_0
};

// f_i(x) = <f(x), u_i/|u_i|> u_i/|u_i|,  f_0(x) = f(x) - sum_i f_i(x).
template <typename T>
Decomposition<T> decompose(const FeatureMap<T>& feature, const Tensor<T>& prototypes) {
  const std::size_t d = feature.dim();
  if (prototypes.rank() != 2 || prototypes.cols() != d)
    throw ShapeError("decompose: prototypes " + shape_str(prototypes.shape()) +
                     " do not match feature dim " + std::to_string(d));
  const std::size_t C = prototypes.rows();
  std::vector<std::vector<T>> unit(C, std::vector<T>(d));
  for (std::size_t i = 0; i < C; ++i) {
    T s{};
    for (std::size_t j = 0; j < d; ++j) s += prototypes(i, j) * prototypes(i, j);
    const T n = std::sqrt(s);
    if (!(n >= T(kMinPrototypeNorm)))
      throw InvariantError("decompose: prototype " + std::to_string(i) + " has zero norm");
    for (std::size_t j = 0; j < d; ++j) unit[i][j] = prototypes(i, j) / n;
  }
  Decomposition<T> out;
  out.residual = feature;
  out.sub_features.assign(C, FeatureMap<T>{Tensor<T>(feature.values.shape()), feature.stride});
  const std::size_t cells = feature.height() * feature.width();
  for (std::size_t p = 0; p < cells; ++p) {
    const T* f = feature.values.data() + p * d;
    T* r = out.residual.values.data() + p * d;
    for (std::size_t i = 0; i < C; ++i) {
      T c{};
      for (std::size_t j = 0; j < d; ++j) c += f[j] * unit[i][j];
      T* fi = out.sub_features[i].values.data() + p * d;
      for (std::size_t j = 0; j < d; ++j) {
        fi[j] = c * unit[i][j];
        r[j] -= fi[j];
      }
    }
  }
  return out;
}

// Sum over ordered pairs i != j of |u_i . u_j|.
template <typename T>
Var<T> orthogonality_loss(const Var<T>& prototypes) {
  if (prototypes.value().rows() < 2) throw ShapeError("orthogonality_loss needs >= 2 prototypes");
  return ag::abs_offdiag_sum(ag::matmul(prototypes, ag::transpose(prototypes)));
}

template <typename T>
T orthogonality_loss(const Tensor<T>& prototypes) {
  return orthogonality_loss(Var<T>::constant(prototypes)).value()[0];
}

enum class ModulationMode { off, attention, cosine };

struct ModulationOptions {
  ModulationMode mode = ModulationMode::attention;
  // Divide attention scores by sqrt(d).
  bool scaled = false;
  bool fusion_bias = true;
  // Multiplier on cosine similarities in the cosine variant.
  double cosine_scale = 1.0;
};

// Learnable maps of the modulation block. Row-vector convention:
// q = u W_Q, and the fusion is [u, r] W_F + b_F with W_F of shape 2d x d.
template <typename T>
struct ModulationParams {
  Var<T> wq, wk, wv, fusion_w, fusion_b;

  std::size_t dim() const { return wq.value().rows(); }

  // Attention maps near identity (identity + noise) and a fusion that
  // passes u through unchanged, so modulation starts at U_hat = U_n.
  static ModulationParams pass_through(std::size_t d, Rng& rng, double noise = 0.01) {
    auto near_identity = [&] {
      Tensor<T> m = identity<T>(d);
      for (auto& v : m.values()) v += static_cast<T>(rng.normal() * noise);
      return Var<T>::leaf(std::move(m), true);
    };
    ModulationParams p;
    p.wq = near_identity();
    p.wk = near_identity();
    p.wv = near_identity();
    Tensor<T> fw({2 * d, d});
    for (std::size_t i = 0; i < d; ++i) fw(i, i) = T{1};
    p.fusion_w = Var<T>::leaf(std::move(fw), true);
    p.fusion_b = Var<T>::leaf(Tensor<T>({1, d}), true);
    return p;
  }

  static ModulationParams from_tensors(Tensor<T> wq, Tensor<T> wk, Tensor<T> wv,
                                       Tensor<T> fusion_w, Tensor<T> fusion_b) {
    return {Var<T>::leaf(std::move(wq), true), Var<T>::leaf(std::move(wk), true),
            Var<T>::leaf(std::move(wv), true), Var<T>::leaf(std::move(fusion_w), true),
            Var<T>::leaf(std::move(fusion_b), true)};
  }

  void validate(std::size_t d) const {
    require_shape(wq.value(), {d, d}, "npm.wq");
    require_shape(wk.value(), {d, d}, "npm.wk");
    require_shape(wv.value(), {d, d}, "npm.wv");
    require_shape(fusion_w.value(), {2 * d, d}, "npm.fusion.weight");
    require_shape(fusion_b.value(), {1, d}, "npm.fusion.bias");
  }

  std::vector<std::pair<std::string, Var<T>>> named_parameters() const {
    return {{"npm.wq", wq}, {"npm.wk", wk}, {"npm.wv", wv},
            {"npm.fusion.weight", fusion_w}, {"npm.fusion.bias", fusion_b}};
  }
};

template <typename T>
struct ModulationResult {
  Var<T> prototypes;  // N x d, replaces U_n downstream
  Var<T> attention;   // N x M, rows on the simplex
};

// U_hat_i = fusion([u_i, softmax(q_i K^T) V]) for every novel row u_i.
// Gradients reach U_b only if U_b itself requires them.
template <typename T>
ModulationResult<T> modulate_novel_prototypes(const Var<T>& novel, const Var<T>& base,
                                              const ModulationParams<T>& params,
                                              const ModulationOptions& opts = {}) {
  using namespace ag;
  if (base.value().rank() != 2 || base.value().rows() == 0)
    throw ConfigError("prototype modulation needs at least one base prototype");
  const std::size_t d = novel.value().cols();
  if (base.value().cols() != d) throw ShapeError("modulation: base/novel dim mismatch");
  params.validate(d);

  Var<T> scores;
  if (opts.mode == ModulationMode::cosine) {
    scores = matmul(normalize_rows(novel), transpose(normalize_rows(base)));
    scores = scale(scores, static_cast<T>(opts.cosine_scale));
  } else {
    Var<T> q = matmul(novel, params.wq);
    Var<T> k = matmul(base, params.wk);
    scores = matmul(q, transpose(k));
    if (opts.scaled) scores = scale(scores, static_cast<T>(1.0 / std::sqrt(double(d))));
  }
  Var<T> attn = softmax_rows(scores);
  Var<T> recon = matmul(attn, matmul(base, params.wv));
  Var<T> fused = matmul(concat_cols(novel, recon), params.fusion_w);
  if (opts.fusion_bias) fused = add_row(fused, params.fusion_b);
  return {fused, attn};
}

// Ablation variant: attention from raw cosine similarities, no W_Q/W_K.
template <typename T>
ModulationResult<T> alternate_modulation_cosine(const Var<T>& novel, const Var<T>& base,
                                                const ModulationParams<T>& params,
                                                ModulationOptions opts = {}) {
  opts.mode = ModulationMode::cosine;
  return modulate_novel_prototypes(novel, base, params, opts);
}

template <typename T>
PrototypeSet<T> modulate_novel_prototypes(const PrototypeSet<T>& novel,
                                          const PrototypeSet<T>& base,
                                          const ModulationParams<T>& params,
                                          const ModulationOptions& opts = {}) {
  auto r = modulate_novel_prototypes(Var<T>::constant(novel.vectors),
                                     Var<T>::constant(base.vectors), params, opts);
  return {r.prototypes.value(), PrototypeRole::novel, novel.learnable};
}

}  // namespace gfss
