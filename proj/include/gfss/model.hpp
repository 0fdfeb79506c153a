#pragma once

// The full segmentation model: feature extractor, prototypes, classifier
// heads and the modulation block, with phase-dependent trainability.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "gfss/backbone.hpp"
#include "gfss/classifiers.hpp"
#include "gfss/config.hpp"
#include "gfss/data.hpp"
#include "gfss/losses.hpp"
#include "gfss/prototypes.hpp"

namespace gfss {

using TensorMap = std::map<std::string, Tensor<float>>;

template <typename T>
class GfssModel {
 public:
  Backbone<T> backbone;
  // When set, replaces the backbone as a frozen feature source.
  FeatureExtractor<T> external_extractor;
  ClassTaxonomy taxonomy;
  ModulationOptions modulation;
  AuxOptions aux;
  bool learned_aux_background = false;

  Var<T> proto_base;   // M x d
  Var<T> proto_novel;  // N x d
  Var<T> clf_base;     // d x M
  Var<T> clf_novel;    // d x N
  Var<T> clf_background;  // d x 1
  Var<T> aux_background;  // 1
  ModulationParams<T> npm;

  GfssModel() = default;

  // Fresh phase-1 model; novel parameters are placeholders until
  // init_novel().
  GfssModel(const TrainConfig& cfg, const ClassTaxonomy& tax)
      : taxonomy(tax), learned_aux_background(cfg.aux_background == AuxBackground::learned) {
    configure(cfg);
    Rng bb_rng(cfg.seed, "init/backbone");
    backbone = Backbone<T>(cfg.backbone_config(), bb_rng);
    const std::size_t d = cfg.feature_dim, M = tax.num_base();
    Rng base_rng(cfg.seed, "init/base");
    proto_base = Var<T>::leaf(PrototypeSet<T>::random(M, d, PrototypeRole::base, base_rng).vectors, true);
    const double sd = cfg.init_scale / std::sqrt(double(d));
    clf_base = Var<T>::leaf(ClassifierWeights<T>::random(d, M, ClassifierRole::base, base_rng, sd).theta, true);
    clf_background = Var<T>::leaf(
        ClassifierWeights<T>::random(d, 1, ClassifierRole::background, base_rng, sd).theta, true);
    aux_background = Var<T>::leaf(Tensor<T>({1}), learned_aux_background);
    Rng novel_rng(cfg.seed, "init/novel-placeholder");
    init_novel(cfg, novel_rng);
    set_phase(Phase::pretrain);
  }

  void configure(const TrainConfig& cfg) {
    modulation.mode = cfg.npm;
    modulation.scaled = cfg.npm_scaled;
    modulation.fusion_bias = cfg.fusion_bias;
    modulation.cosine_scale = cfg.cosine_scale;
    aux.temperature = cfg.aux_temperature;
    learned_aux_background = cfg.aux_background == AuxBackground::learned;
  }

  std::size_t dim() const { return proto_base.value().cols(); }
  std::size_t num_base() const { return taxonomy.num_base(); }
  std::size_t num_novel() const { return taxonomy.num_novel(); }

  void init_novel(const TrainConfig& cfg, Rng& rng) {
    const std::size_t d = cfg.feature_dim, N = taxonomy.num_novel();
    proto_novel = Var<T>::leaf(PrototypeSet<T>::random(N, d, PrototypeRole::novel, rng).vectors, true);
    const double sd = cfg.init_scale / std::sqrt(double(d));
    clf_novel = Var<T>::leaf(ClassifierWeights<T>::random(d, N, ClassifierRole::novel, rng, sd).theta, true);
    npm = ModulationParams<T>::pass_through(d, rng, cfg.npm_init_noise);
  }

  // Phase 1 trains the extractor, base prototypes and heads; phase 2 only
  // the novel prototypes, novel head and modulation block.
  void set_phase(Phase phase) {
    const bool pre = phase == Phase::pretrain;
    backbone.set_trainable(pre && !external_extractor);
    proto_base.set_requires_grad(pre);
    clf_base.set_requires_grad(pre);
    clf_background.set_requires_grad(pre);
    aux_background.set_requires_grad(pre && learned_aux_background);
    proto_novel.set_requires_grad(!pre);
    clf_novel.set_requires_grad(!pre);
    const bool npm_on = !pre && modulation.mode != ModulationMode::off;
    for (auto& [name, v] : npm.named_parameters()) v.set_requires_grad(npm_on);
  }

  std::vector<Var<T>> trainable_parameters() const {
    std::vector<Var<T>> out;
    for (auto& [name, v] : named_parameters())
      if (v.requires_grad()) out.push_back(v);
    return out;
  }

  std::vector<std::pair<std::string, Var<T>>> named_parameters() const {
    auto out = backbone.named_parameters();
    out.emplace_back("prototypes.base", proto_base);
    out.emplace_back("prototypes.novel", proto_novel);
    out.emplace_back("clf.base", clf_base);
    out.emplace_back("clf.novel", clf_novel);
    out.emplace_back("clf.background", clf_background);
    out.emplace_back("aux.background", aux_background);
    for (auto& p : npm.named_parameters()) out.push_back(p);
    return out;
  }

  TensorMap state() const {
    TensorMap out;
    for (const auto& [name, v] : named_parameters()) out[name] = v.value().template cast<float>();
    return out;
  }

  // Copies values in place (graph identity and trainability are kept).
  void load_state(const TensorMap& state) {
    for (auto& [name, v] : named_parameters()) {
      auto it = state.find(name);
      if (it == state.end()) throw LoadError("checkpoint lacks tensor " + name);
      if (it->second.shape() != v.value().shape())
        throw ShapeError("tensor " + name + ": checkpoint has " + shape_str(it->second.shape()) +
                         ", model expects " + shape_str(v.value().shape()));
      Var<T> mv = v;
      mv.mutable_value() = it->second.template cast<T>();
    }
  }

  struct Features {
    Var<T> rows;  // [h*w, d]
    std::size_t h = 0, w = 0;
  };

  Features features(const Tensor<float>& image_hwc) const {
    if (external_extractor) {
      FeatureMap<T> fm = external_extractor(image_hwc.cast<T>());
      if (fm.dim() != dim())
        throw ShapeError("external extractor emits d=" + std::to_string(fm.dim()) +
                         ", model expects " + std::to_string(dim()));
      return {Var<T>::constant(fm.rows()), fm.height(), fm.width()};
    }
    const auto [h, w] = backbone.feature_grid(image_hwc.dim(0), image_hwc.dim(1));
    return {backbone.forward(image_to_chw<T>(image_hwc)), h, w};
  }

  // U_hat_n when modulation is on, U_n otherwise.
  Var<T> effective_novel_prototypes() const {
    if (modulation.mode == ModulationMode::off) return proto_novel;
    return modulate_novel_prototypes(proto_novel, proto_base, npm, modulation).prototypes;
  }

  // Logits [P, M+1] (phase 1) or [P, M+N+1] (phase 2), background first.
  Var<T> logits(const Var<T>& feature_rows, Phase phase, const Var<T>& novel_eff = {}) const {
    if (phase == Phase::pretrain)
      return score_rows(feature_rows, proto_base, clf_base, clf_background);
    const Var<T> nov = novel_eff.defined() ? novel_eff : effective_novel_prototypes();
    return score_rows(feature_rows, ag::concat_rows(proto_base, nov),
                      ag::concat_cols(clf_base, clf_novel), clf_background);
  }

  std::size_t num_channels(Phase phase) const {
    return 1 + num_base() + (phase == Phase::finetune ? num_novel() : 0);
  }

  // Per-pixel class ids at image resolution.
  Tensor<int> predict(const Tensor<float>& image_hwc, Phase phase) const {
    const std::size_t H = image_hwc.dim(0), W = image_hwc.dim(1);
    const Features f = features(image_hwc);
    const Var<T> lg = ag::upsample_rows(logits(f.rows, phase), f.h, f.w, H, W);
    const auto ch = argmax_rows(lg.value());
    Tensor<int> out({H, W});
    for (std::size_t i = 0; i < ch.size(); ++i)
      out[i] = taxonomy.id_of_channel(static_cast<std::size_t>(ch[i]));
    return out;
  }
};

// Channel labels of a mask: background 0, base 1..M, novel M+1..M+N,
// ignore -1. With include_novel false, novel pixels must already be gone.
inline std::vector<int> channel_labels(const Tensor<int>& mask, const ClassTaxonomy& tax,
                                       bool include_novel = true) {
  std::vector<int> out(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = tax.channel_of(mask[i], include_novel);
  return out;
}

// Nearest-neighbour resampling of a label grid (pixel centres).
inline std::vector<int> downsample_labels(const std::vector<int>& labels, std::size_t H,
                                          std::size_t W, std::size_t h, std::size_t w) {
  std::vector<int> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t sy = std::min(H - 1, static_cast<std::size_t>((double(y) + 0.5) * double(H) / double(h)));
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sx = std::min(W - 1, static_cast<std::size_t>((double(x) + 0.5) * double(W) / double(w)));
      out[y * w + x] = labels[sy * W + sx];
    }
  }
  return out;
}

}  // namespace gfss
