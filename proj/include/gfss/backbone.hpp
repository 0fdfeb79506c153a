#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gfss/autograd.hpp"
#include "gfss/nn.hpp"
#include "gfss/rng.hpp"

namespace gfss {

// Dense feature map: values is [h, w, d], i.e. one d-vector per cell.
template <typename T>
struct FeatureMap {
  Tensor<T> values;
  std::size_t stride = 1;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
  std::size_t dim() const { return values.dim(2); }
  // [h*w, d] view as a copy.
  Tensor<T> rows() const { return values.reshaped({height() * width(), dim()}); }
};

// Any image -> feature function; lets a pretrained network stand in for the
// toy backbone. It is treated as frozen.
template <typename T>
using FeatureExtractor = std::function<FeatureMap<T>(const Tensor<T>& image_hwc)>;

struct BackboneConfig {
  // Output channels of every block but the last; the last emits feature_dim.
  std::vector<std::size_t> widths{16, 32, 32};
  std::vector<std::size_t> strides{1, 2, 2, 1};
  std::size_t feature_dim = 32;
  std::size_t norm_groups = 4;
  // Constant gain on the output features.
  double feature_scale = 1.0;
  bool trainable = true;

  std::size_t num_blocks() const { return strides.size(); }
  std::size_t total_stride() const {
    std::size_t s = 1;
    for (auto v : strides) s *= v;
    return s;
  }
  void validate() const {
    if (widths.size() + 1 != strides.size())
      throw ConfigError("backbone needs one width per block except the last");
    if (feature_dim < 2) throw ConfigError("feature_dim must be at least 2");
    for (auto w : widths)
      if (w == 0 || w % norm_groups != 0)
        throw ConfigError("block width " + std::to_string(w) + " not divisible by norm_groups");
    if (feature_dim % norm_groups != 0)
      throw ConfigError("feature_dim not divisible by norm_groups");
    if (!(feature_scale > 0)) throw ConfigError("feature_scale must be positive");
    for (auto s : strides)
      if (s != 1 && s != 2) throw ConfigError("block strides must be 1 or 2");
  }
};

template <typename T>
Tensor<T> image_to_chw(const Tensor<float>& hwc) {
  return ag::hwc_to_chw(hwc.cast<T>());
}

// conv3x3 -> group norm -> ReLU, repeated. Stride 4 overall by default.
template <typename T>
class Backbone {
 public:
  struct Block {
    Var<T> weight, bias, gamma, beta;
    std::size_t stride;
  };

  Backbone() = default;
  Backbone(BackboneConfig cfg, Rng& init) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::size_t in = 3;
    for (std::size_t b = 0; b < cfg_.num_blocks(); ++b) {
      const std::size_t out = b + 1 < cfg_.num_blocks() ? cfg_.widths[b] : cfg_.feature_dim;
      Tensor<T> w({out, in, 3, 3});
      const double sd = std::sqrt(2.0 / static_cast<double>(in * 9));
      for (auto& v : w.values()) v = static_cast<T>(init.normal() * sd);
      blocks_.push_back({Var<T>::leaf(std::move(w), cfg_.trainable),
                         Var<T>::leaf(Tensor<T>({out}), cfg_.trainable),
                         Var<T>::leaf(Tensor<T>({out}, T{1}), cfg_.trainable),
                         Var<T>::leaf(Tensor<T>({out}), cfg_.trainable), cfg_.strides[b]});
      in = out;
    }
  }

  const BackboneConfig& config() const { return cfg_; }
  std::size_t stride() const { return cfg_.total_stride(); }
  std::size_t feature_dim() const { return cfg_.feature_dim; }

  std::pair<std::size_t, std::size_t> feature_grid(std::size_t H, std::size_t W) const {
    std::size_t h = H, w = W;
    for (auto s : cfg_.strides) {
      h = ag::conv_out_size(h, 3, s, 1);
      w = ag::conv_out_size(w, 3, s, 1);
    }
    return {h, w};
  }

  // image: [3, H, W]  ->  per-cell rows [h*w, d].
  Var<T> forward(const Tensor<T>& image_chw) const {
    if (image_chw.rank() != 3 || image_chw.dim(0) != 3)
      throw ShapeError("backbone expects a 3-channel image, got " + shape_str(image_chw.shape()));
    if (image_chw.dim(1) < stride() || image_chw.dim(2) < stride())
      throw ShapeError("image " + shape_str(image_chw.shape()) + " is smaller than the stride " +
                       std::to_string(stride()));
    return forward(Var<T>::constant(image_chw));
  }

  // Differentiable in the input as well.
  Var<T> forward(const Var<T>& image_chw) const {
    Var<T> x = image_chw;
    for (const auto& b : blocks_) {
      x = ag::conv2d(x, b.weight, b.bias, b.stride, 1);
      x = ag::group_norm(x, b.gamma, b.beta, cfg_.norm_groups);
      x = ag::relu(x);
    }
    if (cfg_.feature_scale != 1.0) x = ag::scale(x, static_cast<T>(cfg_.feature_scale));
    return ag::chw_to_rows(x);
  }

  FeatureMap<T> extract_features(const Tensor<float>& image_hwc) const {
    if (image_hwc.rank() != 3 || image_hwc.dim(2) != 3)
      throw ShapeError("expected an H x W x 3 image, got " + shape_str(image_hwc.shape()));
    const auto [h, w] = feature_grid(image_hwc.dim(0), image_hwc.dim(1));
    Var<T> rows = forward(image_to_chw<T>(image_hwc));
    return {rows.value().reshaped({h, w, cfg_.feature_dim}), stride()};
  }

  void set_trainable(bool on) {
    for (auto& b : blocks_)
      for (Var<T>* v : {&b.weight, &b.bias, &b.gamma, &b.beta}) v->set_requires_grad(on);
  }

  std::vector<std::pair<std::string, Var<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Var<T>>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string p = "backbone.block" + std::to_string(i) + ".";
      out.emplace_back(p + "conv.weight", blocks_[i].weight);
      out.emplace_back(p + "conv.bias", blocks_[i].bias);
      out.emplace_back(p + "norm.weight", blocks_[i].gamma);
      out.emplace_back(p + "norm.bias", blocks_[i].beta);
    }
    return out;
  }

 private:
  BackboneConfig cfg_;
  std::vector<Block> blocks_;
};

}  // namespace gfss
