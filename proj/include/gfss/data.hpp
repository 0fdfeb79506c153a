#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "gfss/error.hpp"
#include "gfss/rng.hpp"
#include "gfss/tensor.hpp"

namespace gfss {

inline constexpr int kBackgroundId = 0;
inline constexpr int kIgnoreId = 255;

// Base/novel/background partition for one fold. Model channel order is
// background, then base ids in order, then novel ids in order.
struct ClassTaxonomy {
  std::vector<int> base_ids;
  std::vector<int> novel_ids;
  int background_id = kBackgroundId;

  std::size_t num_base() const { return base_ids.size(); }
  std::size_t num_novel() const { return novel_ids.size(); }

  bool is_base(int id) const {
    return std::find(base_ids.begin(), base_ids.end(), id) != base_ids.end();
  }
  bool is_novel(int id) const {
    return std::find(novel_ids.begin(), novel_ids.end(), id) != novel_ids.end();
  }
  bool is_known(int id) const { return id == background_id || is_base(id) || is_novel(id); }

  // Channel index of a global class id, or -1 for the ignore label.
  // Novel ids map past the base block; pass include_novel=false for the
  // pre-training head, where they must not occur.
  int channel_of(int id, bool include_novel = true) const {
    if (id == kIgnoreId) return -1;
    if (id == background_id) return 0;
    for (std::size_t i = 0; i < base_ids.size(); ++i)
      if (base_ids[i] == id) return static_cast<int>(1 + i);
    if (include_novel)
      for (std::size_t i = 0; i < novel_ids.size(); ++i)
        if (novel_ids[i] == id) return static_cast<int>(1 + base_ids.size() + i);
    throw DataError("class id " + std::to_string(id) + " is not part of the taxonomy");
  }

  int id_of_channel(std::size_t ch) const {
    if (ch == 0) return background_id;
    if (ch <= base_ids.size()) return base_ids[ch - 1];
    if (ch <= base_ids.size() + novel_ids.size()) return novel_ids[ch - 1 - base_ids.size()];
    throw RangeError("channel " + std::to_string(ch) + " out of range");
  }

  void validate() const {
    if (base_ids.empty() || novel_ids.empty())
      throw ConfigError("taxonomy needs at least one base and one novel class");
    std::set<int> seen{background_id};
    for (int id : base_ids)
      if (!seen.insert(id).second || id == kIgnoreId)
        throw ConfigError("duplicate or reserved class id " + std::to_string(id));
    for (int id : novel_ids)
      if (!seen.insert(id).second || id == kIgnoreId)
        throw ConfigError("duplicate or reserved class id " + std::to_string(id));
  }

  friend bool operator==(const ClassTaxonomy&, const ClassTaxonomy&) = default;
};

// image: H x W x 3 normalized reals; mask: H x W global class ids.
struct Sample {
  Tensor<float> image;
  Tensor<int> mask;
  std::string id;

  std::size_t height() const { return mask.dim(0); }
  std::size_t width() const { return mask.dim(1); }

  bool contains(int class_id) const {
    const auto v = mask.values();
    return std::find(v.begin(), v.end(), class_id) != v.end();
  }

  // Sorted distinct ids, ignore label excluded.
  std::vector<int> classes_present() const {
    std::set<int> s(mask.values().begin(), mask.values().end());
    s.erase(kIgnoreId);
    return {s.begin(), s.end()};
  }
};

struct DatasetSpec {
  int num_classes = 8;
  int num_folds = 2;
  int images_per_class = 20;
  int test_images_per_class = 10;
  std::size_t height = 64;
  std::size_t width = 64;
  std::uint64_t seed = 1;
  // Chance that an image also holds 1..max_context_objects other classes.
  double context_probability = 0.6;
  int max_context_objects = 2;

  void validate() const {
    if (num_classes < 2 || num_classes > 254)
      throw ConfigError("num_classes must be in [2, 254]");
    if (num_folds < 2) throw ConfigError("num_folds must be at least 2");
    if (num_classes % num_folds != 0)
      throw ConfigError("num_classes (" + std::to_string(num_classes) +
                        ") is not divisible by num_folds (" + std::to_string(num_folds) + ")");
    if (images_per_class < 1 || test_images_per_class < 0)
      throw ConfigError("images_per_class must be positive");
    if (height < 8 || width < 8) throw ConfigError("image size must be at least 8x8");
    if (!(context_probability >= 0 && context_probability <= 1))
      throw ConfigError("context_probability must be in [0, 1]");
    if (max_context_objects < 1) throw ConfigError("max_context_objects must be at least 1");
  }

  std::vector<int> class_ids() const {
    std::vector<int> ids(num_classes);
    for (int i = 0; i < num_classes; ++i) ids[i] = i + 1;
    return ids;
  }
};

// Contiguous-block fold split: fold k's novel classes are the k-th block.
inline ClassTaxonomy split_folds(const std::vector<int>& all_class_ids, int num_folds,
                                 int fold_index) {
  if (num_folds < 1 || all_class_ids.size() % static_cast<std::size_t>(num_folds) != 0)
    throw ConfigError(std::to_string(all_class_ids.size()) + " classes cannot be split into " +
                      std::to_string(num_folds) + " folds");
  if (fold_index < 0 || fold_index >= num_folds)
    throw RangeError("fold index " + std::to_string(fold_index) + " outside [0, " +
                     std::to_string(num_folds) + ")");
  const std::size_t block = all_class_ids.size() / static_cast<std::size_t>(num_folds);
  ClassTaxonomy tax;
  for (std::size_t i = 0; i < all_class_ids.size(); ++i) {
    if (i / block == static_cast<std::size_t>(fold_index))
      tax.novel_ids.push_back(all_class_ids[i]);
    else
      tax.base_ids.push_back(all_class_ids[i]);
  }
  tax.validate();
  return tax;
}

// Explicit split, e.g. a semantically disjoint vehicles-vs-animals partition.
inline ClassTaxonomy split_explicit(std::vector<int> base_ids, std::vector<int> novel_ids) {
  ClassTaxonomy tax{std::move(base_ids), std::move(novel_ids), kBackgroundId};
  tax.validate();
  return tax;
}

// Novel-class pixels become background; the base-set curation rule.
inline Sample relabel_for_pretraining(const Sample& sample, const ClassTaxonomy& taxonomy) {
  Sample out = sample;
  for (auto& v : out.mask.values()) {
    if (v == kIgnoreId || v == taxonomy.background_id || taxonomy.is_base(v)) continue;
    if (taxonomy.is_novel(v)) {
      v = taxonomy.background_id;
      continue;
    }
    throw DataError("sample " + sample.id + " has unknown class id " + std::to_string(v));
  }
  return out;
}

// Samples that carry at least one base-class pixel, relabelled for phase 1.
inline std::vector<Sample> base_training_set(const std::vector<Sample>& train,
                                             const ClassTaxonomy& taxonomy) {
  std::vector<Sample> out;
  for (const auto& s : train) {
    const auto present = s.classes_present();
    if (std::any_of(present.begin(), present.end(), [&](int id) { return taxonomy.is_base(id); }))
      out.push_back(relabel_for_pretraining(s, taxonomy));
  }
  return out;
}

// K samples per novel class, in taxonomy order (sample j is for
// novel_ids[j / K]). Each class draws from its own seeded stream.
inline std::vector<Sample> sample_support_set(const std::vector<Sample>& novel_pool,
                                              const ClassTaxonomy& taxonomy, int shots,
                                              std::uint64_t seed) {
  if (shots < 1) throw ConfigError("shots must be at least 1");
  std::vector<Sample> out;
  for (int cls : taxonomy.novel_ids) {
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < novel_pool.size(); ++i)
      if (novel_pool[i].contains(cls)) eligible.push_back(i);
    if (eligible.size() < static_cast<std::size_t>(shots))
      throw DataError("novel class " + std::to_string(cls) + " has " +
                      std::to_string(eligible.size()) + " candidate images, need " +
                      std::to_string(shots));
    Rng rng(seed, "support/" + std::to_string(cls));
    rng.shuffle(eligible.begin(), eligible.end());
    for (int k = 0; k < shots; ++k) out.push_back(novel_pool[eligible[k]]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic shapes

inline constexpr std::array<float, 3> kPixelMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kPixelStd{0.229f, 0.224f, 0.225f};

inline float normalize_pixel(std::uint8_t v, std::size_t channel) {
  return (static_cast<float>(v) / 255.0f - kPixelMean[channel]) / kPixelStd[channel];
}

inline std::uint8_t denormalize_pixel(float v, std::size_t channel) {
  const float raw = (v * kPixelStd[channel] + kPixelMean[channel]) * 255.0f;
  return static_cast<std::uint8_t>(std::clamp(std::lround(raw), 0L, 255L));
}

enum class ShapeFamily { disk, square, triangle, diamond, ring, cross, ellipse, bar };

namespace detail {

inline std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

// Signed inside test for a shape centred at the origin with radius r.
inline bool inside_shape(ShapeFamily f, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (f) {
    case ShapeFamily::disk: return dx * dx + dy * dy <= r * r;
    case ShapeFamily::square: return ax <= 0.8 * r && ay <= 0.8 * r;
    case ShapeFamily::triangle: return dy <= 0.7 * r && dy >= -r + 2.0 * ax * 0.85;
    case ShapeFamily::diamond: return ax + ay <= r;
    case ShapeFamily::ring: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.36 * r * r;
    }
    case ShapeFamily::cross: return (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r);
    case ShapeFamily::ellipse: return (dx * dx) / (r * r) + (dy * dy) / (0.25 * r * r) <= 1.0;
    case ShapeFamily::bar: return ax <= 0.35 * r && ay <= r;
  }
  return false;
}

struct ClassStyle {
  ShapeFamily family;
  double hue;
};

inline ClassStyle class_style(int class_id, int num_classes) {
  const int k = class_id - 1;
  // Hue order strides around the wheel so that contiguous fold blocks do
  // not occupy one half of the colour space.
  int stride = 3;
  while (std::gcd(stride, num_classes) != 1) ++stride;
  const double hue = static_cast<double>((k * stride) % num_classes) / num_classes;
  return {static_cast<ShapeFamily>(k % 8), hue};
}

struct Canvas {
  std::size_t H, W;
  std::vector<std::array<double, 3>> rgb;
  Tensor<int> mask;
};

inline Canvas textured_background(std::size_t H, std::size_t W, Rng& rng) {
  Canvas cv{H, W, std::vector<std::array<double, 3>>(H * W), Tensor<int>({H, W}, kBackgroundId)};
  const double base = rng.uniform(0.3, 0.6);
  const std::array<double, 3> tint{rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05),
                                   rng.uniform(-0.05, 0.05)};
  const double fx = rng.uniform(0.05, 0.3), fy = rng.uniform(0.05, 0.3);
  const double phase = rng.uniform(0, 6.283);
  const double amp = rng.uniform(0.03, 0.1);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double t = amp * std::sin(fx * x + fy * y + phase);
      for (int c = 0; c < 3; ++c)
        cv.rgb[y * W + x][c] = base + tint[c] + t + rng.normal() * 0.03;
    }
  return cv;
}

inline void draw_object(Canvas& cv, int class_id, int num_classes, Rng& rng) {
  const ClassStyle style = class_style(class_id, num_classes);
  const double side = static_cast<double>(std::min(cv.H, cv.W));
  const double r = rng.uniform(0.14, 0.26) * side;
  const double cx = rng.uniform(0.15, 0.85) * cv.W;
  const double cy = rng.uniform(0.15, 0.85) * cv.H;
  const double value = rng.uniform(0.75, 1.0);
  const auto color = hsv_to_rgb(style.hue + rng.uniform(-0.015, 0.015), 0.85, value);
  for (std::size_t y = 0; y < cv.H; ++y)
    for (std::size_t x = 0; x < cv.W; ++x) {
      if (!inside_shape(style.family, x + 0.5 - cx, y + 0.5 - cy, r)) continue;
      for (int c = 0; c < 3; ++c) cv.rgb[y * cv.W + x][c] = color[c] + rng.normal() * 0.03;
      cv.mask(y, x) = class_id;
    }
}

inline Sample finish(const Canvas& cv, std::string id) {
  Sample s;
  s.id = std::move(id);
  s.mask = cv.mask;
  s.image = Tensor<float>({cv.H, cv.W, 3});
  for (std::size_t i = 0; i < cv.H * cv.W; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const auto q = static_cast<std::uint8_t>(std::clamp(std::lround(cv.rgb[i][c] * 255.0), 0L, 255L));
      s.image[i * 3 + c] = normalize_pixel(q, c);
    }
  return s;
}

inline constexpr int kMaxLayoutAttempts = 16;
inline constexpr long kMinContextPixels = 16;

inline std::vector<Sample> generate_split(const DatasetSpec& spec, int per_class, Rng& rng,
                                          const std::string& prefix) {
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(spec.num_classes * per_class));
  for (int cls = 1; cls <= spec.num_classes; ++cls)
    for (int i = 0; i < per_class; ++i) {
      const bool with_context = rng.bernoulli(spec.context_probability);
      const int extra =
          with_context ? 1 + static_cast<int>(rng.index(static_cast<std::size_t>(spec.max_context_objects))) : 0;
      Canvas cv;
      // Redraw while the primary object hides a context object entirely.
      for (int attempt = 0; attempt < kMaxLayoutAttempts; ++attempt) {
        cv = textured_background(spec.height, spec.width, rng);
        std::vector<int> others;
        for (int o = 1; o <= spec.num_classes; ++o)
          if (o != cls) others.push_back(o);
        rng.shuffle(others.begin(), others.end());
        others.resize(std::min<std::size_t>(others.size(), static_cast<std::size_t>(extra)));
        // Context objects first, primary last so it is never occluded.
        for (int o : others) draw_object(cv, o, spec.num_classes, rng);
        draw_object(cv, cls, spec.num_classes, rng);
        const auto& v = cv.mask.values();
        if (std::all_of(others.begin(), others.end(), [&](int o) {
              return std::count(v.begin(), v.end(), o) >= kMinContextPixels;
            }))
          break;
      }
      char name[64];
      std::snprintf(name, sizeof name, "%s_c%02d_%04d", prefix.c_str(), cls, i);
      out.push_back(finish(cv, name));
    }
  return out;
}

}  // namespace detail

struct SyntheticDataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

// Each class is one shape family in one hue; one primary object per image
// plus, with probability context_probability, up to max_context_objects
// context objects of other classes, each left at least partly visible.
inline SyntheticDataset generate_synthetic_dataset(const DatasetSpec& spec) {
  spec.validate();
  Rng train_rng(spec.seed, "synth/train");
  Rng test_rng(spec.seed, "synth/test");
  return {detail::generate_split(spec, spec.images_per_class, train_rng, "train"),
          detail::generate_split(spec, spec.test_images_per_class, test_rng, "test")};
}

}  // namespace gfss
