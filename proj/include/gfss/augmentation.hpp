#pragma once

// Weak (flip + crop) and strong (context-oriented cutout) views for the
// consistency objective, and the photometric alternative used in ablations.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "gfss/data.hpp"
#include "gfss/dataset_io.hpp"
#include "gfss/log.hpp"
#include "gfss/rng.hpp"

namespace gfss {

// Inclusive pixel bounds of one 4-connected component of one class.
struct BoundingBox {
  int class_id = 0;
  std::size_t x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  bool contains(std::size_t y, std::size_t x) const {
    return x >= x_min && x <= x_max && y >= y_min && y <= y_max;
  }
  bool on_perimeter(std::size_t y, std::size_t x) const {
    return contains(y, x) && (x == x_min || x == x_max || y == y_min || y == y_max);
  }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct Pixel {
  std::size_t y = 0, x = 0;
  friend bool operator==(const Pixel&, const Pixel&) = default;
};

enum class CutoutMode { bcutout, wcutout, ocutout, icutout };

inline const char* cutout_mode_name(CutoutMode m) {
  switch (m) {
    case CutoutMode::bcutout: return "bcutout";
    case CutoutMode::wcutout: return "wcutout";
    case CutoutMode::ocutout: return "ocutout";
    case CutoutMode::icutout: return "icutout";
  }
  return "?";
}

// The random choices behind one weak view.
struct WeakParams {
  bool flip = false;
  std::size_t oy = 0, ox = 0;
};

// Horizontal flip with probability 0.5, then a random crop_h x crop_w window.
// Images smaller than the crop are padded bottom/right with 0 (the
// normalized mean) and the mask with the ignore label.
inline Sample weak_augment(const Sample& sample, std::size_t crop_h, std::size_t crop_w,
                           Rng& rng, WeakParams* params_out = nullptr) {
  const std::size_t H = sample.height(), W = sample.width();
  const bool flip = rng.bernoulli(0.5);
  const std::size_t PH = std::max(H, crop_h), PW = std::max(W, crop_w);
  const std::size_t oy = rng.index(PH - crop_h + 1), ox = rng.index(PW - crop_w + 1);
  if (params_out) *params_out = {flip, oy, ox};
  Sample out;
  out.id = sample.id;
  out.image = Tensor<float>({crop_h, crop_w, 3});
  out.mask = Tensor<int>({crop_h, crop_w}, kIgnoreId);
  for (std::size_t y = 0; y < crop_h; ++y)
    for (std::size_t x = 0; x < crop_w; ++x) {
      const std::size_t sy = y + oy, px = x + ox;
      if (sy >= H || px >= W) continue;
      const std::size_t sx = flip ? W - 1 - px : px;
      out.mask(y, x) = sample.mask(sy, sx);
      for (std::size_t c = 0; c < 3; ++c) out.image(y, x, c) = sample.image(sy, sx, c);
    }
  return out;
}

inline Sample flip_horizontal(const Sample& s) {
  Sample out = s;
  const std::size_t H = s.height(), W = s.width();
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      out.mask(y, x) = s.mask(y, W - 1 - x);
      for (std::size_t c = 0; c < 3; ++c) out.image(y, x, c) = s.image(y, W - 1 - x, c);
    }
  return out;
}

// One box per 4-connected component of each foreground class, in raster
// order of each component's first pixel.
inline std::vector<BoundingBox> extract_boxes(const Tensor<int>& mask,
                                              int background_id = kBackgroundId) {
  const std::size_t H = mask.dim(0), W = mask.dim(1);
  std::vector<bool> seen(H * W, false);
  std::vector<BoundingBox> boxes;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < H * W; ++start) {
    const int cls = mask[start];
    if (seen[start] || cls == background_id || cls == kIgnoreId) continue;
    BoundingBox box{cls, start % W, start / W, start % W, start / W};
    seen[start] = true;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t y = p / W, x = p % W;
      box.x_min = std::min(box.x_min, x);
      box.x_max = std::max(box.x_max, x);
      box.y_min = std::min(box.y_min, y);
      box.y_max = std::max(box.y_max, y);
      auto visit = [&](std::size_t q) {
        if (!seen[q] && mask[q] == cls) {
          seen[q] = true;
          stack.push_back(q);
        }
      };
      if (x > 0) visit(p - 1);
      if (x + 1 < W) visit(p + 1);
      if (y > 0) visit(p - W);
      if (y + 1 < H) visit(p + W);
    }
    boxes.push_back(box);
  }
  return boxes;
}

// Pixels a cutout centre may be drawn from under `mode`, in raster order.
inline std::vector<Pixel> cutout_candidates(const std::vector<BoundingBox>& boxes, std::size_t H,
                                            std::size_t W, CutoutMode mode) {
  std::vector<Pixel> out;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      bool ok = false;
      switch (mode) {
        case CutoutMode::bcutout:
          ok = std::any_of(boxes.begin(), boxes.end(),
                           [&](const BoundingBox& b) { return b.on_perimeter(y, x); });
          break;
        case CutoutMode::wcutout:
          ok = std::any_of(boxes.begin(), boxes.end(),
                           [&](const BoundingBox& b) { return b.contains(y, x); });
          break;
        case CutoutMode::ocutout:
          ok = std::none_of(boxes.begin(), boxes.end(),
                            [&](const BoundingBox& b) { return b.contains(y, x); });
          break;
        case CutoutMode::icutout: ok = true; break;
      }
      if (ok) out.push_back({y, x});
    }
  return out;
}

struct CutoutCenter {
  Pixel pixel;
  CutoutMode used = CutoutMode::icutout;  // differs from the request on fallback
};

// Uniform draw over the candidate set of `mode`; an empty set falls back to
// the whole image with a warning.
inline CutoutCenter sample_cutout_center(const std::vector<BoundingBox>& boxes, std::size_t H,
                                         std::size_t W, CutoutMode mode, Rng& rng) {
  auto candidates = cutout_candidates(boxes, H, W, mode);
  CutoutMode used = mode;
  if (candidates.empty()) {
    log::warn(std::string("no eligible pixels for ") + cutout_mode_name(mode) +
              "; falling back to icutout");
    used = CutoutMode::icutout;
    candidates = cutout_candidates(boxes, H, W, used);
  }
  return {candidates[rng.index(candidates.size())], used};
}

// Inclusive [lo, hi] span of a `size`-wide window centred at c, clipped to
// [0, n). Offsets run -size/2 .. size - size/2 - 1.
inline std::pair<std::size_t, std::size_t> cutout_span(std::size_t c, std::size_t size,
                                                       std::size_t n) {
  const long long lo = static_cast<long long>(c) - static_cast<long long>(size / 2);
  const long long hi = lo + static_cast<long long>(size) - 1;
  return {static_cast<std::size_t>(std::max(0LL, lo)),
          static_cast<std::size_t>(std::min(hi, static_cast<long long>(n) - 1))};
}

// Fills the square with `fill` (0 is the per-channel dataset mean after
// normalization). Masks are never touched.
inline Tensor<float> apply_cutout(const Tensor<float>& image, Pixel center, std::size_t size,
                                  float fill = 0.0f) {
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  if (center.y >= H || center.x >= W) throw RangeError("cutout centre outside the image");
  Tensor<float> out = image;
  if (size == 0) return out;
  const auto [y0, y1] = cutout_span(center.y, size, H);
  const auto [x0, x1] = cutout_span(center.x, size, W);
  for (std::size_t y = y0; y <= y1; ++y)
    for (std::size_t x = x0; x <= x1; ++x)
      for (std::size_t c = 0; c < C; ++c) out(y, x, c) = fill;
  return out;
}

struct CutoutOptions {
  CutoutMode mode = CutoutMode::bcutout;
  std::size_t size = 16;
};

// Cutout on top of an already weakly augmented sample; same geometry.
inline Sample strong_augment(const Sample& weak, const CutoutOptions& opts, Rng& rng,
                             CutoutCenter* center_out = nullptr) {
  const auto boxes = extract_boxes(weak.mask);
  const CutoutCenter c = sample_cutout_center(boxes, weak.height(), weak.width(), opts.mode, rng);
  if (center_out) *center_out = c;
  Sample out = weak;
  out.image = apply_cutout(weak.image, c.pixel, opts.size);
  return out;
}

// ---------------------------------------------------------------------------
// Photometric alternative (contrast / brightness / sharpness).

enum class PhotometricOp { contrast, brightness, sharpness };

// magnitude in [0, 1); sign selects enhancement or reduction. Works in
// [0, 1] pixel space and clamps there.
inline Tensor<float> apply_photometric(const Tensor<float>& image, PhotometricOp op,
                                       double magnitude) {
  if (magnitude == 0.0) return image;
  const std::size_t H = image.dim(0), W = image.dim(1);
  const double factor = 1.0 + magnitude;
  std::vector<double> raw(image.size());
  for (std::size_t i = 0; i < image.size(); ++i)
    raw[i] = image[i] * kPixelStd[i % 3] + kPixelMean[i % 3];
  std::vector<double> out = raw;
  if (op == PhotometricOp::brightness) {
    for (auto& v : out) v *= factor;
  } else if (op == PhotometricOp::contrast) {
    double mean = 0;
    for (std::size_t i = 0; i < raw.size(); i += 3)
      mean += 0.299 * raw[i] + 0.587 * raw[i + 1] + 0.114 * raw[i + 2];
    mean /= double(H * W);
    for (auto& v : out) v = mean + (v - mean) * factor;
  } else {
    for (std::size_t y = 1; y + 1 < H; ++y)
      for (std::size_t x = 1; x + 1 < W; ++x)
        for (std::size_t c = 0; c < 3; ++c) {
          double blur = 0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx)
              blur += raw[((y + dy) * W + (x + dx)) * 3 + c] * (dx == 0 && dy == 0 ? 5.0 : 1.0);
          blur /= 13.0;
          const std::size_t i = (y * W + x) * 3 + c;
          out[i] = blur + (raw[i] - blur) * factor;
        }
  }
  Tensor<float> result(image.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    result[i] = static_cast<float>((std::clamp(out[i], 0.0, 1.0) - kPixelMean[i % 3]) /
                                   kPixelStd[i % 3]);
  return result;
}

// Two distinct photometric ops at random signed magnitudes in
// (-max_magnitude, max_magnitude). Geometry and mask are unchanged.
inline Sample randaugment_variant(const Sample& weak, Rng& rng, double max_magnitude = 0.5) {
  std::array<PhotometricOp, 3> ops{PhotometricOp::contrast, PhotometricOp::brightness,
                                   PhotometricOp::sharpness};
  rng.shuffle(ops.begin(), ops.end());
  Sample out = weak;
  for (int k = 0; k < 2; ++k) {
    const double m = rng.uniform(-max_magnitude, max_magnitude);
    out.image = apply_photometric(out.image, ops[k], m);
  }
  return out;
}

struct AugmentedPair {
  Sample weak;
  Sample strong;
  std::optional<CutoutCenter> cutout_center;
};

// ---------------------------------------------------------------------------
// Preview rendering

inline void draw_rect(RgbImage& img, std::size_t y0, std::size_t x0, std::size_t y1,
                      std::size_t x1, std::array<std::uint8_t, 3> color) {
  auto put = [&](std::size_t y, std::size_t x) {
    if (y < img.height && x < img.width) std::copy(color.begin(), color.end(), img.at(y, x));
  };
  for (std::size_t x = x0; x <= x1; ++x) {
    put(y0, x);
    put(y1, x);
  }
  for (std::size_t y = y0; y <= y1; ++y) {
    put(y, x0);
    put(y, x1);
  }
}

// Weak and strong views side by side; boxes in green on both, the cutout
// square in red on the strong view.
inline RgbImage render_pair_preview(const AugmentedPair& pair, std::size_t cutout_size) {
  const RgbImage weak = to_rgb(pair.weak.image), strong = to_rgb(pair.strong.image);
  const std::size_t H = weak.height, W = weak.width, gap = 4;
  RgbImage out{H, 2 * W + gap, std::vector<std::uint8_t>(H * (2 * W + gap) * 3, 255)};
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        out.at(y, x)[c] = weak.pixels[(y * W + x) * 3 + c];
        out.at(y, W + gap + x)[c] = strong.pixels[(y * W + x) * 3 + c];
      }
  for (const auto& b : extract_boxes(pair.weak.mask)) {
    draw_rect(out, b.y_min, b.x_min, b.y_max, b.x_max, {0, 255, 0});
    draw_rect(out, b.y_min, W + gap + b.x_min, b.y_max, W + gap + b.x_max, {0, 255, 0});
  }
  if (pair.cutout_center) {
    const auto [y0, y1] = cutout_span(pair.cutout_center->pixel.y, cutout_size, H);
    const auto [x0, x1] = cutout_span(pair.cutout_center->pixel.x, cutout_size, W);
    draw_rect(out, y0, W + gap + x0, y1, W + gap + x1, {255, 0, 0});
  }
  return out;
}

}  // namespace gfss
