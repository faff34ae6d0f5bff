#pragma once

// Training-pair synthesis: random crop, flip/rotate augmentation, bicubic
// downsampling, and shuffled batching.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "swiftsr/image_io.hpp"
#include "swiftsr/tensor.hpp"

namespace swiftsr {

using Rng = std::mt19937_64;

struct PipelineConfig {
  std::size_t crop_size = 96;
  std::size_t scale = 4;
  double flip_prob = 0.5;
  double rot90_prob = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (scale == 0 || crop_size == 0 || crop_size % scale != 0) {
      throw Error("crop_size " + std::to_string(crop_size) + " must be a positive multiple of scale " +
                  std::to_string(scale));
    }
  }
};

struct ImagePair {
  Image hr;
  Image lr;
};

struct Crop {
  Image image;
  std::size_t top = 0;
  std::size_t left = 0;
};

/// Copies a size x size window at (top, left).
inline Tensor crop_at(const Tensor& t, std::size_t top, std::size_t left, std::size_t size) {
  const Shape& s = t.shape();
  if (top + size > s.h || left + size > s.w) {
    throw ShapeError("crop " + std::to_string(size) + " at (" + std::to_string(top) + "," +
                     std::to_string(left) + ") exceeds image " + s.str());
  }
  Tensor out(Shape{s.n, s.c, size, size});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < size; ++y)
        std::copy_n(t.ptr() + flat_index(s, n, c, top + y, left), size,
                    out.ptr() + flat_index(out.shape(), n, c, y, 0));
  return out;
}

/// Uniformly placed size x size crop.
inline Crop random_crop(const Image& img, std::size_t size, Rng& rng) {
  if (img.height() < size || img.width() < size) {
    throw ShapeError("image " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                     " is smaller than crop size " + std::to_string(size));
  }
  std::uniform_int_distribution<std::size_t> dy(0, img.height() - size), dx(0, img.width() - size);
  const std::size_t top = dy(rng);
  const std::size_t left = dx(rng);
  return {Image{crop_at(img.pixels, top, left, size), img.path}, top, left};
}

inline Tensor hflip(const Tensor& t) {
  const Shape& s = t.shape();
  Tensor out(s);
  for (std::size_t p = 0; p < s.n * s.c * s.h; ++p) {
    const float* src = t.ptr() + p * s.w;
    float* dst = out.ptr() + p * s.w;
    for (std::size_t x = 0; x < s.w; ++x) dst[x] = src[s.w - 1 - x];
  }
  return out;
}

/// Counter-clockwise quarter turn: out[y][x] = in[x][W-1-y].
inline Tensor rot90(const Tensor& t) {
  const Shape& s = t.shape();
  Tensor out(Shape{s.n, s.c, s.w, s.h});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < s.w; ++y)
        for (std::size_t x = 0; x < s.h; ++x) out.at(n, c, y, x) = t.at(n, c, x, s.w - 1 - y);
  return out;
}

/// Horizontal flip with flip_prob, then a 90 degree turn with rot90_prob.
inline Image augment(const Image& img, const PipelineConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const bool flip = u(rng) < cfg.flip_prob;
  const bool rotate = u(rng) < cfg.rot90_prob;
  Tensor t = img.pixels;
  if (flip) t = hflip(t);
  if (rotate) {
    if (img.height() != img.width()) throw ShapeError("augment: rotation needs a square image");
    t = rot90(t);
  }
  return {std::move(t), img.path};
}

// ---------------------------------------------------------------------------
// Bicubic resampling

/// Cubic convolution kernel with a = -0.5.
inline double cubic_kernel(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

struct ResampleTap {
  std::size_t index;
  double weight;
};

/// Per-output taps along one axis. Pixel centers sit at i + 0.5; when
/// shrinking, the kernel is widened by the scale factor (antialiasing) and
/// the weights renormalized. Out-of-range samples use point reflection about
/// the edge pixel (v[-j] = 2 v[0] - v[j]), which keeps straight lines
/// straight up to the border.
inline std::vector<std::vector<ResampleTap>> bicubic_taps(std::size_t in, std::size_t out) {
  if (in == 0 || out == 0) throw ShapeError("bicubic_resize: sizes must be >= 1");
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double stretch = std::max(scale, 1.0);
  const double support = 2.0 * stretch;
  const auto last = static_cast<std::ptrdiff_t>(in) - 1;
  std::vector<std::vector<ResampleTap>> taps(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double center = (static_cast<double>(o) + 0.5) * scale - 0.5;
    const auto lo = static_cast<std::ptrdiff_t>(std::ceil(center - support));
    const auto hi = static_cast<std::ptrdiff_t>(std::floor(center + support));
    std::vector<std::pair<std::ptrdiff_t, double>> raw;
    double total = 0.0;
    for (std::ptrdiff_t j = lo; j <= hi; ++j) {
      const double w = cubic_kernel((static_cast<double>(j) - center) / stretch);
      if (w == 0.0) continue;
      raw.emplace_back(j, w);
      total += w;
    }
    std::vector<double> acc(in, 0.0);
    auto clampi = [&](std::ptrdiff_t j) { return std::clamp<std::ptrdiff_t>(j, 0, last); };
    for (auto [j, w] : raw) {
      w /= total;
      if (j < 0) {
        acc[0] += 2.0 * w;
        acc[clampi(-j)] -= w;
      } else if (j > last) {
        acc[last] += 2.0 * w;
        acc[clampi(2 * last - j)] -= w;
      } else {
        acc[j] += w;
      }
    }
    for (std::size_t j = 0; j < in; ++j) {
      if (acc[j] != 0.0) taps[o].push_back({j, acc[j]});
    }
  }
  return taps;
}

/// Separable bicubic resize of every (n,c) plane. With `clamp_range`, the
/// result is clamped to [0, 255].
inline Tensor bicubic_resize(const Tensor& t, std::size_t out_h, std::size_t out_w, bool clamp_range = true) {
  const Shape& s = t.shape();
  const auto th = bicubic_taps(s.h, out_h);
  const auto tw = bicubic_taps(s.w, out_w);
  Tensor out(Shape{s.n, s.c, out_h, out_w});
  std::vector<double> rows(out_h * s.w);
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const float* in = t.ptr() + p * s.plane();
    std::fill(rows.begin(), rows.end(), 0.0);
    for (std::size_t y = 0; y < out_h; ++y) {
      double* r = rows.data() + y * s.w;
      for (const auto& tap : th[y]) {
        const float* src = in + tap.index * s.w;
        for (std::size_t x = 0; x < s.w; ++x) r[x] += tap.weight * src[x];
      }
    }
    float* o = out.ptr() + p * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const double* r = rows.data() + y * s.w;
      for (std::size_t x = 0; x < out_w; ++x) {
        double v = 0.0;
        for (const auto& tap : tw[x]) v += tap.weight * r[tap.index];
        if (clamp_range) v = std::clamp(v, 0.0, 255.0);
        o[y * out_w + x] = static_cast<float>(v);
      }
    }
  }
  return out;
}

inline Image bicubic_resize(const Image& img, std::size_t out_h, std::size_t out_w) {
  return {bicubic_resize(img.pixels, out_h, out_w), img.path};
}

/// crop -> augment -> bicubic downsample by cfg.scale.
inline ImagePair make_pair(const Image& hr_img, const PipelineConfig& cfg, Rng& rng) {
  cfg.validate();
  Image hr = augment(random_crop(hr_img, cfg.crop_size, rng).image, cfg, rng);
  const std::size_t lr_size = cfg.crop_size / cfg.scale;
  Image lr = bicubic_resize(hr, lr_size, lr_size);
  return {std::move(hr), std::move(lr)};
}

// ---------------------------------------------------------------------------

struct Batch {
  Tensor lr;  // (b,3,crop/scale,crop/scale) in [0,1]
  Tensor hr;  // (b,3,crop,crop) in [0,1]
  std::vector<std::filesystem::path> sources;
};

/// Stacks (1,c,h,w) tensors along the batch axis, multiplying by `scale`.
inline Tensor stack(const std::vector<Tensor>& items, float scale = 1.0f) {
  if (items.empty()) throw ShapeError("stack: no items");
  const Shape s = items.front().shape();
  Tensor out(Shape{items.size() * s.n, s.c, s.h, s.w});
  std::size_t off = 0;
  for (const auto& t : items) {
    require_same_shape(items.front(), t, "stack");
    for (std::size_t i = 0; i < t.size(); ++i) out[off + i] = t[i] * scale;
    off += t.size();
  }
  return out;
}

/// Seed for a stream keyed by (seed, salt), stable across runs.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

/// Epoch-wise shuffled (lr, hr) batches from a flat image directory. The
/// order and augmentation of epoch e depend only on (seed, e).
class Batcher {
 public:
  Batcher(const std::filesystem::path& dir, PipelineConfig cfg, std::size_t batch_size)
      : cfg_(std::move(cfg)), batch_size_(batch_size), files_(list_images(dir)) {
    cfg_.validate();
    if (batch_size_ == 0) throw Error("batch size must be >= 1");
    if (files_.empty()) throw Error("no PNG/PPM images in '" + dir.string() + "'");
  }

  std::size_t file_count() const { return files_.size(); }
  std::size_t skipped() const { return skipped_; }
  const PipelineConfig& config() const { return cfg_; }

  void begin_epoch(std::size_t epoch) {
    rng_.seed(derive_seed(cfg_.seed, epoch));
    order_.resize(files_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }

  /// Next batch of the current epoch; the last one may be short.
  std::optional<Batch> next() {
    std::vector<Tensor> lrs, hrs;
    Batch b;
    while (lrs.size() < batch_size_ && cursor_ < order_.size()) {
      const auto& path = files_[order_[cursor_++]];
      Image img;
      try {
        img = load_image(path);
      } catch (const Error& e) {
        std::cerr << "warning: skipping unreadable image " << e.what() << '\n';
        ++skipped_;
        continue;
      }
      ImagePair pair = make_pair(img, cfg_, rng_);
      lrs.push_back(std::move(pair.lr.pixels));
      hrs.push_back(std::move(pair.hr.pixels));
      b.sources.push_back(path);
    }
    if (lrs.empty()) return std::nullopt;
    b.lr = stack(lrs, 1.0f / 255.0f);
    b.hr = stack(hrs, 1.0f / 255.0f);
    return b;
  }

 private:
  PipelineConfig cfg_;
  std::size_t batch_size_;
  std::vector<std::filesystem::path> files_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t skipped_ = 0;
  Rng rng_;
};

}  // namespace swiftsr
