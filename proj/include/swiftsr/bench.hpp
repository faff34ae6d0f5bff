#pragma once

// Forward-latency harness: warmup, then timed eval forwards on one fixed
// random frame. Only the forward is inside the clock.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "swiftsr/gemm.hpp"
#include "swiftsr/models.hpp"

namespace swiftsr {

struct BenchReport {
  std::size_t in_w = 0, in_h = 0;
  std::size_t out_w = 0, out_h = 0;
  std::size_t warmup = 0;
  std::size_t iters = 0;
  std::vector<double> samples_ms;
  double min_ms = 0, median_ms = 0, p95_ms = 0, mean_ms = 0;
  double fps = 0;
  int threads = 1;
  std::string variant;
  std::uint64_t macs = 0;
};

/// Parses "WxH" or the presets 270p (480x270) and 540p (960x540).
inline std::pair<std::size_t, std::size_t> parse_resolution(const std::string& s) {
  if (s == "270p") return {480, 270};
  if (s == "540p") return {960, 540};
  const auto x = s.find_first_of("xX");
  auto num = [&](const std::string& part) -> std::size_t {
    if (part.empty() || part.size() > 6 || part.find_first_not_of("0123456789") != std::string::npos) {
      throw Error("invalid resolution '" + s + "': expected WxH, 270p or 540p");
    }
    return std::stoul(part);
  };
  if (x == std::string::npos) throw Error("invalid resolution '" + s + "': expected WxH, 270p or 540p");
  const std::size_t w = num(s.substr(0, x)), h = num(s.substr(x + 1));
  if (w == 0 || h == 0) throw Error("invalid resolution '" + s + "': sides must be >= 1");
  return {w, h};
}

/// Fills the order statistics from samples_ms. p95 is the nearest-rank
/// value; the median averages the two middle samples for even counts.
inline void summarize(BenchReport& r) {
  if (r.samples_ms.empty()) throw Error("bench: no samples");
  std::vector<double> s = r.samples_ms;
  std::sort(s.begin(), s.end());
  const std::size_t n = s.size();
  r.min_ms = s.front();
  r.median_ms = n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
  r.p95_ms = s[static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n))) - 1];
  double sum = 0;
  for (double v : s) sum += v;
  r.mean_ms = sum / static_cast<double>(n);
  r.fps = 1000.0 / r.median_ms;
}

inline BenchReport run_bench(ModelGraph& model, std::size_t w, std::size_t h, std::size_t warmup,
                             std::size_t iters, const std::string& variant) {
  if (iters < 1) throw Error("bench: --iters must be >= 1");
  BenchReport r;
  r.in_w = w;
  r.in_h = h;
  r.warmup = warmup;
  r.iters = iters;
  r.variant = variant;
  r.threads = detail::blas_threads();
  const Shape in{1, model.in_channels(), h, w};
  const Shape out = model.output_shape(in);
  r.out_w = out.w;
  r.out_h = out.h;
  r.macs = model.macs(in);

  Tensor x(in);
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  for (float& v : x.data()) v = dist(rng);

  using clock = std::chrono::steady_clock;
  for (std::size_t i = 0; i < warmup; ++i) model.forward(x, Pass::eval());
  r.samples_ms.reserve(iters);
  for (std::size_t i = 0; i < iters; ++i) {
    const auto t0 = clock::now();
    const Tensor y = model.forward(x, Pass::eval());
    const auto t1 = clock::now();
    r.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  summarize(r);
  return r;
}

}  // namespace swiftsr
