#pragma once

// PSNR and SSIM image-quality scores.

#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "swiftsr/image_io.hpp"
#include "swiftsr/tensor.hpp"

namespace swiftsr {

enum class SsimWindow { Gaussian, Uniform };

struct SsimConfig {
  SsimWindow window = SsimWindow::Gaussian;
  std::size_t window_size = 11;
  double gaussian_sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 255.0;
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;

  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
  double c3() const { return c2() / 2.0; }

  void validate() const {
    if (window_size == 0 || window_size % 2 == 0) throw Error("SSIM window_size must be odd");
    if (!(k1 > 0.0) || !(k2 > 0.0)) throw Error("SSIM k1 and k2 must be positive");
    if (!(dynamic_range > 0.0)) throw Error("SSIM dynamic range must be positive");
  }
};

inline double mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  if (a.empty()) throw ShapeError("mse: empty tensors");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    sum += d * d;
  }
  return sum / static_cast<double>(a.size());
}

/// 20 log10(MAX) - 10 log10(MSE); +infinity for identical inputs.
inline double psnr(const Tensor& a, const Tensor& b, double max_value = 255.0) {
  if (!(max_value > 0.0)) throw Error("psnr: max_value must be positive");
  const double m = mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(max_value) - 10.0 * std::log10(m);
}

/// BT.601 studio-swing luma (16..235 on a 0..255 scale), returned in the
/// same units as `max_value`. Input (n,3,h,w), output (n,1,h,w).
inline Tensor to_luma(const Tensor& rgb, double max_value = 255.0) {
  const Shape& s = rgb.shape();
  if (s.c != 3) throw ShapeError("to_luma: expected 3 channels, got " + s.str());
  Tensor y(Shape{s.n, 1, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t i = 0; i < s.plane(); ++i) {
      const double r = rgb[flat_index(s, n, 0, 0, 0) + i] / max_value;
      const double g = rgb[flat_index(s, n, 1, 0, 0) + i] / max_value;
      const double b = rgb[flat_index(s, n, 2, 0, 0) + i] / max_value;
      y[n * s.plane() + i] =
          static_cast<float>(max_value * (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0);
    }
  return y;
}

/// Normalized window weights, row-major size x size.
inline std::vector<double> ssim_window(const SsimConfig& cfg) {
  const std::size_t n = cfg.window_size;
  std::vector<double> w(n * n);
  const double r = static_cast<double>(n / 2);
  double total = 0.0;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double dy = static_cast<double>(y) - r, dx = static_cast<double>(x) - r;
      const double v = cfg.window == SsimWindow::Gaussian
                           ? std::exp(-(dx * dx + dy * dy) / (2.0 * cfg.gaussian_sigma * cfg.gaussian_sigma))
                           : 1.0;
      w[y * n + x] = v;
      total += v;
    }
  for (double& v : w) v /= total;
  return w;
}

/// Window statistics averaged over all valid window positions.
struct SsimComponents {
  double ssim = 0.0;
  double luminance = 0.0;          // mean of l(x,y)
  double contrast_structure = 0.0; // mean of c(x,y) * s(x,y)
};

/// SSIM of one (h,w) plane pair, stride between rows `w`.
inline SsimComponents ssim_plane(const float* a, const float* b, std::size_t h, std::size_t w,
                                 const SsimConfig& cfg, const std::vector<double>& win) {
  const std::size_t k = cfg.window_size;
  const double c1 = cfg.c1(), c2 = cfg.c2(), c3 = cfg.c3();
  const bool standard = cfg.alpha == 1.0 && cfg.beta == 1.0 && cfg.gamma == 1.0;
  SsimComponents acc;
  std::size_t count = 0;
  for (std::size_t y0 = 0; y0 + k <= h; ++y0) {
    for (std::size_t x0 = 0; x0 + k <= w; ++x0) {
      double mx = 0.0, my = 0.0;
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
          const double wt = win[i * k + j];
          mx += wt * a[(y0 + i) * w + x0 + j];
          my += wt * b[(y0 + i) * w + x0 + j];
        }
      double vx = 0.0, vy = 0.0, cxy = 0.0;
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
          const double wt = win[i * k + j];
          const double dx = a[(y0 + i) * w + x0 + j] - mx;
          const double dy = b[(y0 + i) * w + x0 + j] - my;
          vx += wt * dx * dx;
          vy += wt * dy * dy;
          cxy += wt * dx * dy;
        }
      const double l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
      // With c3 = c2/2, contrast * structure collapses to this single ratio.
      const double cs = (2.0 * cxy + c2) / (vx + vy + c2);
      double value;
      if (standard) {
        value = l * cs;
      } else {
        const double sx = std::sqrt(std::max(vx, 0.0)), sy = std::sqrt(std::max(vy, 0.0));
        const double c = (2.0 * sx * sy + c2) / (vx + vy + c2);
        const double s = (cxy + c3) / (sx * sy + c3);
        value = std::pow(l, cfg.alpha) * std::pow(c, cfg.beta) * std::pow(s, cfg.gamma);
      }
      acc.ssim += value;
      acc.luminance += l;
      acc.contrast_structure += cs;
      ++count;
    }
  }
  const double n = static_cast<double>(count);
  return {acc.ssim / n, acc.luminance / n, acc.contrast_structure / n};
}

/// Mean SSIM over windows, averaged over every (n,c) plane.
inline SsimComponents ssim_components(const Tensor& a, const Tensor& b, const SsimConfig& cfg = {}) {
  require_same_shape(a, b, "ssim");
  cfg.validate();
  const Shape& s = a.shape();
  if (s.h < cfg.window_size || s.w < cfg.window_size) {
    throw ShapeError("ssim: image " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                     " is smaller than the " + std::to_string(cfg.window_size) + "x" +
                     std::to_string(cfg.window_size) + " window");
  }
  const auto win = ssim_window(cfg);
  SsimComponents total;
  for (std::size_t p = 0; p < s.n * s.c; ++p) {
    const auto r = ssim_plane(a.ptr() + p * s.plane(), b.ptr() + p * s.plane(), s.h, s.w, cfg, win);
    total.ssim += r.ssim;
    total.luminance += r.luminance;
    total.contrast_structure += r.contrast_structure;
  }
  const double planes = static_cast<double>(s.n * s.c);
  return {total.ssim / planes, total.luminance / planes, total.contrast_structure / planes};
}

inline double ssim(const Tensor& a, const Tensor& b, const SsimConfig& cfg = {}) {
  return ssim_components(a, b, cfg).ssim;
}

// ---------------------------------------------------------------------------

struct PairScore {
  std::string name;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct EvalReport {
  std::vector<PairScore> rows;
  double psnr_mean = 0.0;
  double ssim_mean = 0.0;
};

struct EvalOptions {
  SsimConfig ssim;
  bool luma = false;
  double max_value = 255.0;
};

inline PairScore score_pair(const std::string& name, const Tensor& sr, const Tensor& hr,
                            const EvalOptions& opt = {}) {
  if (sr.shape() != hr.shape()) {
    throw ShapeError(name + ": size mismatch " + sr.shape().str() + " vs " + hr.shape().str());
  }
  if (opt.luma) {
    const Tensor ys = to_luma(sr, opt.max_value), yh = to_luma(hr, opt.max_value);
    return {name, psnr(ys, yh, opt.max_value), ssim(ys, yh, opt.ssim)};
  }
  return {name, psnr(sr, hr, opt.max_value), ssim(sr, hr, opt.ssim)};
}

inline void finalize_means(EvalReport& r) {
  r.psnr_mean = r.ssim_mean = 0.0;
  for (const auto& row : r.rows) {
    r.psnr_mean += row.psnr;
    r.ssim_mean += row.ssim;
  }
  if (!r.rows.empty()) {
    r.psnr_mean /= static_cast<double>(r.rows.size());
    r.ssim_mean /= static_cast<double>(r.rows.size());
  }
}

/// Raised when the two directories do not pair up by filename.
class UnmatchedError : public Error {
 public:
  UnmatchedError(std::vector<std::string> names, const std::string& what)
      : Error(what), names_(std::move(names)) {}
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
};

/// Scores same-named images of two directories, ordered by filename.
inline EvalReport evaluate_pair_directory(const std::filesystem::path& dir_sr,
                                          const std::filesystem::path& dir_hr,
                                          const EvalOptions& opt = {}) {
  std::map<std::string, std::filesystem::path> sr, hr;
  for (const auto& p : list_images(dir_sr)) sr[p.filename().string()] = p;
  for (const auto& p : list_images(dir_hr)) hr[p.filename().string()] = p;
  std::vector<std::string> unmatched;
  for (const auto& [n, p] : sr)
    if (!hr.count(n)) unmatched.push_back(n);
  for (const auto& [n, p] : hr)
    if (!sr.count(n)) unmatched.push_back(n);
  if (!unmatched.empty()) {
    std::string msg = "unmatched filenames:";
    for (const auto& n : unmatched) msg += " " + n;
    throw UnmatchedError(unmatched, msg);
  }
  if (sr.empty()) throw Error("no images to evaluate in '" + dir_sr.string() + "'");
  EvalReport report;
  for (const auto& [name, path] : sr) {
    report.rows.push_back(score_pair(name, load_image(path).pixels, load_image(hr.at(name)).pixels, opt));
  }
  finalize_means(report);
  return report;
}

inline std::string format_score(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << v;
  return os.str();
}

/// name,psnr_db,ssim
inline void write_eval_csv(std::ostream& os, const EvalReport& r) {
  os << "name,psnr_db,ssim\n";
  for (const auto& row : r.rows) os << row.name << ',' << format_score(row.psnr) << ',' << format_score(row.ssim) << '\n';
}

}  // namespace swiftsr
