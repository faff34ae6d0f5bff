#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "swiftsr/checkpoint.hpp"
#include "swiftsr/models.hpp"
#include "swiftsr/tensor.hpp"

namespace swiftsr {

inline constexpr double kAdversarialWeight = 1e-3;

/// How the squared feature distance is normalized.
enum class ContentNorm {
  Mean,     // 1/(W*H) per map, then averaged over batch and channels
  Literal,  // 1/(W*H), summed over batch and channels
};

enum class AdversarialReduction { Sum, Mean };

/// Frozen feature network tapped after a configurable block.
/// Its parameters never receive gradients.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(ModelGraph net) : net_(std::move(net)) {
    if (net_.topology() != Topology::Extractor) throw Error("feature extractor needs an extractor graph");
  }

  /// Seeded random-feature conv/ReLU6 network.
  static FeatureExtractor reference(std::uint64_t seed, const ExtractorConfig& cfg = {}) {
    return FeatureExtractor(build_extractor(cfg, seed));
  }
  /// Tap 0: features are the image itself.
  static FeatureExtractor identity(std::size_t in_channels = 3) {
    ExtractorConfig cfg;
    cfg.in_channels = in_channels;
    cfg.tap_block = 0;
    return FeatureExtractor(build_extractor(cfg, 0));
  }
  static FeatureExtractor from_checkpoint(const std::filesystem::path& path) {
    return FeatureExtractor(load_checkpoint(path).model);
  }

  Tensor extract(const Tensor& img) { return net_.forward(img, Pass::eval()); }
  /// Eval-mode forward that keeps context for input_gradient.
  Tensor extract_retain(const Tensor& img) { return net_.forward(img, Pass::eval_retain()); }
  /// d(loss)/d(image) for the last extract_retain, given d(loss)/d(features).
  Tensor input_gradient(const Tensor& g_features) { return net_.backward(g_features, false); }

  ModelGraph& graph() { return net_; }

 private:
  ModelGraph net_;
};

inline Tensor feature_extract(FeatureExtractor& fx, const Tensor& img) { return fx.extract(img); }

struct LossReport {
  double content = 0.0;
  double adversarial = 0.0;
  double perceptual = 0.0;
  double discriminator = 0.0;
};

namespace detail {
inline double content_denominator(const Shape& s, ContentNorm norm) {
  const double wh = static_cast<double>(s.h * s.w);
  return norm == ContentNorm::Mean ? wh * static_cast<double>(s.n * s.c) : wh;
}
inline void require_probs(std::span<const float> p, const char* op) {
  if (p.empty()) throw Error(std::string(op) + ": empty batch");
}
}  // namespace detail

/// Squared feature distance normalized by the map area.
inline double content_loss(const Tensor& phi_hr, const Tensor& phi_sr,
                           ContentNorm norm = ContentNorm::Mean) {
  require_same_shape(phi_hr, phi_sr, "content_loss");
  double sum = 0.0;
  for (std::size_t i = 0; i < phi_hr.size(); ++i) {
    const double d = static_cast<double>(phi_hr[i]) - phi_sr[i];
    sum += d * d;
  }
  return sum / detail::content_denominator(phi_hr.shape(), norm);
}

/// d content_loss / d phi_sr.
inline Tensor content_loss_grad(const Tensor& phi_hr, const Tensor& phi_sr,
                                ContentNorm norm = ContentNorm::Mean) {
  require_same_shape(phi_hr, phi_sr, "content_loss_grad");
  const double scale = 2.0 / detail::content_denominator(phi_hr.shape(), norm);
  Tensor g(phi_sr.shape());
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = static_cast<float>(scale * (static_cast<double>(phi_sr[i]) - phi_hr[i]));
  }
  return g;
}

/// Sum (or mean) over the batch of -ln D(G(x)).
inline double adversarial_loss(std::span<const float> d_fake,
                               AdversarialReduction red = AdversarialReduction::Sum) {
  detail::require_probs(d_fake, "adversarial_loss");
  double sum = 0.0;
  for (float p : d_fake) sum -= std::log(static_cast<double>(p));
  return red == AdversarialReduction::Mean ? sum / static_cast<double>(d_fake.size()) : sum;
}

inline Tensor adversarial_loss_grad(const Tensor& d_fake,
                                    AdversarialReduction red = AdversarialReduction::Sum) {
  detail::require_probs(d_fake.data(), "adversarial_loss_grad");
  const double scale = red == AdversarialReduction::Mean ? 1.0 / static_cast<double>(d_fake.size()) : 1.0;
  Tensor g(d_fake.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(-scale / d_fake[i]);
  return g;
}

/// content + weight * adversarial.
inline double perceptual_loss(double content, double adversarial, double weight = kAdversarialWeight) {
  if (!std::isfinite(content) || !std::isfinite(adversarial)) {
    throw NonFiniteError(0, "perceptual_loss: non-finite input");
  }
  return content + weight * adversarial;
}

/// Batch mean of binary cross-entropy with real labelled 1 and fake 0.
inline double discriminator_loss(std::span<const float> d_real, std::span<const float> d_fake) {
  detail::require_probs(d_real, "discriminator_loss");
  detail::require_probs(d_fake, "discriminator_loss");
  if (d_real.size() != d_fake.size()) throw Error("discriminator_loss: real/fake batch sizes differ");
  double sum = 0.0;
  for (std::size_t i = 0; i < d_real.size(); ++i) {
    sum += -std::log(static_cast<double>(d_real[i])) - std::log(1.0 - static_cast<double>(d_fake[i]));
  }
  return sum / static_cast<double>(d_real.size());
}

/// d discriminator_loss / d d_real.
inline Tensor discriminator_loss_grad_real(const Tensor& d_real) {
  const double n = static_cast<double>(d_real.size());
  Tensor g(d_real.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(-1.0 / (n * d_real[i]));
  return g;
}

/// d discriminator_loss / d d_fake.
inline Tensor discriminator_loss_grad_fake(const Tensor& d_fake) {
  const double n = static_cast<double>(d_fake.size());
  Tensor g(d_fake.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(1.0 / (n * (1.0 - d_fake[i])));
  return g;
}

/// Content loss between images through the extractor, plus its gradient with
/// respect to the super-resolved image.
inline std::pair<double, Tensor> content_loss_with_grad(FeatureExtractor& fx, const Tensor& hr,
                                                        const Tensor& sr,
                                                        ContentNorm norm = ContentNorm::Mean) {
  const Tensor phi_hr = fx.extract(hr);
  const Tensor phi_sr = fx.extract_retain(sr);
  const double loss = content_loss(phi_hr, phi_sr, norm);
  Tensor g = fx.input_gradient(content_loss_grad(phi_hr, phi_sr, norm));
  return {loss, std::move(g)};
}

}  // namespace swiftsr
