#pragma once

// Generator, discriminator, standard-convolution twin and the reference
// feature extractor, expressed as layer graphs that own their parameters.

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "swiftsr/layers.hpp"
#include "swiftsr/tensor.hpp"

namespace swiftsr {

enum class Topology { Generator, Discriminator, Extractor };
enum class ConvKind { DepthwiseSeparable, Standard };

inline const char* topology_name(Topology t) {
  switch (t) {
    case Topology::Generator: return "generator";
    case Topology::Discriminator: return "discriminator";
    case Topology::Extractor: return "extractor";
  }
  return "?";
}

struct GeneratorConfig {
  std::size_t base_channels = 64;
  std::size_t num_residual_blocks = 16;
  std::size_t upscale_factor = 4;
  std::size_t in_channels = 3;
  ConvKind conv = ConvKind::DepthwiseSeparable;

  void validate() const {
    if (upscale_factor != 2 && upscale_factor != 4 && upscale_factor != 8) {
      throw Error("generator upscale_factor must be 2, 4 or 8, got " +
                  std::to_string(upscale_factor));
    }
    if (num_residual_blocks < 1) throw Error("generator needs at least one residual block");
    if (base_channels < 1 || in_channels < 1) throw Error("generator channel counts must be >= 1");
  }
  std::size_t upsample_blocks() const {
    std::size_t n = 0;
    for (std::size_t r = upscale_factor; r > 1; r >>= 1) ++n;
    return n;
  }
};

struct DiscriminatorConfig {
  std::vector<std::size_t> block_channels{64, 64, 128, 128, 256, 256, 512, 512};
  std::vector<std::size_t> strides{1, 2, 1, 2, 1, 2, 1, 2};
  std::size_t pool_size = 6;
  std::size_t hidden_units = 1024;
  std::size_t in_channels = 3;

  void validate() const {
    if (block_channels.size() != 8 || strides.size() != 8) {
      throw Error("discriminator needs exactly 8 block channels and 8 strides");
    }
    for (std::size_t s : strides) {
      if (s != 1 && s != 2) throw Error("discriminator strides must be 1 or 2");
    }
    for (std::size_t c : block_channels) {
      if (c == 0) throw Error("discriminator channels must be >= 1");
    }
    if (pool_size < 1) throw Error("discriminator pool_size must be >= 1");
    if (hidden_units < 1) throw Error("discriminator hidden_units must be >= 1");
  }
};

/// Reference perceptual feature network: `channels.size()` blocks of
/// standard 3x3 convolution + ReLU6, tapped after block `tap_block`.
struct ExtractorConfig {
  std::vector<std::size_t> channels{16, 24, 32, 32};
  std::vector<std::size_t> strides{1, 2, 1, 2};
  std::size_t tap_block = 4;
  std::size_t in_channels = 3;

  void validate() const {
    if (channels.size() != strides.size()) throw Error("extractor channels/strides length differ");
    if (tap_block > channels.size()) throw Error("extractor tap_block beyond last block");
  }
};

/// Ordered layer graph with uniquely named parameters.
class ModelGraph {
 public:
  ModelGraph(Topology topology, std::vector<float> meta)
      : topology_(topology), meta_(std::move(meta)), root_(std::make_unique<Sequential>("")) {}
  ModelGraph(ModelGraph&&) noexcept = default;
  ModelGraph& operator=(ModelGraph&&) noexcept = default;

  Topology topology() const noexcept { return topology_; }
  /// Config encoding persisted next to the weights.
  const std::vector<float>& meta() const noexcept { return meta_; }
  Sequential& root() { return *root_; }

  /// Number of root children run by forward (all of them unless truncated).
  void set_forward_depth(std::size_t depth) { depth_ = depth; }
  std::size_t forward_depth() const { return depth_ ? *depth_ : root_->size(); }

  Tensor forward(const Tensor& x, const Pass& pass) {
    if (x.shape().c != in_channels()) {
      throw ShapeError(std::string(topology_name(topology_)) + ": input " + x.shape().str() +
                       " has " + std::to_string(x.shape().c) + " channels, expected " +
                       std::to_string(in_channels()));
    }
    return root_->forward_prefix(x, pass, forward_depth());
  }
  Tensor backward(const Tensor& gy, bool param_grads = true) {
    return root_->backward_prefix(gy, param_grads, forward_depth());
  }
  Shape output_shape(const Shape& in) {
    Shape s = in;
    for (std::size_t i = 0; i < forward_depth(); ++i) s = root_->at(i).output_shape(s);
    return s;
  }
  /// Analytic multiply-accumulate count of one forward.
  std::uint64_t macs(const Shape& in) {
    std::uint64_t total = 0;
    Shape s = in;
    for (std::size_t i = 0; i < forward_depth(); ++i) {
      total += root_->at(i).macs(s);
      s = root_->at(i).output_shape(s);
    }
    return total;
  }

  std::size_t in_channels() const { return static_cast<std::size_t>(meta_.at(1)); }

  /// All parameters and buffers in graph order.
  std::vector<ParamRef> parameters() {
    std::vector<ParamRef> out;
    root_->visit("", [&](ParamRef p) { out.push_back(std::move(p)); });
    std::set<std::string> seen;
    for (const auto& p : out) {
      if (!seen.insert(p.name).second) throw Error("duplicate parameter name '" + p.name + "'");
    }
    return out;
  }
  std::vector<ParamRef> trainable() {
    std::vector<ParamRef> out;
    for (auto& p : parameters()) {
      if (!is_buffer(p.kind)) out.push_back(p);
    }
    return out;
  }
  void zero_grad() {
    for (auto& p : trainable()) p.grad->fill(0.0f);
  }
  void clear_context() { root_->clear_context(); }

 private:
  Topology topology_;
  std::vector<float> meta_;
  std::unique_ptr<Sequential> root_;
  std::optional<std::size_t> depth_;
};

// ---------------------------------------------------------------------------

namespace detail {

inline Layer& add_conv(Sequential& s, const std::string& name, ConvKind kind, std::size_t in,
                       std::size_t out, std::size_t k, std::size_t stride) {
  if (kind == ConvKind::Standard) return s.add<Conv2d>(name, in, out, k, stride);
  return s.add<DSConv2d>(name, in, out, k, stride);
}

inline std::vector<float> generator_meta(const GeneratorConfig& c) {
  return {0.0f, float(c.in_channels), float(c.base_channels), float(c.num_residual_blocks),
          float(c.upscale_factor), c.conv == ConvKind::Standard ? 1.0f : 0.0f};
}

inline std::vector<float> discriminator_meta(const DiscriminatorConfig& c) {
  std::vector<float> m{1.0f, float(c.in_channels), float(c.pool_size), float(c.hidden_units)};
  for (auto v : c.block_channels) m.push_back(float(v));
  for (auto v : c.strides) m.push_back(float(v));
  return m;
}

inline std::vector<float> extractor_meta(const ExtractorConfig& c) {
  std::vector<float> m{2.0f, float(c.in_channels), float(c.tap_block), float(c.channels.size())};
  for (auto v : c.channels) m.push_back(float(v));
  for (auto v : c.strides) m.push_back(float(v));
  return m;
}

}  // namespace detail

inline void init_weights(ModelGraph& model, std::uint64_t seed);

/// Unseeded structure only; parameters are zero until init_weights.
inline ModelGraph make_generator(const GeneratorConfig& cfg) {
  cfg.validate();
  ModelGraph g(Topology::Generator, detail::generator_meta(cfg));
  const std::size_t c = cfg.base_channels;
  auto& root = g.root();

  auto& head = root.add<Sequential>("initial");
  detail::add_conv(head, "conv", cfg.conv, cfg.in_channels, c, 9, 1);
  head.add<PRelu>("act", c);

  auto& trunk = root.add<Residual>("trunk");
  for (std::size_t i = 0; i < cfg.num_residual_blocks; ++i) {
    auto& blk = trunk.add<Residual>("block" + std::to_string(i));
    detail::add_conv(blk, "conv1", cfg.conv, c, c, 3, 1);
    blk.add<BatchNorm2d>("bn1", c);
    blk.add<PRelu>("act", c);
    detail::add_conv(blk, "conv2", cfg.conv, c, c, 3, 1);
    blk.add<BatchNorm2d>("bn2", c);
  }
  detail::add_conv(trunk, "conv", cfg.conv, c, c, 3, 1);
  trunk.add<BatchNorm2d>("bn", c);

  for (std::size_t i = 0; i < cfg.upsample_blocks(); ++i) {
    auto& up = root.add<Sequential>("upsample" + std::to_string(i));
    detail::add_conv(up, "conv", cfg.conv, c, c * 4, 3, 1);
    up.add<PixelShuffle>("shuffle", 2);
    up.add<PRelu>("act", c);
  }
  detail::add_conv(root, "final", cfg.conv, c, cfg.in_channels, 9, 1);
  return g;
}

inline ModelGraph build_generator(const GeneratorConfig& cfg, std::uint64_t seed) {
  ModelGraph g = make_generator(cfg);
  init_weights(g, seed);
  return g;
}

/// Same topology with every depthwise-separable convolution replaced by a
/// standard convolution of identical (k, in, out, stride).
inline ModelGraph build_standard_conv_twin(GeneratorConfig cfg, std::uint64_t seed = 0) {
  cfg.conv = ConvKind::Standard;
  return build_generator(cfg, seed);
}

inline ModelGraph make_discriminator(const DiscriminatorConfig& cfg) {
  cfg.validate();
  ModelGraph d(Topology::Discriminator, detail::discriminator_meta(cfg));
  auto& root = d.root();
  std::size_t in = cfg.in_channels;
  for (std::size_t i = 0; i < 8; ++i) {
    auto& blk = root.add<Sequential>("block" + std::to_string(i));
    blk.add<DSConv2d>("conv", in, cfg.block_channels[i], 3, cfg.strides[i]);
    if (i > 0) blk.add<BatchNorm2d>("bn", cfg.block_channels[i]);
    blk.add<LeakyRelu>("act", 0.2f);
    in = cfg.block_channels[i];
  }
  root.add<AdaptiveAvgPool>("pool", cfg.pool_size, cfg.pool_size);
  root.add<Linear>("fc1", in * cfg.pool_size * cfg.pool_size, cfg.hidden_units);
  root.add<LeakyRelu>("fc1_act", 0.2f);
  root.add<Linear>("fc2", cfg.hidden_units, 1);
  root.add<Sigmoid>("sigmoid");
  return d;
}

inline ModelGraph build_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) {
  ModelGraph d = make_discriminator(cfg);
  init_weights(d, seed);
  return d;
}

inline ModelGraph make_extractor(const ExtractorConfig& cfg) {
  cfg.validate();
  ModelGraph fx(Topology::Extractor, detail::extractor_meta(cfg));
  std::size_t in = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    auto& blk = fx.root().add<Sequential>("block" + std::to_string(i));
    blk.add<Conv2d>("conv", in, cfg.channels[i], 3, cfg.strides[i]);
    blk.add<Relu6>("act");
    in = cfg.channels[i];
  }
  fx.set_forward_depth(cfg.tap_block);
  return fx;
}

inline ModelGraph build_extractor(const ExtractorConfig& cfg, std::uint64_t seed) {
  ModelGraph fx = make_extractor(cfg);
  init_weights(fx, seed);
  return fx;
}

/// Rebuilds an uninitialized graph from its persisted config encoding.
inline ModelGraph model_from_meta(const std::vector<float>& m) {
  auto at = [&](std::size_t i) {
    if (i >= m.size()) throw FormatError("model config record is truncated");
    const float v = m[i];
    if (!(v >= 0.0f) || v != std::floor(v)) throw FormatError("model config record is corrupt");
    return static_cast<std::size_t>(v);
  };
  switch (at(0)) {
    case 0: {
      GeneratorConfig c;
      c.in_channels = at(1);
      c.base_channels = at(2);
      c.num_residual_blocks = at(3);
      c.upscale_factor = at(4);
      c.conv = at(5) == 1 ? ConvKind::Standard : ConvKind::DepthwiseSeparable;
      return make_generator(c);
    }
    case 1: {
      DiscriminatorConfig c;
      c.in_channels = at(1);
      c.pool_size = at(2);
      c.hidden_units = at(3);
      for (std::size_t i = 0; i < 8; ++i) {
        c.block_channels[i] = at(4 + i);
        c.strides[i] = at(12 + i);
      }
      return make_discriminator(c);
    }
    case 2: {
      ExtractorConfig c;
      c.in_channels = at(1);
      c.tap_block = at(2);
      const std::size_t n = at(3);
      c.channels.resize(n);
      c.strides.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        c.channels[i] = at(4 + i);
        c.strides[i] = at(4 + n + i);
      }
      return make_extractor(c);
    }
    default:
      throw FormatError("unknown model topology id " + std::to_string(at(0)));
  }
}

inline GeneratorConfig generator_config(const ModelGraph& g) {
  if (g.topology() != Topology::Generator) throw Error("model is not a generator");
  const auto& m = g.meta();
  GeneratorConfig c;
  c.in_channels = static_cast<std::size_t>(m[1]);
  c.base_channels = static_cast<std::size_t>(m[2]);
  c.num_residual_blocks = static_cast<std::size_t>(m[3]);
  c.upscale_factor = static_cast<std::size_t>(m[4]);
  c.conv = m[5] == 1.0f ? ConvKind::Standard : ConvKind::DepthwiseSeparable;
  return c;
}

// ---------------------------------------------------------------------------

/// Kaiming-uniform (gain sqrt 2) conv/linear weights, zero biases, unit BN
/// scale, PReLU slope 0.25, fresh running statistics.
inline void init_weights(ModelGraph& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : model.parameters()) {
    Tensor& t = *p.value;
    switch (p.kind) {
      case ParamKind::ConvWeight:
      case ParamKind::LinearWeight: {
        const std::size_t fan_in = t.shape().c * t.shape().h * t.shape().w;
        const float bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in)));
        std::uniform_real_distribution<float> dist(-bound, bound);
        for (float& v : t.data()) v = dist(rng);
        break;
      }
      case ParamKind::ConvBias:
      case ParamKind::LinearBias:
      case ParamKind::BnBeta:
      case ParamKind::BnRunningMean:
        t.fill(0.0f);
        break;
      case ParamKind::BnGamma:
      case ParamKind::BnRunningVar:
        t.fill(1.0f);
        break;
      case ParamKind::PreluSlope:
        t.fill(0.25f);
        break;
    }
  }
}

/// Element count of the selected learnable tensors. Buffers never count.
/// `conv_only` restricts to convolution weights (plus their biases when
/// `include_biases`); otherwise every learnable tensor counts, with conv
/// and linear biases gated by `include_biases`.
inline std::size_t count_parameters(ModelGraph& model, bool include_biases, bool conv_only) {
  std::size_t total = 0;
  for (const auto& p : model.parameters()) {
    if (is_buffer(p.kind)) continue;
    if (is_bias(p.kind) && !include_biases) continue;
    if (conv_only && p.kind != ParamKind::ConvWeight && p.kind != ParamKind::ConvBias) continue;
    total += p.value->size();
  }
  return total;
}

struct LayerParamRow {
  std::string path;
  std::string kind;
  std::size_t weights = 0;  // learnable, non-bias
  std::size_t biases = 0;
  bool has_batch_norm = false;
};

/// One row per leaf layer that owns learnable tensors, in graph order.
inline std::vector<LayerParamRow> parameter_table(ModelGraph& model) {
  std::vector<LayerParamRow> rows;
  std::function<void(const std::string&, Layer&)> walk = [&](const std::string& path, Layer& l) {
    if (auto* seq = dynamic_cast<Sequential*>(&l)) {
      seq->visit_children(path, walk);
      return;
    }
    LayerParamRow row{path, l.kind(), 0, 0, l.kind() == "batch_norm"};
    l.visit(path, [&](ParamRef p) {
      if (is_buffer(p.kind)) return;
      (is_bias(p.kind) ? row.biases : row.weights) += p.value->size();
    });
    if (row.weights + row.biases > 0) rows.push_back(row);
  };
  model.root().visit_children("", walk);
  return rows;
}

}  // namespace swiftsr
