#pragma once

// Stateful layer objects: each owns its parameters, their gradients, and the
// context saved by the most recent recording forward pass.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "swiftsr/ops.hpp"
#include "swiftsr/tensor.hpp"

namespace swiftsr {

enum class ParamKind {
  ConvWeight,
  ConvBias,
  LinearWeight,
  LinearBias,
  BnGamma,
  BnBeta,
  PreluSlope,
  BnRunningMean,  // buffer
  BnRunningVar,   // buffer
};

inline bool is_buffer(ParamKind k) {
  return k == ParamKind::BnRunningMean || k == ParamKind::BnRunningVar;
}
inline bool is_bias(ParamKind k) {
  return k == ParamKind::ConvBias || k == ParamKind::LinearBias;
}

/// Non-owning view of a named tensor inside a layer. grad is null for buffers.
struct ParamRef {
  std::string name;
  ParamKind kind;
  Tensor* value;
  Tensor* grad;
};

/// Options for a forward pass. `retain` keeps the context needed by backward.
struct Pass {
  Mode mode = Mode::Eval;
  bool retain = false;

  static Pass train() { return {Mode::Train, true}; }
  static Pass eval() { return {Mode::Eval, false}; }
  static Pass eval_retain() { return {Mode::Eval, true}; }
};

class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  const std::string& name() const noexcept { return name_; }
  virtual std::string kind() const = 0;

  virtual Tensor forward(const Tensor& x, const Pass& pass) = 0;
  /// Adjoint of the last retained forward. Parameter gradients are
  /// accumulated only when `param_grads` is set.
  virtual Tensor backward(const Tensor& gy, bool param_grads) = 0;

  virtual Shape output_shape(const Shape& in) const { return in; }
  /// Multiply-accumulate count for one forward on `in`.
  virtual std::uint64_t macs(const Shape&) const { return 0; }

  /// Visits parameters with names prefixed by `prefix`.
  virtual void visit(const std::string& prefix, const std::function<void(ParamRef)>& fn) {
    (void)prefix;
    (void)fn;
  }
  /// Visits direct children (for per-layer reporting).
  virtual void visit_children(const std::string& prefix,
                              const std::function<void(const std::string&, Layer&)>& fn) {
    (void)prefix;
    (void)fn;
  }

  void clear_context() { clear_context_impl(); }

 protected:
  virtual void clear_context_impl() {}

  static std::string join(const std::string& prefix, const std::string& n) {
    return prefix.empty() ? n : prefix + "." + n;
  }

  static const Tensor& saved(const std::optional<Tensor>& t, const std::string& who) {
    if (!t) throw ShapeError(who + ": backward called without a retained forward");
    return *t;
  }

 private:
  std::string name_;
};

// ---------------------------------------------------------------------------

class Conv2d final : public Layer {
 public:
  Conv2d(std::string name, std::size_t in_c, std::size_t out_c, std::size_t k,
         std::size_t stride, bool bias = true)
      : Layer(std::move(name)) {
    p_.weight = Tensor(Shape{out_c, in_c, k, k});
    p_.has_bias = bias;
    if (bias) p_.bias = Tensor(vec_shape(out_c));
    p_.stride = stride;
    p_.padding = k / 2;
    gw_ = Tensor(p_.weight.shape());
    if (bias) gb_ = Tensor(p_.bias.shape());
  }

  std::string kind() const override { return "conv2d"; }
  ConvParams& params() { return p_; }
  const ConvParams& params() const { return p_; }

  Tensor forward(const Tensor& x, const Pass& pass) override {
    Tensor y = conv2d(x, p_);
    if (pass.retain) x_ = x;
    return y;
  }
  Tensor backward(const Tensor& gy, bool param_grads) override {
    return conv2d_backward(saved(x_, name()), p_, gy, param_grads ? &gw_ : nullptr,
                           param_grads && p_.has_bias ? &gb_ : nullptr);
  }
  Shape output_shape(const Shape& in) const override {
    return Shape{in.n, p_.out_channels(), conv_out_size(in.h, p_.kernel(), p_.stride, p_.padding),
                 conv_out_size(in.w, p_.kernel(), p_.stride, p_.padding)};
  }
  std::uint64_t macs(const Shape& in) const override {
    const Shape o = output_shape(in);
    return static_cast<std::uint64_t>(o.numel()) * in.c * p_.kernel() * p_.kernel();
  }
  void visit(const std::string& prefix, const std::function<void(ParamRef)>& fn) override {
    fn({join(prefix, "weight"), ParamKind::ConvWeight, &p_.weight, &gw_});
    if (p_.has_bias) fn({join(prefix, "bias"), ParamKind::ConvBias, &p_.bias, &gb_});
  }

 private:
  void clear_context_impl() override { x_.reset(); }
  ConvParams p_;
  Tensor gw_, gb_;
  std::optional<Tensor> x_;
};

/// Depthwise stage followed by a 1x1 pointwise stage.
class DSConv2d final : public Layer {
 public:
  DSConv2d(std::string name, std::size_t in_c, std::size_t out_c, std::size_t k,
           std::size_t stride, bool bias = true)
      : Layer(std::move(name)) {
    dw_.weight = Tensor(Shape{in_c, 1, k, k});
    dw_.stride = stride;
    dw_.padding = k / 2;
    pw_.weight = Tensor(Shape{out_c, in_c, 1, 1});
    dw_.has_bias = pw_.has_bias = bias;
    if (bias) {
      dw_.bias = Tensor(vec_shape(in_c));
      pw_.bias = Tensor(vec_shape(out_c));
      gdb_ = Tensor(dw_.bias.shape());
      gpb_ = Tensor(pw_.bias.shape());
    }
    gdw_ = Tensor(dw_.weight.shape());
    gpw_ = Tensor(pw_.weight.shape());
  }

  std::string kind() const override { return "dsconv2d"; }
  ConvParams& depthwise() { return dw_; }
  ConvParams& pointwise() { return pw_; }

  Tensor forward(const Tensor& x, const Pass& pass) override {
    Tensor mid = depthwise_conv2d(x, dw_);
    Tensor y = conv2d(mid, pw_);
    if (pass.retain) {
      x_ = x;
      mid_ = std::move(mid);
    }
    return y;
  }
  Tensor backward(const Tensor& gy, bool param_grads) override {
    const bool b = param_grads && dw_.has_bias;
    Tensor gmid = conv2d_backward(saved(mid_, name()), pw_, gy, param_grads ? &gpw_ : nullptr,
                                  b ? &gpb_ : nullptr);
    return depthwise_conv2d_backward(saved(x_, name()), dw_, gmid,
                                     param_grads ? &gdw_ : nullptr, b ? &gdb_ : nullptr);
  }
  Shape output_shape(const Shape& in) const override {
    const std::size_t k = dw_.kernel();
    return Shape{in.n, pw_.out_channels(), conv_out_size(in.h, k, dw_.stride, dw_.padding),
                 conv_out_size(in.w, k, dw_.stride, dw_.padding)};
  }
  std::uint64_t macs(const Shape& in) const override {
    const Shape o = output_shape(in);
    const std::uint64_t pix = static_cast<std::uint64_t>(o.n) * o.h * o.w;
    const std::size_t k = dw_.kernel();
    return pix * in.c * k * k + pix * in.c * o.c;
  }
  void visit(const std::string& prefix, const std::function<void(ParamRef)>& fn) override {
    fn({join(prefix, "depthwise.weight"), ParamKind::ConvWeight, &dw_.weight, &gdw_});
    if (dw_.has_bias) fn({join(prefix, "depthwise.bias"), ParamKind::ConvBias, &dw_.bias, &gdb_});
    fn({join(prefix, "pointwise.weight"), ParamKind::ConvWeight, &pw_.weight, &gpw_});
    if (pw_.has_bias) fn({join(prefix, "pointwise.bias"), ParamKind::ConvBias, &pw_.bias, &gpb_});
  }

 private:
  void clear_context_impl() override {
    x_.reset();
    mid_.reset();
  }
  ConvParams dw_, pw_;
  Tensor gdw_, gdb_, gpw_, gpb_;
  std::optional<Tensor> x_, mid_;
};

class BatchNorm2d final : public Layer {
 public:
  BatchNorm2d(std::string name, std::size_t channels) : Layer(std::move(name)) {
    st_.gamma = Tensor(vec_shape(channels), 1.0f);
    st_.beta = Tensor(vec_shape(channels), 0.0f);
    st_.running_mean = Tensor(vec_shape(channels), 0.0f);
    st_.running_var = Tensor(vec_shape(channels), 1.0f);
    gg_ = Tensor(vec_shape(channels));
    gb_ = Tensor(vec_shape(channels));
  }
  std::string kind() const override { return "batch_norm"; }
  BatchNormState& state() { return st_; }

  Tensor forward(const Tensor& x, const Pass& pass) override {
    if (!pass.retain) return batch_norm(x, st_, pass.mode);
    BatchNormContext ctx;
    Tensor y = batch_norm(x, st_, pass.mode, &ctx);
    ctx_ = std::move(ctx);
    return y;
  }
  Tensor backward(const Tensor& gy, bool param_grads) override {
    if (!ctx_) throw ShapeError(name() + ": backward called without a retained forward");
    return batch_norm_backward(*ctx_, st_, gy, param_grads ? &gg_ : nullptr,
                               param_grads ? &gb_ : nullptr);
  }
  std::uint64_t macs(const Shape& in) const override { return in.numel(); }
  void visit(const std::string& prefix, const std::function<void(ParamRef)>& fn) override {
    fn({join(prefix, "gamma"), ParamKind::BnGamma, &st_.gamma, &gg_});
    fn({join(prefix, "beta"), ParamKind::BnBeta, &st_.beta, &gb_});
    fn({join(prefix, "running_mean"), ParamKind::BnRunningMean, &st_.running_mean, nullptr});
    fn({join(prefix, "running_var"), ParamKind::BnRunningVar, &st_.running_var, nullptr});
  }

 private:
  void clear_context_impl() override { ctx_.reset(); }
  BatchNormState st_;
  Tensor gg_, gb_;
  std::optional<BatchNormContext> ctx_;
};

class PRelu final : public Layer {
 public:
  PRelu(std::string name, std::size_t channels, float init = 0.25f) : Layer(std::move(name)) {
    p_.slope = Tensor(vec_shape(channels), init);
    gs_ = Tensor(vec_shape(channels));
  }
  std::string kind() const override { return "prelu"; }
  PReluParams& params() { return p_; }

  Tensor forward(const Tensor& x, const Pass& pass) override {
    if (pass.retain) x_ = x;
    return prelu(x, p_);
  }
  Tensor backward(const Tensor& gy, bool param_grads) override {
    return prelu_backward(saved(x_, name()), p_, gy, param_grads ? &gs_ : nullptr);
  }
  void visit(const std::string& prefix, const std::function<void(ParamRef)>& fn) override {
    fn({join(prefix, "slope"), ParamKind::PreluSlope, &p_.slope, &gs_});
  }

 private:
  void clear_context_impl() override { x_.reset(); }
  PReluParams p_;
  Tensor gs_;
  std::optional<Tensor> x_;
};

class LeakyRelu final : public Layer {
 public:
  LeakyRelu(std::string name, float slope) : Layer(std::move(name)), slope_(slope) {}
  std::string kind() const override { return "leaky_relu"; }
  Tensor forward(const Tensor& x, const Pass& pass) override {
    if (pass.retain) x_ = x;
    return leaky_relu(x, slope_);
  }
  Tensor backward(const Tensor& gy, bool) override {
    return leaky_relu_backward(saved(x_, name()), slope_, gy);
  }

 private:
  void clear_context_impl() override { x_.reset(); }
  float slope_;
  std::optional<Tensor> x_;
};

class Relu6 final : public Layer {
 public:
  explicit Relu6(std::string name) : Layer(std::move(name)) {}
  std::string kind() const override { return "relu6"; }
  Tensor forward(const Tensor& x, const Pass& pass) override {
    if (pass.retain) x_ = x;
    return relu6(x);
  }
  Tensor backward(const Tensor& gy, bool) override { return relu6_backward(saved(x_, name()), gy); }

 private:
  void clear_context_impl() override { x_.reset(); }
  std::optional<Tensor> x_;
};

class Sigmoid final : public Layer {
 public:
  explicit Sigmoid(std::string name) : Layer(std::move(name)) {}
  std::string kind() const override { return "sigmoid"; }
  Tensor forward(const Tensor& x, const Pass& pass) override {
    Tensor y = sigmoid(x);
    if (pass.retain) y_ = y;
    return y;
  }
  Tensor backward(const Tensor& gy, bool) override {
    return sigmoid_backward(saved(y_, name()), gy);
  }

 private:
  void clear_context_impl() override { y_.reset(); }
  std::optional<Tensor> y_;
};

class PixelShuffle final : public Layer {
 public:
  PixelShuffle(std::string name, std::size_t r) : Layer(std::move(name)), r_(r) {}
  std::string kind() const override { return "pixel_shuffle"; }
  Tensor forward(const Tensor& x, const Pass&) override { return pixel_shuffle(x, r_); }
  Tensor backward(const Tensor& gy, bool) override { return pixel_unshuffle(gy, r_); }
  Shape output_shape(const Shape& in) const override {
    if (in.c % (r_ * r_) != 0) {
      throw ShapeError("pixel_shuffle: channels " + std::to_string(in.c) +
                       " not divisible by " + std::to_string(r_ * r_));
    }
    return Shape{in.n, in.c / (r_ * r_), in.h * r_, in.w * r_};
  }

 private:
  std::size_t r_;
};

class AdaptiveAvgPool final : public Layer {
 public:
  AdaptiveAvgPool(std::string name, std::size_t oh, std::size_t ow)
      : Layer(std::move(name)), oh_(oh), ow_(ow) {}
  std::string kind() const override { return "adaptive_avg_pool"; }
  Tensor forward(const Tensor& x, const Pass& pass) override {
    if (pass.retain) in_ = x.shape();
    return adaptive_avg_pool(x, oh_, ow_);
  }
  Tensor backward(const Tensor& gy, bool) override {
    if (!in_) throw ShapeError(name() + ": backward called without a retained forward");
    return adaptive_avg_pool_backward(*in_, gy);
  }
  Shape output_shape(const Shape& in) const override { return Shape{in.n, in.c, oh_, ow_}; }

 private:
  void clear_context_impl() override { in_.reset(); }
  std::size_t oh_, ow_;
  std::optional<Shape> in_;
};

/// Dense layer over the flattened (c,h,w) of each batch entry.
class Linear final : public Layer {
 public:
  Linear(std::string name, std::size_t in, std::size_t out) : Layer(std::move(name)) {
    w_ = Tensor(Shape{out, in, 1, 1});
    b_ = Tensor(vec_shape(out));
    gw_ = Tensor(w_.shape());
    gb_ = Tensor(b_.shape());
  }
  std::string kind() const override { return "linear"; }
  Tensor& weight() { return w_; }
  Tensor& bias() { return b_; }

  Tensor forward(const Tensor& x, const Pass& pass) override {
    if (pass.retain) x_ = x;
    return linear(x, w_, b_);
  }
  Tensor backward(const Tensor& gy, bool param_grads) override {
    return linear_backward(saved(x_, name()), w_, gy, param_grads ? &gw_ : nullptr,
                           param_grads ? &gb_ : nullptr);
  }
  Shape output_shape(const Shape& in) const override {
    if (in.c * in.plane() != w_.shape().c) {
      throw ShapeError("linear: input width " + std::to_string(in.c * in.plane()) +
                       " does not match " + std::to_string(w_.shape().c));
    }
    return Shape{in.n, w_.shape().n, 1, 1};
  }
  std::uint64_t macs(const Shape& in) const override {
    return static_cast<std::uint64_t>(in.n) * w_.size();
  }
  void visit(const std::string& prefix, const std::function<void(ParamRef)>& fn) override {
    fn({join(prefix, "weight"), ParamKind::LinearWeight, &w_, &gw_});
    fn({join(prefix, "bias"), ParamKind::LinearBias, &b_, &gb_});
  }

 private:
  void clear_context_impl() override { x_.reset(); }
  Tensor w_, b_, gw_, gb_;
  std::optional<Tensor> x_;
};

// ---------------------------------------------------------------------------
// Composites

class Sequential : public Layer {
 public:
  explicit Sequential(std::string name) : Layer(std::move(name)) {}
  std::string kind() const override { return "sequential"; }

  template <class L, class... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  std::size_t size() const noexcept { return layers_.size(); }
  Layer& at(std::size_t i) { return *layers_.at(i); }

  Tensor forward(const Tensor& x, const Pass& pass) override { return forward_prefix(x, pass, size()); }

  /// Runs only the first `count` children.
  Tensor forward_prefix(const Tensor& x, const Pass& pass, std::size_t count) {
    Tensor h = x;
    for (std::size_t i = 0; i < count; ++i) {
      try {
        h = layers_[i]->forward(h, pass);
      } catch (const ShapeError& e) {
        throw ShapeError(std::string(e.what()).find(" in layer ") == std::string::npos
                             ? std::string(e.what()) + " in layer '" + layers_[i]->name() + "'"
                             : std::string(e.what()));
      }
    }
    return h;
  }

  Tensor backward(const Tensor& gy, bool param_grads) override {
    return backward_prefix(gy, param_grads, size());
  }
  Tensor backward_prefix(const Tensor& gy, bool param_grads, std::size_t count) {
    Tensor g = gy;
    for (std::size_t i = count; i-- > 0;) g = layers_[i]->backward(g, param_grads);
    return g;
  }

  Shape output_shape(const Shape& in) const override {
    Shape s = in;
    for (const auto& l : layers_) s = l->output_shape(s);
    return s;
  }
  std::uint64_t macs(const Shape& in) const override {
    std::uint64_t total = 0;
    Shape s = in;
    for (const auto& l : layers_) {
      total += l->macs(s);
      s = l->output_shape(s);
    }
    return total;
  }
  void visit(const std::string& prefix, const std::function<void(ParamRef)>& fn) override {
    for (auto& l : layers_) l->visit(join(prefix, l->name()), fn);
  }
  void visit_children(const std::string& prefix,
                      const std::function<void(const std::string&, Layer&)>& fn) override {
    for (auto& l : layers_) fn(join(prefix, l->name()), *l);
  }

 protected:
  void clear_context_impl() override {
    for (auto& l : layers_) l->clear_context();
  }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// out = x + body(x)
class Residual final : public Sequential {
 public:
  using Sequential::Sequential;
  std::string kind() const override { return "residual"; }
  Tensor forward(const Tensor& x, const Pass& pass) override {
    Tensor y = Sequential::forward(x, pass);
    if (y.shape() != x.shape()) {
      throw ShapeError("residual sum shape mismatch " + x.shape().str() + " vs " +
                       y.shape().str() + " in layer '" + name() + "'");
    }
    tensor_add_inplace(y, x);
    return y;
  }
  Tensor backward(const Tensor& gy, bool param_grads) override {
    Tensor g = Sequential::backward(gy, param_grads);
    tensor_add_inplace(g, gy);
    return g;
  }
};

}  // namespace swiftsr
