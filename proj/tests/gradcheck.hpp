#pragma once

// Finite-difference audit of a layer's adjoint: input gradient and every
// learnable parameter, probed through L = sum(forward(x) * r).

#include <algorithm>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "swiftsr/layers.hpp"

namespace oracle {

struct LayerCheck {
  double input_rel = 0.0;
  double param_rel = 0.0;
  std::size_t checked = 0;
  double worst() const { return std::max(input_rel, param_rel); }
};

inline LayerCheck check_layer(swiftsr::Layer& layer, Tensor x, swiftsr::Mode mode, std::uint64_t seed,
                              double h = 1e-2, std::size_t max_checks = 48) {
  using swiftsr::Pass;
  std::vector<swiftsr::ParamRef> params;
  layer.visit("", [&](swiftsr::ParamRef p) {
    if (!swiftsr::is_buffer(p.kind)) params.push_back(p);
  });
  for (auto& p : params) p.grad->fill(0.0f);
  const Tensor y = layer.forward(x, Pass{mode, true});
  const Tensor r = random_tensor(y.shape(), seed ^ 0x5eed);
  const Tensor gx = layer.backward(r, true);
  layer.clear_context();

  auto loss = [&] { return dot(layer.forward(x, Pass{mode, false}), r); };
  LayerCheck out;
  const FdResult fx = finite_difference(x, gx, loss, h, max_checks);
  out.input_rel = fx.max_rel;
  out.checked += fx.checked;
  for (auto& p : params) {
    const Tensor g = *p.grad;
    const FdResult fp = finite_difference(*p.value, g, loss, h, max_checks);
    out.param_rel = std::max(out.param_rel, fp.max_rel);
    out.checked += fp.checked;
  }
  return out;
}

/// Gives every learnable tensor of `layer` seeded random values in [lo, hi].
inline void randomize(swiftsr::Layer& layer, std::uint64_t seed, float lo = -0.5f, float hi = 0.5f) {
  std::uint64_t s = seed;
  layer.visit("", [&](swiftsr::ParamRef p) {
    if (swiftsr::is_buffer(p.kind)) return;
    *p.value = random_tensor(p.value->shape(), ++s * 7919, lo, hi);
  });
}

}  // namespace oracle
