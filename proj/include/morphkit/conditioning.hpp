// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "morphkit/core.hpp"
#include "morphkit/morphology.hpp"
#include "morphkit/nn.hpp"

namespace morphkit {

// Feature-wise scale and shift for one joint.
struct FilmParams {
  std::vector<double> gamma;
  std::vector<double> beta;
};

// Linear generator mapping a 12-feature joint descriptor to (gamma, beta).
// With zero init both outputs are exactly zero for every input, so
// modulation starts as the identity.
struct FilmGenerator {
  int out_dim = 0;  // d; the affine map emits 2 * d values
  bool final_layer_zero_init = true;
  nn::Tensor w;  // (2 * d) x 12
  nn::Tensor b;  // 1 x (2 * d)

  FilmGenerator() = default;
  explicit FilmGenerator(int d, bool zero_init = true)
      : out_dim(d), final_layer_zero_init(zero_init),
        w(2 * d, kDescriptorDim), b(1, 2 * d) {}

  void init_params(Rng& rng) {
    if (!final_layer_zero_init) {
      w.fill_normal(rng, 1.0 / std::sqrt(static_cast<double>(kDescriptorDim)));
    }
  }

  FilmParams generate(std::span<const double> descriptor) const {
    require(static_cast<int>(descriptor.size()) == kDescriptorDim,
            "descriptor must have " + std::to_string(kDescriptorDim) +
                " features");
    FilmParams p;
    p.gamma.resize(out_dim);
    p.beta.resize(out_dim);
    for (int o = 0; o < 2 * out_dim; ++o) {
      double acc = b.value(0, o);
      for (int k = 0; k < kDescriptorDim; ++k) {
        acc += w.value(o, k) * descriptor[k];
      }
      (o < out_dim ? p.gamma[o] : p.beta[o - out_dim]) = acc;
    }
    return p;
  }

  // Accumulates generator gradients from d(gamma), d(beta) for one joint.
  void backward(std::span<const double> descriptor,
                std::span<const double> dgamma,
                std::span<const double> dbeta) {
    for (int o = 0; o < 2 * out_dim; ++o) {
      const double g = o < out_dim ? dgamma[o] : dbeta[o - out_dim];
      b.grad(0, o) += g;
      for (int k = 0; k < kDescriptorDim; ++k) {
        w.grad(o, k) += g * descriptor[k];
      }
    }
  }
};

// z~ = (1 + gamma) * z + beta, elementwise.
inline std::vector<double> modulate(std::span<const double> z,
                                    const FilmParams& p) {
  require(z.size() == p.gamma.size() && z.size() == p.beta.size(),
          "modulate: dimension mismatch");
  std::vector<double> out(z.size());
  for (size_t i = 0; i < z.size(); ++i) {
    out[i] = (1.0 + p.gamma[i]) * z[i] + p.beta[i];
  }
  return out;
}

// Backward of modulate: fills dz and accumulates dgamma, dbeta.
inline void modulate_backward(std::span<const double> z, const FilmParams& p,
                              std::span<const double> dout,
                              std::span<double> dz,
                              std::span<double> dgamma,
                              std::span<double> dbeta) {
  for (size_t i = 0; i < z.size(); ++i) {
    dz[i] = (1.0 + p.gamma[i]) * dout[i];
    dgamma[i] += dout[i] * z[i];
    dbeta[i] += dout[i];
  }
}

}  // namespace morphkit
