#pragma once

#include "image.hpp"
#include "params.hpp"

namespace tpd::gan {

using ad::Tensor;

// Small conv classifier: image -> logit. Unconditional on text.
struct Discriminator {
  int res = 0;
  Tensor c1w, c1b, c2w, c2b, c3w, c3b;  // stride-2 convs
  Tensor fc_w, fc_b;

  static Discriminator init(int res, uint64_t seed, ad::Scalar dt);
  void register_params(ParamStore& store) const;
  Tensor forward(const Tensor& image) const;  // (1,1) logit
};

// Non-saturating GAN losses.
Tensor d_loss(const Tensor& logit_real, const Tensor& logit_fake);
Tensor g_loss(const Tensor& logit_fake);
double d_loss_value(double logit_real, double logit_fake);
double g_loss_value(double logit_fake);

// Exact R1 penalty (mean squared gradient norm of the logit w.r.t. the
// image), computed with one reverse pass per image. Reporting only; the
// training-time penalty uses the stochastic surrogate below because the
// engine deliberately has no higher-order derivatives.
double r1_penalty(const Discriminator& d, const std::vector<Image>& reals);

// Unbiased finite-difference surrogate: ((D(x+delta u)-D(x))/delta)^2 with
// u ~ N(0,I) has expectation |grad D|^2 as delta -> 0, and is first-order
// differentiable w.r.t. the discriminator parameters.
Tensor r1_fd_surrogate(const Discriminator& d, const Tensor& real_image, Rng& rng, double delta);

}  // namespace tpd::gan
