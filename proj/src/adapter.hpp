#pragma once

#include <array>

#include "tensor.hpp"

namespace tpd::adapter {

using ad::Tensor;

// Gated cross-attention adapter operating on a tri-plane triple. Projection
// weights are shared across the three planes; beta/gamma start at 1 and 0 so
// the adapter is the exact identity at initialization.
struct AdapterParams {
  Tensor wq, wk, wv, wo;  // (3C,d) (Dtext,d) (Dtext,d) (d,C), d = 3C
  Tensor beta, gamma;     // scalars

  static AdapterParams init(int plane_channels, int text_dim, Rng& rng, ad::Scalar dt);
};

struct AdapterOpts {
  bool use_gate = true;      // false: residual scaled by beta only
  bool no_3d_aware = false;  // false: cross-plane pooled construction; true: plane-only tokens
  bool max_pool = false;     // mean pooling by default
};

// Mean (or max) over one spatial axis, keeping the axis at extent 1.
// axis 0 pools rows (H,W,C) -> (1,W,C); axis 1 pools cols -> (H,1,C).
Tensor axis_pool(const Tensor& plane, int axis, bool max_pool = false);

// For each plane f_ab (cyclic triple xy, yz, zx) builds the (H,W,3C) map
// [f_(*)a from f_ca, f_ab, f_b(*) from f_bc], both siblings pooled over the
// axis c that is perpendicular to f_ab and broadcast back to plane shape.
// Requires square planes so the shared axes align index-for-index.
std::array<Tensor, 3> build_aware_feature(const std::array<Tensor, 3>& planes,
                                          bool max_pool = false);

// 1x1 patchify: (H,W,C') -> (H*W, C') tokens in row-major order.
Tensor tokenize_planes(const Tensor& aware);
Tensor untokenize(const Tensor& tokens, int64_t h, int64_t w);

// v + beta * tanh(gamma) * untokenize(CrossAttn(q=tokens3d, kv=word_tokens)).
Tensor gated_cross_attention(const Tensor& v_plane, const Tensor& tokens3d,
                             const Tensor& word_tokens, const AdapterParams& p,
                             const AdapterOpts& opts);

std::array<Tensor, 3> adapter_forward(const std::array<Tensor, 3>& planes,
                                      const Tensor& word_tokens, const AdapterParams& p,
                                      const AdapterOpts& opts = {});

}  // namespace tpd::adapter
