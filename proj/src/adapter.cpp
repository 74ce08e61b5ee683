#include "adapter.hpp"

#include <cmath>

namespace tpd::adapter {

using namespace tpd::ad;

AdapterParams AdapterParams::init(int plane_channels, int text_dim, Rng& rng, ad::Scalar dt) {
  AdapterParams p;
  int d = 3 * plane_channels;
  auto lin = [&](int in, int out, double gain) {
    return mul_scalar(Tensor::randn({in, out}, rng, dt), gain / std::sqrt(double(in))).detach();
  };
  p.wq = lin(3 * plane_channels, d, 1.0);
  p.wk = lin(text_dim, d, 1.0);
  p.wv = lin(text_dim, d, 1.0);
  p.wo = lin(d, plane_channels, 1.0);
  p.beta = Tensor::from_vector({1}, {1.0}, dt);
  p.gamma = Tensor::from_vector({1}, {0.0}, dt);
  return p;
}

Tensor axis_pool(const Tensor& plane, int axis, bool max_pool) {
  if (plane.ndim() != 3) throw ContractError("axis_pool: plane must be (H,W,C)");
  if (axis != 0 && axis != 1) throw ContractError("axis_pool: axis must be 0 (rows) or 1 (cols)");
  return max_pool ? reduce_max(plane, {axis}, true) : reduce_mean(plane, {axis}, true);
}

std::array<Tensor, 3> build_aware_feature(const std::array<Tensor, 3>& planes, bool max_pool) {
  const Shape& s0 = planes[0].shape();
  for (const auto& p : planes)
    if (p.shape() != s0) throw ContractError("build_aware_feature: plane shape mismatch");
  int64_t h = s0[0], w = s0[1], c = s0[2];
  if (h != w) throw ContractError("build_aware_feature: planes must be square");
  std::array<Tensor, 3> out;
  for (int i = 0; i < 3; ++i) {
    const Tensor& f_ab = planes[size_t(i)];
    const Tensor& f_bc = planes[size_t((i + 1) % 3)];  // rows=b, cols=c
    const Tensor& f_ca = planes[size_t((i + 2) % 3)];  // rows=c, cols=a
    // pool the perpendicular axis c out of both siblings
    Tensor over_b = axis_pool(f_bc, 1, max_pool);  // (H,1,C), indexed by b
    Tensor over_a = axis_pool(f_ca, 0, max_pool);  // (1,W,C), indexed by a
    // align: b runs along f_ab's columns, a along its rows
    Tensor b_cols = expand(reshape(over_b, {1, h, c}), 0, h);  // (r,c') = pool_b[c']
    Tensor a_rows = expand(reshape(over_a, {w, 1, c}), 1, w);  // (r,c') = pool_a[r]
    out[size_t(i)] = concat({a_rows, f_ab, b_cols}, 2);
  }
  return out;
}

Tensor tokenize_planes(const Tensor& aware) {
  if (aware.ndim() != 3) throw ContractError("tokenize_planes: expects (H,W,C)");
  return reshape(aware, {aware.dim(0) * aware.dim(1), aware.dim(2)});
}

Tensor untokenize(const Tensor& tokens, int64_t h, int64_t w) {
  if (tokens.ndim() != 2 || tokens.dim(0) != h * w)
    throw ContractError("untokenize: token count does not match spatial extent");
  return reshape(tokens, {h, w, tokens.dim(1)});
}

Tensor gated_cross_attention(const Tensor& v_plane, const Tensor& tokens3d,
                             const Tensor& word_tokens, const AdapterParams& p,
                             const AdapterOpts& opts) {
  if (word_tokens.dim(0) == 0) throw ContractError("gated_cross_attention: empty word tokens");
  int64_t d = p.wq.dim(1);
  Tensor q = matmul(tokens3d, p.wq);
  Tensor k = matmul(word_tokens, p.wk);
  Tensor v = matmul(word_tokens, p.wv);
  Tensor att = attention(q, k, v, 1.0 / std::sqrt(double(d)));
  Tensor res = matmul(att, p.wo);
  Tensor a = untokenize(res, v_plane.dim(0), v_plane.dim(1));
  return gated_residual(v_plane, a, p.beta, p.gamma, opts.use_gate);
}

std::array<Tensor, 3> adapter_forward(const std::array<Tensor, 3>& planes,
                                      const Tensor& word_tokens, const AdapterParams& p,
                                      const AdapterOpts& opts) {
  std::array<Tensor, 3> aware;
  if (opts.no_3d_aware) {
    // ablation: tokens see only the plane itself, replicated to keep shapes
    for (int i = 0; i < 3; ++i)
      aware[size_t(i)] = concat({planes[size_t(i)], planes[size_t(i)], planes[size_t(i)]}, 2);
  } else {
    aware = build_aware_feature(planes, opts.max_pool);
  }
  std::array<Tensor, 3> out;
  for (int i = 0; i < 3; ++i) {
    Tensor tokens = tokenize_planes(aware[size_t(i)]);
    out[size_t(i)] = gated_cross_attention(planes[size_t(i)], tokens, word_tokens, p, opts);
  }
  return out;
}

}  // namespace tpd::adapter
