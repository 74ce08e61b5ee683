#pragma once

#include <array>

#include "camera.hpp"
#include "image.hpp"
#include "tensor.hpp"

namespace tpd::tri {

using ad::Tensor;

// Small MLP turning an aggregated plane feature into density and color:
// feature (C) -> hidden (lrelu) -> 4 raw outputs; density = softplus(raw0 +
// density_bias), color = sigmoid(raw1..3).
struct Decoder {
  Tensor w1, b1, w2, b2;
  double density_bias = 0.0;

  static Decoder init(int in_ch, int hidden, double density_bias, Rng& rng, ad::Scalar dt);
  // sigma: (N, 1) nonnegative, rgb: (N, 3) in [0,1]
  std::pair<Tensor, Tensor> decode(const Tensor& feats) const;
};

// Three orthogonal feature planes [f_xy, f_yz, f_zx], each (H, W, C), plus the
// decoder. Plane f_ab indexes rows by a, cols by b, both spanning [-1, 1].
struct TriPlane {
  std::array<Tensor, 3> planes;
  const Decoder* decoder = nullptr;

  int64_t res() const { return planes[0].dim(0); }
  int64_t channels() const { return planes[0].dim(2); }
  void validate() const;
};

// Mean of the three bilinear plane lookups at the projections of p (clamped to
// the unit cube). points: (N, 3) row-major world coords. Returns (N, C).
Tensor sample_points(const TriPlane& tp, const std::vector<double>& points);
// Single-point convenience.
std::vector<double> sample_point(const TriPlane& tp, const Vec3& p);

struct RenderResult {
  Tensor image;    // (H, W, 3)
  Tensor tfinal;   // (R)
};

// Emission-absorption volume rendering of the tri-plane along the given rays.
RenderResult volume_render(const TriPlane& tp, const RaySamples& rays,
                           const std::array<double, 3>& background);

struct RenderOpts {
  int resolution = 64;
  int samples = 48;
  double near_offset = 1.2;  // t_near = radius - near_offset
  double far_offset = 1.2;   // t_far  = radius + far_offset
  uint64_t seed = 0;
  bool jitter = false;
  std::array<double, 3> background = {1.0, 1.0, 1.0};
};

RenderResult render(const TriPlane& tp, const CameraPose& pose, const RenderOpts& opts);
Image render_image(const TriPlane& tp, const CameraPose& pose, const RenderOpts& opts);

// Diagnostic helper (plain math, no autodiff): per-sample compositing weights
// and final transmittance for one ray.
void composite_weights(const std::vector<double>& sigma, const std::vector<double>& deltas,
                       std::vector<double>& weights, double& tfinal);

}  // namespace tpd::tri
