#include "triplane.hpp"

#include <cmath>

namespace tpd::tri {

using namespace tpd::ad;

Decoder Decoder::init(int in_ch, int hidden, double density_bias, Rng& rng, ad::Scalar dt) {
  Decoder d;
  double s1 = 1.0 / std::sqrt(double(in_ch));
  double s2 = 1.0 / std::sqrt(double(hidden));
  d.w1 = mul_scalar(Tensor::randn({in_ch, hidden}, rng, dt), s1).detach();
  d.b1 = Tensor::zeros({1, hidden}, dt);
  d.w2 = mul_scalar(Tensor::randn({hidden, 4}, rng, dt), s2).detach();
  d.b2 = Tensor::zeros({1, 4}, dt);
  d.density_bias = density_bias;
  return d;
}

std::pair<Tensor, Tensor> Decoder::decode(const Tensor& feats) const {
  int64_t n = feats.dim(0);
  Tensor h = matmul(feats, w1);
  h = add(h, expand(b1, 0, n));
  h = lrelu(h, 0.2);
  Tensor out = add(matmul(h, w2), expand(b2, 0, n));
  Tensor sigma = softplus(add_scalar(slice(out, 1, 0, 1), density_bias));
  Tensor rgb = sigmoid(slice(out, 1, 1, 4));
  return {sigma, rgb};
}

void TriPlane::validate() const {
  if (!decoder) throw ContractError("TriPlane: missing decoder");
  for (int i = 0; i < 3; ++i) {
    if (!planes[size_t(i)].defined() || planes[size_t(i)].ndim() != 3)
      throw ContractError("TriPlane: planes must be (H,W,C)");
    if (planes[size_t(i)].shape() != planes[0].shape())
      throw ContractError("TriPlane: all planes must share H, W, C");
  }
}

namespace {

// Projections of (x, y, z) onto the three planes, as (row, col) pairs:
// f_xy <- (x, y), f_yz <- (y, z), f_zx <- (z, x).
void plane_coords(const std::vector<double>& pts, int plane, std::vector<double>& uv) {
  size_t n = pts.size() / 3;
  uv.resize(n * 2);
  static const int rows[3] = {0, 1, 2};
  static const int cols[3] = {1, 2, 0};
  for (size_t i = 0; i < n; ++i) {
    double a = pts[i * 3 + size_t(rows[plane])];
    double b = pts[i * 3 + size_t(cols[plane])];
    uv[i * 2 + 0] = clampd(a, -1.0, 1.0);
    uv[i * 2 + 1] = clampd(b, -1.0, 1.0);
  }
}

}  // namespace

Tensor sample_points(const TriPlane& tp, const std::vector<double>& points) {
  tp.validate();
  if (points.size() % 3 != 0) throw ContractError("sample_points: points must be (N,3)");
  int64_t n = int64_t(points.size() / 3);
  Scalar dt = tp.planes[0].dtype();
  std::vector<double> uv;
  Tensor acc;
  for (int p = 0; p < 3; ++p) {
    plane_coords(points, p, uv);
    Tensor uvt = Tensor::from_vector({n, 2}, uv, dt);
    Tensor f = bilinear_sample(tp.planes[size_t(p)], uvt);
    acc = p == 0 ? f : add(acc, f);
  }
  return mul_scalar(acc, 1.0 / 3.0);
}

std::vector<double> sample_point(const TriPlane& tp, const Vec3& p) {
  std::vector<double> pts = {p.x, p.y, p.z};
  return sample_points(tp, pts).to_vector();
}

RenderResult volume_render(const TriPlane& tp, const RaySamples& rays,
                           const std::array<double, 3>& background) {
  tp.validate();
  int64_t R = rays.ray_count(), S = rays.samples_per_ray;
  for (int64_t r = 0; r < R; ++r)
    for (int64_t i = 0; i + 1 < S; ++i)
      if (!(rays.depths[size_t(r * S + i)] < rays.depths[size_t(r * S + i + 1)]))
        throw ContractError("volume_render: sample depths must be strictly increasing");

  Tensor feats = sample_points(tp, rays.positions);
  auto [sigma_n1, rgb_n3] = tp.decoder->decode(feats);
  Tensor sigma = reshape(sigma_n1, {R, S});
  Tensor rgb = reshape(rgb_n3, {R, S, 3});
  Tensor packed = composite(sigma, rgb, rays.deltas, background);
  RenderResult res;
  res.image = reshape(slice(packed, 1, 0, 3), {rays.height, rays.width, 3});
  res.tfinal = reshape(slice(packed, 1, 3, 4), {R});
  return res;
}

RenderResult render(const TriPlane& tp, const CameraPose& pose, const RenderOpts& opts) {
  CameraPose p = pose;
  p.image_size = opts.resolution;
  RaySamples rays = camera_rays(p, opts.samples, p.radius - opts.near_offset,
                                p.radius + opts.far_offset, opts.seed, opts.jitter);
  return volume_render(tp, rays, opts.background);
}

Image render_image(const TriPlane& tp, const CameraPose& pose, const RenderOpts& opts) {
  return Image::from_tensor(render(tp, pose, opts).image);
}

void composite_weights(const std::vector<double>& sigma, const std::vector<double>& deltas,
                       std::vector<double>& weights, double& tfinal) {
  if (sigma.size() != deltas.size()) throw ContractError("composite_weights: size mismatch");
  weights.resize(sigma.size());
  double trans = 1.0;
  for (size_t i = 0; i < sigma.size(); ++i) {
    double u = std::exp(-sigma[i] * deltas[i]);
    weights[i] = trans * (1.0 - u);
    trans *= u;
  }
  tfinal = trans;
}

}  // namespace tpd::tri
