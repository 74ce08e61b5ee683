#pragma once

#include <cmath>

#include "camera.hpp"
#include "triplane.hpp"

// Shared fixtures for renderer-level tests: analytic sphere scenes encoded
// exactly into tri-plane features (each plane stores the squared distance to
// the sphere center projected onto it, so the aggregated feature is
// (2/3)|p-c|^2 and a hand-built decoder turns it into a steep density).
namespace tpd::testing {

struct SphereScene {
  tpd::tri::TriPlane tp;
  tpd::tri::Decoder decoder;
};

inline SphereScene make_sphere_scene(tpd::Vec3 center, double radius,
                                     std::array<double, 3> color, int res, double steep,
                                     tpd::ad::Scalar dt = tpd::ad::Scalar::F32) {
  using namespace tpd::ad;
  SphereScene s;
  auto grid = [&](int i) { return -1.0 + 2.0 * double(i) / double(res - 1); };
  double cx[3] = {center.x, center.y, center.z};
  // plane p maps (row, col) -> axes (rows[p], cols[p])
  static const int rows[3] = {0, 1, 2};
  static const int cols[3] = {1, 2, 0};
  for (int p = 0; p < 3; ++p) {
    std::vector<double> v(size_t(res) * size_t(res));
    for (int i = 0; i < res; ++i)
      for (int j = 0; j < res; ++j) {
        double a = grid(i) - cx[rows[p]];
        double b = grid(j) - cx[cols[p]];
        v[size_t(i * res + j)] = a * a + b * b;
      }
    s.tp.planes[size_t(p)] = Tensor::from_vector({res, res, 1}, v, dt);
  }
  // feature m = (2/3)|p-c|^2; h = steep * (R^2 - 1.5 m) = steep * (R^2 - d^2)
  s.decoder.w1 = Tensor::from_vector({1, 1}, {-1.5 * steep}, dt);
  s.decoder.b1 = Tensor::from_vector({1, 1}, {steep * radius * radius}, dt);
  auto logit = [](double c) { return std::log(c / (1.0 - c)); };
  s.decoder.w2 = Tensor::from_vector({1, 4}, {1.0, 0.0, 0.0, 0.0}, dt);
  s.decoder.b2 =
      Tensor::from_vector({1, 4}, {0.0, logit(color[0]), logit(color[1]), logit(color[2])}, dt);
  s.decoder.density_bias = 0.0;
  s.tp.decoder = &s.decoder;
  return s;
}

inline tpd::Vec3 rotate_y(tpd::Vec3 v, double ang) {
  double c = std::cos(ang), s = std::sin(ang);
  return {c * v.x + s * v.z, v.y, -s * v.x + c * v.z};
}

}  // namespace tpd::testing
