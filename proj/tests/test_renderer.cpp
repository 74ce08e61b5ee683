#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "helpers.hpp"
#include "image.hpp"

using namespace tpd;
using namespace tpd::ad;
using namespace tpd::tri;

namespace {

TriPlane random_triplane(int res, int ch, uint64_t seed, const Decoder* dec, Scalar dt = Scalar::F32) {
  Rng rng(seed);
  TriPlane tp;
  for (int p = 0; p < 3; ++p)
    tp.planes[size_t(p)] = mul_scalar(Tensor::randn({res, res, ch}, rng, dt), 0.5).detach();
  tp.decoder = dec;
  return tp;
}

}  // namespace

TEST_CASE("camera: center pixel of a frontal pose looks down -z") {
  CameraPose pose;
  pose.azimuth = 0;
  pose.elevation = 0;
  pose.image_size = 33;
  RaySamples rs = camera_rays(pose, 4, 1.5, 3.9, 0, false);
  int64_t center = (33 / 2) * 33 + 33 / 2;
  CHECK(rs.dirs[size_t(center * 3) + 0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(rs.dirs[size_t(center * 3) + 1] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(rs.dirs[size_t(center * 3) + 2] == doctest::Approx(-1.0).epsilon(1e-12));
}

TEST_CASE("camera: +/- azimuth ray sets mirror across x = 0") {
  CameraPose pa, pb;
  pa.azimuth = 15.0 * M_PI / 180.0;
  pb.azimuth = -15.0 * M_PI / 180.0;
  pa.elevation = pb.elevation = 0.12;
  pa.image_size = pb.image_size = 16;
  RaySamples ra = camera_rays(pa, 2, 1.5, 3.9, 0, false);
  RaySamples rb = camera_rays(pb, 2, 1.5, 3.9, 0, false);
  int n = 16;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      int64_t i = int64_t(y) * n + x;
      int64_t j = int64_t(y) * n + (n - 1 - x);
      CHECK(ra.dirs[size_t(i * 3) + 0] == doctest::Approx(-rb.dirs[size_t(j * 3) + 0]).epsilon(1e-9));
      CHECK(ra.dirs[size_t(i * 3) + 1] == doctest::Approx(rb.dirs[size_t(j * 3) + 1]).epsilon(1e-9));
      CHECK(ra.dirs[size_t(i * 3) + 2] == doctest::Approx(rb.dirs[size_t(j * 3) + 2]).epsilon(1e-9));
      CHECK(ra.origins[size_t(i * 3) + 0] == doctest::Approx(-rb.origins[size_t(j * 3) + 0]).epsilon(1e-9));
    }
}

TEST_CASE("camera: corner pixel direction matches the pinhole formula") {
  CameraPose pose;
  pose.azimuth = 0;
  pose.elevation = 0;
  pose.fov = 0.6;
  pose.image_size = 8;
  RaySamples rs = camera_rays(pose, 2, 1.5, 3.9, 0, false);
  double th = std::tan(0.3);
  // frontal basis: right = +x, up = +y, forward = -z
  double ndc_x = (0.5 / 8.0) * 2.0 - 1.0;
  double ndc_y = 1.0 - (0.5 / 8.0) * 2.0;
  Vec3 expect = Vec3{ndc_x * th, ndc_y * th, -1.0}.normalized();
  CHECK(rs.dirs[0] == doctest::Approx(expect.x).epsilon(1e-6));
  CHECK(rs.dirs[1] == doctest::Approx(expect.y).epsilon(1e-6));
  CHECK(rs.dirs[2] == doctest::Approx(expect.z).epsilon(1e-6));
}

TEST_CASE("camera: depths strictly increasing with jitter, deterministic per seed") {
  CameraPose pose;
  pose.image_size = 4;
  RaySamples a = camera_rays(pose, 16, 1.5, 3.9, 42, true);
  RaySamples b = camera_rays(pose, 16, 1.5, 3.9, 42, true);
  CHECK(a.depths == b.depths);
  for (int64_t r = 0; r < a.ray_count(); ++r)
    for (int i = 0; i + 1 < 16; ++i)
      CHECK(a.depths[size_t(r * 16 + i)] < a.depths[size_t(r * 16 + i + 1)]);
}

TEST_CASE("sample_points: constant planes aggregate to their mean") {
  Rng rng(3);
  Decoder dec = Decoder::init(2, 4, 0.0, rng, Scalar::F32);
  TriPlane tp;
  tp.decoder = &dec;
  double vals[3] = {1.0, 2.0, 6.0};
  for (int p = 0; p < 3; ++p) tp.planes[size_t(p)] = Tensor::full({4, 4, 2}, vals[p]);
  auto f = sample_point(tp, {0.2, -0.3, 0.4});
  CHECK(f[0] == doctest::Approx(3.0).epsilon(1e-6));
  CHECK(f[1] == doctest::Approx(3.0).epsilon(1e-6));

  for (int p = 0; p < 3; ++p) tp.planes[size_t(p)] = Tensor::full({4, 4, 2}, 5.0);
  f = sample_point(tp, {0.9, 0.1, -0.7});
  CHECK(f[0] == doctest::Approx(5.0).epsilon(1e-6));
}

TEST_CASE("sample_points: equals the mean of three explicit bilinear lookups") {
  Rng rng(7);
  Decoder dec = Decoder::init(3, 4, 0.0, rng, Scalar::F32);
  TriPlane tp = random_triplane(5, 3, 11, &dec);
  Vec3 p{0.31, -0.52, 0.77};
  auto got = sample_point(tp, p);
  Tensor uv_xy = Tensor::from_vector({1, 2}, {p.x, p.y});
  Tensor uv_yz = Tensor::from_vector({1, 2}, {p.y, p.z});
  Tensor uv_zx = Tensor::from_vector({1, 2}, {p.z, p.x});
  Tensor fa = bilinear_sample(tp.planes[0], uv_xy);
  Tensor fb = bilinear_sample(tp.planes[1], uv_yz);
  Tensor fc = bilinear_sample(tp.planes[2], uv_zx);
  for (int c = 0; c < 3; ++c) {
    double expect = (fa.at(c) + fb.at(c) + fc.at(c)) / 3.0;
    CHECK(got[size_t(c)] == doctest::Approx(expect).epsilon(1e-6));
  }
}

TEST_CASE("volume_render: zero density yields the background and T=1") {
  auto scene = tpd::testing::make_sphere_scene({0, 0, 0}, 0.5, {0.2, 0.2, 0.2}, 16, 200.0);
  // empty: decoder with strongly negative raw density
  scene.decoder.w1 = Tensor::from_vector({1, 1}, {0.0});
  scene.decoder.b1 = Tensor::from_vector({1, 1}, {0.0});
  scene.decoder.b2 = Tensor::from_vector({1, 4}, {-40.0, 0.0, 0.0, 0.0});
  CameraPose pose;
  RenderOpts opts;
  opts.resolution = 8;
  opts.samples = 16;
  RenderResult rr = render(scene.tp, pose, opts);
  for (int64_t i = 0; i < rr.image.numel(); ++i) CHECK(rr.image.at(i) == doctest::Approx(1.0).epsilon(1e-6));
  for (int64_t i = 0; i < rr.tfinal.numel(); ++i) CHECK(rr.tfinal.at(i) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("volume_render: homogeneous slab matches exp(-sigma L) at S=64") {
  // constant density via zero planes and a bias-only decoder
  double sigma0 = 0.8;
  double raw = std::log(std::exp(sigma0) - 1.0);  // softplus inverse
  Rng rng(5);
  Decoder dec;
  dec.w1 = Tensor::from_vector({1, 1}, {0.0});
  dec.b1 = Tensor::from_vector({1, 1}, {0.0});
  dec.w2 = Tensor::from_vector({1, 4}, {0.0, 0.0, 0.0, 0.0});
  dec.b2 = Tensor::from_vector({1, 4}, {raw, 0.0, 0.0, 0.0});
  TriPlane tp;
  tp.decoder = &dec;
  for (int p = 0; p < 3; ++p) tp.planes[size_t(p)] = Tensor::zeros({4, 4, 1});
  CameraPose pose;
  RenderOpts opts;
  opts.resolution = 4;
  opts.samples = 64;
  RenderResult rr = render(tp, pose, opts);
  double L = opts.near_offset + opts.far_offset;
  double expect = std::exp(-sigma0 * L);
  for (int64_t i = 0; i < rr.tfinal.numel(); ++i)
    CHECK(rr.tfinal.at(i) == doctest::Approx(expect).epsilon(1e-3));
}

TEST_CASE("composite: a near-opaque sample dominates the pixel") {
  Tensor sigma = Tensor::from_vector({1, 3}, {0.0, 500.0, 0.0});
  Tensor rgb = Tensor::from_vector({1, 3, 3}, {0.9, 0.9, 0.9, 0.1, 0.6, 0.3, 0.5, 0.5, 0.5});
  std::vector<double> deltas = {0.1, 0.1, 0.1};
  Tensor out = composite(sigma, rgb, deltas, {1, 1, 1});
  CHECK(out.at(0) == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(out.at(1) == doctest::Approx(0.6).epsilon(1e-6));
  CHECK(out.at(2) == doctest::Approx(0.3).epsilon(1e-6));
  CHECK(out.at(3) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("compositing weights sum to one and transmittance is non-increasing") {
  Rng rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> sigma(32), deltas(32), weights;
    for (int i = 0; i < 32; ++i) {
      sigma[size_t(i)] = std::fabs(rng.gaussian()) * 3.0;
      deltas[size_t(i)] = 0.02 + rng.uniform() * 0.1;
    }
    double tfinal = 0;
    composite_weights(sigma, deltas, weights, tfinal);
    double sum = tfinal, trans = 1.0;
    for (size_t i = 0; i < weights.size(); ++i) {
      CHECK(weights[i] >= 0.0);
      CHECK(weights[i] <= 1.0);
      sum += weights[i];
      double next = trans * std::exp(-sigma[i] * deltas[i]);
      CHECK(next <= trans + 1e-12);
      trans = next;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("volume_render passes grad_check w.r.t. plane features at 1e-2") {
  Rng rng(23);
  Decoder dec = Decoder::init(2, 4, -0.5, rng, Scalar::F32);
  CameraPose pose;
  pose.image_size = 4;
  RaySamples rays = camera_rays(pose, 6, 1.5, 3.9, 3, false);
  auto f = [&](const std::vector<Tensor>& in) {
    TriPlane tp;
    tp.planes = {in[0], in[1], in[2]};
    tp.decoder = &dec;
    RenderResult rr = volume_render(tp, rays, {1, 1, 1});
    return sum_all(square(rr.image));
  };
  Rng prng(29);
  std::vector<Tensor> pts;
  for (int p = 0; p < 3; ++p) pts.push_back(mul_scalar(Tensor::randn({5, 5, 2}, prng), 0.6));
  auto rep = grad_check(f, pts, 1e-3, 1e-2);
  CHECK_MESSAGE(rep.pass, rep.worst);
}

TEST_CASE("render: deterministic bit-identical images for identical inputs") {
  auto scene = tpd::testing::make_sphere_scene({0.2, 0.0, 0.1}, 0.45, {0.3, 0.5, 0.8}, 48, 500.0);
  CameraPose pose;
  pose.azimuth = 0.3;
  pose.elevation = 0.15;
  RenderOpts opts;
  opts.resolution = 24;
  opts.samples = 24;
  opts.jitter = true;
  opts.seed = 9;
  Image a = render_image(scene.tp, pose, opts);
  Image b = render_image(scene.tp, pose, opts);
  CHECK(a.rgb == b.rgb);
}

TEST_CASE("render: centered opaque sphere silhouette matches projection within 1 px") {
  double R = 0.5, dist = 2.7, fov = 0.6;
  auto scene = tpd::testing::make_sphere_scene({0, 0, 0}, R, {0.2, 0.2, 0.2}, 96, 2000.0);
  CameraPose pose;
  pose.fov = fov;
  RenderOpts opts;
  opts.resolution = 96;
  opts.samples = 128;
  Image img = render_image(scene.tp, pose, opts);
  int64_t count = 0;
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      if (img.px(y, x)[0] < 0.6) ++count;  // object is dark on white
  double measured = std::sqrt(double(count) / M_PI);
  double fpx = (96.0 / 2.0) / std::tan(fov / 2.0);
  double expect = fpx * R / std::sqrt(dist * dist - R * R);
  CHECK(std::fabs(measured - expect) < 1.0);
}

TEST_CASE("render: azimuth equivariance on an offset sphere scene") {
  double delta = 20.0 * M_PI / 180.0;
  Vec3 c{0.3, 0.1, 0.05};
  auto scene_a = tpd::testing::make_sphere_scene(c, 0.4, {0.8, 0.3, 0.2}, 128, 300.0);
  auto scene_b = tpd::testing::make_sphere_scene(tpd::testing::rotate_y(c, delta), 0.4,
                                                 {0.8, 0.3, 0.2}, 128, 300.0);
  CameraPose pa, pb;
  pa.azimuth = 0.1;
  pb.azimuth = 0.1 + delta;
  RenderOpts opts;
  opts.resolution = 64;
  opts.samples = 96;
  Image ia = render_image(scene_a.tp, pa, opts);       // original scene, azimuth a
  Image ib = render_image(scene_b.tp, pb, opts);       // rotated scene, azimuth a + delta
  CHECK(mean_abs_diff(ia, ib) < 0.02);
}

TEST_CASE("png writer emits deterministic bytes; ppm fallback works") {
  auto scene = tpd::testing::make_sphere_scene({0, 0, 0}, 0.5, {0.9, 0.4, 0.1}, 32, 300.0);
  CameraPose pose;
  RenderOpts opts;
  opts.resolution = 16;
  opts.samples = 16;
  Image img = render_image(scene.tp, pose, opts);
  std::string p1 = "/tmp/tpd_test_a.png", p2 = "/tmp/tpd_test_b.png", p3 = "/tmp/tpd_test.ppm";
  write_image(img, p1);
  write_image(img, p2);
  write_image(img, p3);
  auto slurp = [](const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  std::string b1 = slurp(p1), b2 = slurp(p2), b3 = slurp(p3);
  CHECK(b1 == b2);
  CHECK(b1.size() > 50);
  CHECK(b1.substr(1, 3) == "PNG");
  CHECK(b3.substr(0, 2) == "P6");
  std::remove(p1.c_str());
  std::remove(p2.c_str());
  std::remove(p3.c_str());
}
