#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "generator.hpp"

using namespace tpd;
using namespace tpd::ad;
using namespace tpd::gen;

namespace {

GeneratorConfig small_cfg() {
  GeneratorConfig c;
  c.plane_res = 16;
  c.plane_channels = 4;
  c.z_dim = 8;
  c.w_dim = 16;
  c.text_dim = 32;
  c.adapter_count = 2;
  c.decoder_hidden = 8;
  return c;
}

Tensor rand_words(int n, uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn({n, 32}, rng);
}

}  // namespace

TEST_CASE("map_style: bias value at z=0, determinism, z sensitivity") {
  Generator g = Generator::init(small_cfg(), 5, Scalar::F32);
  // zero first-layer bias so w(0) = lrelu(b2)
  g.map_b1 = Tensor::zeros(g.map_b1.shape());
  Rng rng(7);
  g.map_b2 = Tensor::randn(g.map_b2.shape(), rng);
  Tensor w0 = g.map_style(Tensor::zeros({1, 8}));
  for (int64_t i = 0; i < w0.numel(); ++i) {
    double b = g.map_b2.at(i);
    CHECK(w0.at(i) == doctest::Approx(b > 0 ? b : 0.2 * b).epsilon(1e-6));
  }

  Tensor z = g.sample_z(3);
  CHECK(g.map_style(z).to_vector() == g.map_style(z).to_vector());

  Tensor z2 = g.sample_z(4);
  double d2 = 0;
  Tensor wa = g.map_style(z), wb = g.map_style(z2);
  for (int64_t i = 0; i < wa.numel(); ++i) d2 += sqr(wa.at(i) - wb.at(i));
  CHECK(d2 > 1e-12);
}

TEST_CASE("modulated_conv: all-ones style equals demodulated plain conv") {
  Rng rng(11);
  Tensor x = Tensor::randn({5, 5, 3}, rng);
  Tensor k = Tensor::randn({3, 3, 3, 2}, rng);
  Tensor bias = Tensor::zeros({2});
  Tensor ones = Tensor::full({1, 3}, 1.0);
  Tensor got = modulated_conv(x, k, bias, ones);
  // expected: kernel normalized per output channel, then plain conv
  std::vector<double> kn = k.to_vector();
  for (int co = 0; co < 2; ++co) {
    double s = 0;
    for (size_t i = size_t(co); i < kn.size(); i += 2) s += kn[i] * kn[i];
    double d = 1.0 / std::sqrt(s + 1e-8);
    for (size_t i = size_t(co); i < kn.size(); i += 2) kn[i] *= d;
  }
  Tensor kd = Tensor::from_vector({3, 3, 3, 2}, kn);
  Tensor expect = conv2d(x, kd, bias, 1, 1);
  for (int64_t i = 0; i < got.numel(); ++i)
    CHECK(got.at(i) == doctest::Approx(expect.at(i)).epsilon(1e-5));
}

TEST_CASE("modulated_conv: invariant to uniform positive style scaling") {
  Rng rng(13);
  Tensor x = Tensor::randn({4, 4, 3}, rng);
  Tensor k = Tensor::randn({3, 3, 3, 3}, rng);
  Tensor bias = Tensor::randn({3}, rng);
  Tensor s1 = Tensor::full({1, 3}, 1.0);
  Tensor s2 = Tensor::full({1, 3}, 2.0);
  Tensor a = modulated_conv(x, k, bias, s1);
  Tensor b = modulated_conv(x, k, bias, s2);
  for (int64_t i = 0; i < a.numel(); ++i)
    CHECK(a.at(i) == doctest::Approx(b.at(i)).epsilon(1e-5));
}

TEST_CASE("modulated_conv: 1x1 case matches explicit scale-demodulate arithmetic") {
  Rng rng(17);
  Tensor x = Tensor::randn({3, 3, 2}, rng);
  Tensor k = Tensor::randn({1, 1, 2, 2}, rng);
  Tensor style = Tensor::from_vector({1, 2}, {0.7, -1.3});
  Tensor got = modulated_conv(x, k, Tensor::zeros({2}), style);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      for (int co = 0; co < 2; ++co) {
        double w0 = k.at(0 * 2 + co) * 0.7;
        double w1 = k.at(1 * 2 + co) * -1.3;
        double d = 1.0 / std::sqrt(w0 * w0 + w1 * w1 + 1e-8);
        double expect = x.at((r * 3 + c) * 2) * w0 * d + x.at((r * 3 + c) * 2 + 1) * w1 * d;
        CHECK(got.at((r * 3 + c) * 2 + co) == doctest::Approx(expect).epsilon(2e-5));
      }
}

TEST_CASE("modulated_conv passes grad_check") {
  auto f = [](const std::vector<Tensor>& in) {
    return sum_all(square(modulated_conv(in[0], in[1], in[2], in[3])));
  };
  Rng rng(19);
  std::vector<Tensor> pts = {Tensor::randn({4, 4, 2}, rng), Tensor::randn({3, 3, 2, 2}, rng),
                             Tensor::randn({2}, rng), Tensor::randn({1, 2}, rng)};
  auto rep = grad_check(f, pts, 1e-3, 1e-3);
  CHECK_MESSAGE(rep.pass, rep.worst);
}

TEST_CASE("synthesize: zero-init adapters are bitwise inert; deterministic") {
  Generator g = Generator::init(small_cfg(), 23, Scalar::F32);
  Rng rng(29);
  Tensor w = Tensor::randn({1, 16}, rng);
  Tensor eot = Tensor::randn({1, 32}, rng);
  Tensor wt = g.map_semantics(w, eot, true);
  Tensor words = rand_words(5, 31);

  auto tp_on = g.synthesize(wt, words, true);
  auto tp_off = g.synthesize(wt, words, false);
  for (int p = 0; p < 3; ++p)
    CHECK(tp_on.planes[size_t(p)].to_vector() == tp_off.planes[size_t(p)].to_vector());

  auto tp2 = g.synthesize(wt, words, true);
  for (int p = 0; p < 3; ++p)
    CHECK(tp_on.planes[size_t(p)].to_vector() == tp2.planes[size_t(p)].to_vector());
  CHECK(tp_on.planes[0].shape() == ad::Shape{16, 16, 4});
}

TEST_CASE("synthesize: nonzero gates make word tokens matter") {
  GeneratorConfig cfg = small_cfg();
  Generator g = Generator::init(cfg, 37, Scalar::F32);
  for (auto& a : g.adapters) a.gamma = Tensor::from_vector({1}, {0.8});
  Rng rng(41);
  Tensor w = Tensor::randn({1, 16}, rng);
  Tensor eot = Tensor::randn({1, 32}, rng);
  Tensor wt = g.map_semantics(w, eot, true);
  Tensor words = rand_words(5, 43);
  Tensor words2 = words.clone();
  words2.set(3, words2.at(3) + 0.5);  // perturb one word token
  auto a = g.synthesize(wt, words, true);
  auto b = g.synthesize(wt, words2, true);
  double maxdiff = 0;
  for (int p = 0; p < 3; ++p)
    for (int64_t i = 0; i < a.planes[size_t(p)].numel(); ++i)
      maxdiff = std::max(maxdiff,
                         std::fabs(a.planes[size_t(p)].at(i) - b.planes[size_t(p)].at(i)));
  CHECK(maxdiff > 0.0);
}

TEST_CASE("parameter registry covers every tensor and checksums move on edit") {
  Generator g = Generator::init(small_cfg(), 47, Scalar::F32);
  ParamStore store;
  g.register_params(store);
  CHECK(store.items.size() > 20);
  uint64_t c0 = store.value_checksum();
  store.items[5].tensor.set(0, store.items[5].tensor.at(0) + 1.0);
  CHECK(store.value_checksum() != c0);
}
