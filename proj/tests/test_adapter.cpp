#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "adapter.hpp"
#include "text.hpp"

using namespace tpd;
using namespace tpd::ad;
using namespace tpd::adapter;

namespace {

std::array<Tensor, 3> random_planes(int h, int w, int c, uint64_t seed) {
  Rng rng(seed);
  return {Tensor::randn({h, w, c}, rng), Tensor::randn({h, w, c}, rng),
          Tensor::randn({h, w, c}, rng)};
}

Tensor random_words(int n, int d, uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn({n, d}, rng);
}

}  // namespace

TEST_CASE("axis_pool: ones, 2x2 row means, brute-force oracle") {
  Tensor ones = Tensor::full({3, 4, 2}, 1.0);
  Tensor p0 = axis_pool(ones, 0);
  CHECK(p0.shape() == Shape{1, 4, 2});
  for (int64_t i = 0; i < p0.numel(); ++i) CHECK(p0.at(i) == doctest::Approx(1.0));

  Tensor m = Tensor::from_vector({2, 2, 1}, {0, 2, 4, 6});
  Tensor cols = axis_pool(m, 1);  // mean over cols -> (2,1,1)
  CHECK(cols.at(0) == doctest::Approx(1.0));
  CHECK(cols.at(1) == doctest::Approx(5.0));

  Rng rng(3);
  Tensor r = Tensor::randn({3, 4, 2}, rng);
  Tensor pr = axis_pool(r, 0);
  for (int j = 0; j < 4; ++j)
    for (int c = 0; c < 2; ++c) {
      double acc = 0;
      for (int i = 0; i < 3; ++i) acc += r.at((i * 4 + j) * 2 + c);
      CHECK(pr.at((0 * 4 + j) * 2 + c) == doctest::Approx(acc / 3.0).epsilon(1e-6));
    }
}

TEST_CASE("build_aware_feature: constants, shape, explicit index oracle") {
  // constant planes k -> every output channel block is k
  std::array<Tensor, 3> consts = {Tensor::full({4, 4, 2}, 3.5), Tensor::full({4, 4, 2}, 3.5),
                                  Tensor::full({4, 4, 2}, 3.5)};
  auto aware_c = build_aware_feature(consts);
  for (int p = 0; p < 3; ++p) {
    CHECK(aware_c[size_t(p)].shape() == Shape{4, 4, 6});
    for (int64_t i = 0; i < aware_c[size_t(p)].numel(); ++i)
      CHECK(aware_c[size_t(p)].at(i) == doctest::Approx(3.5));
  }

  // random 2x2x1 planes vs index-by-index construction
  auto planes = random_planes(2, 2, 1, 7);
  auto aware = build_aware_feature(planes);
  auto P = [&](int p, int r, int c) { return planes[size_t(p)].at(r * 2 + c); };
  for (int i = 0; i < 3; ++i) {
    const Tensor& f3d = aware[size_t(i)];
    int bc = (i + 1) % 3, ca = (i + 2) % 3;
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c) {
        // block 0: pooled-over-rows of f_ca at column a=r
        double pool_a = (P(ca, 0, r) + P(ca, 1, r)) / 2.0;
        // block 1: the plane itself
        double mid = P(i, r, c);
        // block 2: pooled-over-cols of f_bc at row b=c
        double pool_b = (P(bc, c, 0) + P(bc, c, 1)) / 2.0;
        CHECK(f3d.at((r * 2 + c) * 3 + 0) == doctest::Approx(pool_a).epsilon(1e-6));
        CHECK(f3d.at((r * 2 + c) * 3 + 1) == doctest::Approx(mid).epsilon(1e-6));
        CHECK(f3d.at((r * 2 + c) * 3 + 2) == doctest::Approx(pool_b).epsilon(1e-6));
      }
  }
}

TEST_CASE("middle block of the aware feature equals the plane exactly") {
  auto planes = random_planes(5, 5, 3, 11);
  auto aware = build_aware_feature(planes);
  for (int p = 0; p < 3; ++p)
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 5; ++c)
        for (int ch = 0; ch < 3; ++ch)
          CHECK(aware[size_t(p)].at(((r * 5 + c) * 9) + 3 + ch) ==
                planes[size_t(p)].at((r * 5 + c) * 3 + ch));
}

TEST_CASE("expanded pooled blocks are constant along the broadcast axis") {
  auto planes = random_planes(4, 4, 2, 13);
  auto aware = build_aware_feature(planes);
  const Tensor& f = aware[0];  // channels [0..2) from f_ca, [4..6) from f_bc
  for (int c = 0; c < 4; ++c)
    for (int ch = 0; ch < 2; ++ch) {
      double v0 = f.at(((0 * 4 + c) * 6) + 4 + ch);
      for (int r = 1; r < 4; ++r) CHECK(f.at(((r * 4 + c) * 6) + 4 + ch) == v0);
    }
  for (int r = 0; r < 4; ++r)
    for (int ch = 0; ch < 2; ++ch) {
      double v0 = f.at(((r * 4 + 0) * 6) + 0 + ch);
      for (int c = 1; c < 4; ++c) CHECK(f.at(((r * 4 + c) * 6) + 0 + ch) == v0);
    }
}

TEST_CASE("tokenize is a bijection with 1x1 patches") {
  Rng rng(17);
  Tensor m = Tensor::randn({2, 2, 6}, rng);
  Tensor tok = tokenize_planes(m);
  CHECK(tok.shape() == Shape{4, 6});
  Tensor back = untokenize(tok, 2, 2);
  CHECK(back.to_vector() == m.to_vector());
  // token at (r,c)=(1,0) is that location's channel vector
  for (int ch = 0; ch < 6; ++ch) CHECK(tok.at(2 * 6 + ch) == m.at((1 * 2 + 0) * 6 + ch));
}

TEST_CASE("gated attention: zero gate identity (bitwise) and beta=0") {
  Rng rng(19);
  AdapterParams p = AdapterParams::init(2, 32, rng, Scalar::F32);
  auto planes = random_planes(3, 3, 2, 23);
  Tensor words = random_words(4, 32, 29);
  auto out = adapter_forward(planes, words, p);
  for (int i = 0; i < 3; ++i) CHECK(out[size_t(i)].to_vector() == planes[size_t(i)].to_vector());

  AdapterParams pz = p;
  pz.beta = Tensor::from_vector({1}, {0.0});
  pz.gamma = Tensor::from_vector({1}, {1.3});
  auto out2 = adapter_forward(planes, words, pz);
  for (int i = 0; i < 3; ++i) CHECK(out2[size_t(i)].to_vector() == planes[size_t(i)].to_vector());
}

TEST_CASE("one-token identity-projection case matches hand arithmetic") {
  // C = 1 so 3C = 3; one 1x1 plane, one word token of dim 3
  AdapterParams p;
  p.wq = Tensor::from_vector({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  p.wk = Tensor::from_vector({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  p.wv = Tensor::from_vector({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  p.wo = Tensor::from_vector({3, 1}, {1, 0, 0});
  p.beta = Tensor::from_vector({1}, {1.0});
  p.gamma = Tensor::from_vector({1}, {20.0});  // tanh ~ 1
  std::array<Tensor, 3> planes = {Tensor::from_vector({1, 1, 1}, {0.5}),
                                  Tensor::from_vector({1, 1, 1}, {-0.25}),
                                  Tensor::from_vector({1, 1, 1}, {0.125})};
  Tensor word = Tensor::from_vector({1, 3}, {2.0, 7.0, -3.0});
  auto out = adapter_forward(planes, word, p);
  // single word: attention output is the value row; wo picks its first coord
  CHECK(out[0].at(0) == doctest::Approx(0.5 + std::tanh(20.0) * 2.0).epsilon(1e-6));
  CHECK(out[1].at(0) == doctest::Approx(-0.25 + std::tanh(20.0) * 2.0).epsilon(1e-6));
}

TEST_CASE("cyclic relabeling permutes adapter outputs (bitwise)") {
  Rng rng(31);
  AdapterParams p = AdapterParams::init(2, 32, rng, Scalar::F32);
  p.gamma = Tensor::from_vector({1}, {0.7});
  auto planes = random_planes(4, 4, 2, 37);
  Tensor words = random_words(5, 32, 41);
  auto out = adapter_forward(planes, words, p);
  std::array<Tensor, 3> rolled = {planes[1], planes[2], planes[0]};
  auto out_rolled = adapter_forward(rolled, words, p);
  for (int i = 0; i < 3; ++i)
    CHECK(out_rolled[size_t(i)].to_vector() == out[size_t((i + 1) % 3)].to_vector());
}

TEST_CASE("adapter shape preservation and empty-word error") {
  Rng rng(43);
  AdapterParams p = AdapterParams::init(3, 32, rng, Scalar::F32);
  auto planes = random_planes(4, 4, 3, 47);
  Tensor words = random_words(2, 32, 53);
  auto out = adapter_forward(planes, words, p);
  for (int i = 0; i < 3; ++i) CHECK(out[size_t(i)].shape() == planes[size_t(i)].shape());
  CHECK_THROWS_AS(adapter_forward(planes, Tensor::zeros({0, 32}), p), ContractError);
}

TEST_CASE("adapter ops pass grad_check including beta and gamma") {
  Rng rng(59);
  AdapterParams p = AdapterParams::init(1, 8, rng, Scalar::F32);
  auto f = [&p](const std::vector<Tensor>& in) {
    AdapterParams q = p;
    q.beta = in[4];
    q.gamma = in[5];
    std::array<Tensor, 3> planes = {in[0], in[1], in[2]};
    auto out = adapter_forward(planes, in[3], q);
    return sum_all(add(square(out[0]), add(square(out[1]), square(out[2]))));
  };
  Rng prng(61);
  std::vector<Tensor> pts = {Tensor::randn({3, 3, 1}, prng), Tensor::randn({3, 3, 1}, prng),
                             Tensor::randn({3, 3, 1}, prng), Tensor::randn({4, 8}, prng),
                             Tensor::from_vector({1}, {0.9}), Tensor::from_vector({1}, {0.3})};
  auto rep = grad_check(f, pts, 1e-3, 1e-3);
  CHECK_MESSAGE(rep.pass, rep.worst);

  // max-pool variant still differentiates
  auto fmax = [&p](const std::vector<Tensor>& in) {
    AdapterOpts o;
    o.max_pool = true;
    std::array<Tensor, 3> planes = {in[0], in[1], in[2]};
    auto out = adapter_forward(planes, in[3], p, o);
    return sum_all(square(out[0]));
  };
  std::vector<Tensor> pts2 = {Tensor::randn({3, 3, 1}, prng), Tensor::randn({3, 3, 1}, prng),
                              Tensor::randn({3, 3, 1}, prng), Tensor::randn({4, 8}, prng)};
  auto rep2 = grad_check(fmax, pts2, 1e-3, 1e-3);
  CHECK_MESSAGE(rep2.pass, rep2.worst);
}
