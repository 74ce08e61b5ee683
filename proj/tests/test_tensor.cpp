#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "tensor.hpp"

using namespace tpd;
using namespace tpd::ad;

namespace {

Tensor make_rand(const Shape& s, uint64_t seed, Scalar dt = Scalar::F32) {
  Rng rng(seed);
  return Tensor::randn(s, rng, dt);
}

}  // namespace

TEST_CASE("backward: d(sum(a*a))/da = 2a") {
  Tensor a = Tensor::from_vector({3}, {1, 2, 3});
  a.set_requires_grad(true);
  Tape tape;
  Tensor loss = sum_all(mul(a, a));
  backward(loss);
  auto g = a.grad().to_vector();
  CHECK(g[0] == doctest::Approx(2).epsilon(1e-6));
  CHECK(g[1] == doctest::Approx(4).epsilon(1e-6));
  CHECK(g[2] == doctest::Approx(6).epsilon(1e-6));
}

TEST_CASE("backward: addition of scalar zeros gives unit grads") {
  Tensor a = Tensor::from_vector({1}, {0.0});
  Tensor b = Tensor::from_vector({1}, {0.0});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Tape tape;
  Tensor c = add(a, b);
  backward(c);
  CHECK(a.grad().item() == doctest::Approx(1.0));
  CHECK(b.grad().item() == doctest::Approx(1.0));
}

TEST_CASE("backward: non-scalar loss is a contract violation") {
  Tensor a = make_rand({4}, 7);
  a.set_requires_grad(true);
  Tape tape;
  Tensor y = mul(a, a);
  CHECK_THROWS_AS(backward(y), ContractError);
}

TEST_CASE("backward: NaN diagnostic names the op") {
  Tensor a = make_rand({3}, 11);
  a.set_requires_grad(true);
  Tensor poison = Tensor::from_vector({3}, {1.0, std::nan(""), 1.0});
  Tape tape;
  Tensor loss = sum_all(mul(a, poison));
  try {
    backward(loss);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("mul") != std::string::npos);
  }
}

TEST_CASE("random 5-op composite matches finite differences (f32 @ 1e-3)") {
  Tensor w = make_rand({4, 5}, 21);
  Tensor b = make_rand({3, 5}, 22);
  auto f = [&](const std::vector<Tensor>& in) {
    Tensor h = matmul(in[0], w.astype(in[0].dtype()));
    h = add(h, b.astype(in[0].dtype()));
    h = softplus(h);
    h = mul(h, h);
    return sum_all(h);
  };
  auto rep = grad_check(f, {make_rand({3, 4}, 23)}, 1e-3, 1e-3);
  CHECK_MESSAGE(rep.pass, rep.worst);
}

TEST_CASE("grad_check: sum is exact") {
  auto f = [](const std::vector<Tensor>& in) { return sum_all(in[0]); };
  auto rep = grad_check(f, {make_rand({6}, 3)}, 1e-3, 1e-3);
  CHECK(rep.max_rel_err < 1e-9);
}

TEST_CASE("grad_check: softmax-then-dot passes at 1e-3") {
  Tensor v = make_rand({4}, 31);
  auto f = [&](const std::vector<Tensor>& in) {
    Tensor s = softmax_rows(in[0]);
    return sum_all(mul(s, v.astype(in[0].dtype())));
  };
  auto rep = grad_check(f, {make_rand({4}, 32)}, 1e-3, 1e-3);
  CHECK_MESSAGE(rep.pass, rep.worst);
}

TEST_CASE("primitive grad checks on random shapes, f32 and f64") {
  struct Case {
    const char* name;
    std::function<Tensor(const std::vector<Tensor>&)> f;
    std::vector<Shape> shapes;
  };
  std::vector<Case> cases = {
      {"add", [](const std::vector<Tensor>& in) { return sum_all(square(add(in[0], in[1]))); },
       {{3, 4}, {3, 4}}},
      {"mul", [](const std::vector<Tensor>& in) { return sum_all(mul(in[0], in[1])); },
       {{2, 5}, {2, 5}}},
      {"matmul",
       [](const std::vector<Tensor>& in) { return sum_all(square(matmul(in[0], in[1]))); },
       {{3, 4}, {4, 2}}},
      {"matmul_t",
       [](const std::vector<Tensor>& in) { return sum_all(matmul(in[0], in[1], true, true)); },
       {{4, 3}, {2, 4}}},
      {"conv2d",
       [](const std::vector<Tensor>& in) {
         return sum_all(square(conv2d(in[0], in[1], in[2], 1, 1)));
       },
       {{5, 5, 2}, {3, 3, 2, 3}, {3}}},
      {"conv2d_s2",
       [](const std::vector<Tensor>& in) {
         return sum_all(conv2d(in[0], in[1], Tensor(), 2, 1));
       },
       {{6, 6, 2}, {3, 3, 2, 2}}},
      {"upsample2x",
       [](const std::vector<Tensor>& in) { return sum_all(square(upsample2x(in[0]))); },
       {{3, 3, 2}}},
      {"reduce_sum",
       [](const std::vector<Tensor>& in) {
         return sum_all(square(reduce_sum(in[0], {0, 1}, true)));
       },
       {{3, 4, 2}}},
      {"expand",
       [](const std::vector<Tensor>& in) {
         Tensor e = expand(in[0], 1, 5);
         return sum_all(mul(e, e));
       },
       {{3, 1, 2}}},
      {"concat_slice",
       [](const std::vector<Tensor>& in) {
         Tensor c = concat({in[0], in[1]}, 2);
         return sum_all(square(slice(c, 2, 1, 3)));
       },
       {{2, 2, 2}, {2, 2, 2}}},
      {"lrelu", [](const std::vector<Tensor>& in) { return sum_all(lrelu(in[0], 0.2)); },
       {{4, 4}}},
      {"softplus", [](const std::vector<Tensor>& in) { return sum_all(square(softplus(in[0]))); },
       {{3, 3}}},
      {"sigmoid", [](const std::vector<Tensor>& in) { return sum_all(square(sigmoid(in[0]))); },
       {{7}}},
      {"tanh", [](const std::vector<Tensor>& in) { return sum_all(square(tanh_t(in[0]))); },
       {{6}}},
      {"rsqrt",
       [](const std::vector<Tensor>& in) {
         return sum_all(rsqrt(add_scalar(square(in[0]), 1.0), 1e-4));
       },
       {{5}}},
      {"softmax", [](const std::vector<Tensor>& in) { return sum_all(square(softmax_rows(in[0]))); },
       {{3, 5}}},
      {"attention",
       [](const std::vector<Tensor>& in) {
         return sum_all(square(attention(in[0], in[1], in[2], 0.5)));
       },
       {{3, 4}, {5, 4}, {5, 4}}},
      {"bilinear",
       [](const std::vector<Tensor>& in) {
         return sum_all(square(bilinear_sample(in[0], mul_scalar(tanh_t(in[1]), 0.9))));
       },
       {{4, 5, 2}, {6, 2}}},
  };
  for (auto& c : cases) {
    for (int trial = 0; trial < 3; ++trial) {
      {
        std::vector<Tensor> pts;
        for (size_t i = 0; i < c.shapes.size(); ++i)
          pts.push_back(make_rand(c.shapes[i], 100 + uint64_t(trial) * 17 + i, Scalar::F32));
        auto rep = grad_check(c.f, pts, 1e-3, 1e-3);
        CHECK_MESSAGE(rep.pass, c.name, " f32 trial ", trial, ": ", rep.worst);
      }
      {
        std::vector<Tensor> pts;
        for (size_t i = 0; i < c.shapes.size(); ++i)
          pts.push_back(make_rand(c.shapes[i], 100 + uint64_t(trial) * 17 + i, Scalar::F64));
        auto rep = grad_check(c.f, pts, 1e-5, 1e-6);
        CHECK_MESSAGE(rep.pass, c.name, " f64 trial ", trial, ": ", rep.worst);
      }
    }
  }
}

TEST_CASE("gated_residual: grads including beta/gamma, identity at zero gate") {
  Tensor v = make_rand({3, 3, 2}, 41);
  Tensor a = make_rand({3, 3, 2}, 42);
  Tensor beta = Tensor::from_vector({1}, {1.0});
  Tensor gamma = Tensor::from_vector({1}, {0.0});
  // exact bitwise identity at gamma = 0
  Tensor out = gated_residual(v, a, beta, gamma, true);
  CHECK(out.to_vector() == v.to_vector());

  auto f = [](const std::vector<Tensor>& in) {
    return sum_all(square(gated_residual(in[0], in[1], in[2], in[3], true)));
  };
  std::vector<Tensor> pts = {make_rand({2, 2, 2}, 43), make_rand({2, 2, 2}, 44),
                             Tensor::from_vector({1}, {0.8}), Tensor::from_vector({1}, {0.4})};
  auto rep = grad_check(f, pts, 1e-3, 1e-3);
  CHECK_MESSAGE(rep.pass, rep.worst);
}

TEST_CASE("bilinear_sample: exact node, center of four, manual 3x3 oracle") {
  Tensor plane = Tensor::from_vector({2, 2, 1}, {0, 0, 1, 1});
  // node (0,1) => value 0; align-corners grid: r=-1 -> row 0, c=+1 -> col 1
  Tensor uv = Tensor::from_vector({2, 2}, {-1, 1, 0, 0});
  Tensor out = bilinear_sample(plane, uv);
  CHECK(out.at(0) == doctest::Approx(0.0));
  CHECK(out.at(1) == doctest::Approx(0.5));  // center of {0,0,1,1}

  Rng rng(5);
  Tensor p3 = Tensor::randn({3, 3, 2}, rng);
  double r = 0.3, c = -0.45;
  Tensor q = Tensor::from_vector({1, 2}, {r, c});
  Tensor got = bilinear_sample(p3, q);
  double rr = (r + 1) * 0.5 * 2, cc = (c + 1) * 0.5 * 2;
  int r0 = int(rr), c0 = int(cc);
  double wr = rr - r0, wc = cc - c0;
  for (int ch = 0; ch < 2; ++ch) {
    auto at = [&](int i, int j) { return p3.at((i * 3 + j) * 2 + ch); };
    double expect = (1 - wr) * ((1 - wc) * at(r0, c0) + wc * at(r0, c0 + 1)) +
                    wr * ((1 - wc) * at(r0 + 1, c0) + wc * at(r0 + 1, c0 + 1));
    CHECK(got.at(ch) == doctest::Approx(expect).epsilon(1e-6));
  }
}

TEST_CASE("attention: single key, uniform softmax, 2x2 brute force") {
  Tensor q = make_rand({3, 4}, 51);
  Tensor k1 = make_rand({1, 4}, 52);
  Tensor v1 = make_rand({1, 4}, 53);
  Tensor out = attention(q, k1, v1, 0.5);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) CHECK(out.at(i * 4 + j) == doctest::Approx(v1.at(j)));

  Tensor qz = Tensor::zeros({2, 4});
  Tensor k = make_rand({5, 4}, 54);
  Tensor v = make_rand({5, 4}, 55);
  Tensor om = attention(qz, k, v, 1.0 / 2.0);
  for (int j = 0; j < 4; ++j) {
    double mean = 0;
    for (int i = 0; i < 5; ++i) mean += v.at(i * 4 + j);
    mean /= 5;
    CHECK(om.at(j) == doctest::Approx(mean).epsilon(1e-5));
  }

  // 2x2 brute force
  Tensor q2 = Tensor::from_vector({2, 2}, {0.3, -0.7, 1.1, 0.2});
  Tensor k2 = Tensor::from_vector({2, 2}, {0.5, 0.4, -0.2, 0.9});
  Tensor v2 = Tensor::from_vector({2, 2}, {1.0, 2.0, 3.0, 4.0});
  double scale = 1.0 / std::sqrt(2.0);
  Tensor got = attention(q2, k2, v2, scale);
  for (int i = 0; i < 2; ++i) {
    double s0 = (q2.at(i * 2) * k2.at(0) + q2.at(i * 2 + 1) * k2.at(1)) * scale;
    double s1 = (q2.at(i * 2) * k2.at(2) + q2.at(i * 2 + 1) * k2.at(3)) * scale;
    double m = std::max(s0, s1);
    double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
    double w0 = e0 / (e0 + e1), w1 = e1 / (e0 + e1);
    for (int j = 0; j < 2; ++j) {
      double expect = w0 * v2.at(j) + w1 * v2.at(2 + j);
      CHECK(got.at(i * 2 + j) == doctest::Approx(expect).epsilon(1e-6));
    }
  }

  CHECK_THROWS_AS(attention(q, Tensor::zeros({0, 4}), Tensor::zeros({0, 4}), 1.0),
                  ContractError);
}

TEST_CASE("softmax rows are nonnegative and sum to one") {
  Tensor x = make_rand({7, 9}, 61);
  Tensor s = softmax_rows(x);
  for (int r = 0; r < 7; ++r) {
    double sum = 0;
    for (int c = 0; c < 9; ++c) {
      double v = s.at(r * 9 + c);
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("forward evaluation is bit-deterministic") {
  auto run = [] {
    Tensor a = make_rand({8, 8}, 71);
    Tensor b = make_rand({8, 8}, 72);
    return sum_all(matmul(softplus(a), sigmoid(b))).item();
  };
  double x = run(), y = run();
  CHECK(std::memcmp(&x, &y, sizeof x) == 0);
}

TEST_CASE("concat shape algebra over channels") {
  Tensor a = Tensor::zeros({4, 5, 3});
  Tensor b = Tensor::zeros({4, 5, 2});
  Tensor c = concat({a, b}, 2);
  CHECK(c.shape() == Shape{4, 5, 5});
}

TEST_CASE("astype widens f32 to f64 losslessly") {
  Tensor a = make_rand({17}, 81, Scalar::F32);
  Tensor b = a.astype(Scalar::F64);
  for (int i = 0; i < 17; ++i) CHECK(double(float(a.at(i))) == b.at(i));
}

TEST_CASE("composite conserves weight mass") {
  Rng rng(91);
  int R = 4, S = 16;
  Tensor sig = softplus(Tensor::randn({R, S}, rng));
  Tensor rgb = sigmoid(Tensor::randn({R, S, 3}, rng));
  std::vector<double> deltas(size_t(R * S), 0.05);
  Tensor out = composite(sig, rgb, deltas, {1, 1, 1});
  // with white bg and colors in [0,1], composited pixel stays in [0,1]
  for (int r = 0; r < R; ++r) {
    for (int ch = 0; ch < 3; ++ch) {
      double v = out.at(r * 4 + ch);
      CHECK(v >= 0.0);
      CHECK(v <= 1.0 + 1e-6);
    }
    CHECK(out.at(r * 4 + 3) >= 0.0);
    CHECK(out.at(r * 4 + 3) <= 1.0);
  }
  auto f = [&deltas](const std::vector<Tensor>& in) {
    Tensor o = composite(softplus(in[0]), sigmoid(in[1]), deltas, {1, 1, 1});
    return sum_all(square(o));
  };
  auto rep = grad_check(f, {make_rand({4, 16}, 92), make_rand({4, 16, 3}, 93)}, 1e-3, 1e-3);
  CHECK_MESSAGE(rep.pass, rep.worst);
}
