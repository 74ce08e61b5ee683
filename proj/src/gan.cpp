#include "gan.hpp"

#include <cmath>

namespace tpd::gan {

using namespace tpd::ad;

Discriminator Discriminator::init(int res, uint64_t seed, ad::Scalar dt) {
  if (res < 8 || res % 8 != 0) throw ConfigError("discriminator: res must be a multiple of 8, >= 8");
  Discriminator d;
  d.res = res;
  Rng rng(hash64(seed, 0xd15cull));
  auto he = [&](const Shape& s, int64_t fan) {
    return mul_scalar(Tensor::randn(s, rng, dt), 1.0 / std::sqrt(double(fan))).detach();
  };
  d.c1w = he({3, 3, 3, 16}, 27);
  d.c1b = Tensor::zeros({16}, dt);
  d.c2w = he({3, 3, 16, 32}, 9 * 16);
  d.c2b = Tensor::zeros({32}, dt);
  d.c3w = he({3, 3, 32, 64}, 9 * 32);
  d.c3b = Tensor::zeros({64}, dt);
  int64_t flat = int64_t(res / 8) * (res / 8) * 64;
  d.fc_w = he({flat, 1}, flat);
  d.fc_b = Tensor::zeros({1}, dt);
  return d;
}

void Discriminator::register_params(ParamStore& s) const {
  s.add("disc.c1w", c1w, "disc");
  s.add("disc.c1b", c1b, "disc");
  s.add("disc.c2w", c2w, "disc");
  s.add("disc.c2b", c2b, "disc");
  s.add("disc.c3w", c3w, "disc");
  s.add("disc.c3b", c3b, "disc");
  s.add("disc.fc_w", fc_w, "disc");
  s.add("disc.fc_b", fc_b, "disc");
}

Tensor Discriminator::forward(const Tensor& image) const {
  if (image.ndim() != 3 || image.dim(0) != res || image.dim(1) != res || image.dim(2) != 3)
    throw ContractError("discriminator: image shape mismatch");
  Tensor y = lrelu(conv2d(image, c1w, c1b, 2, 1), 0.2);
  y = lrelu(conv2d(y, c2w, c2b, 2, 1), 0.2);
  y = lrelu(conv2d(y, c3w, c3b, 2, 1), 0.2);
  Tensor flat = reshape(y, {1, y.numel()});
  return add(matmul(flat, fc_w), fc_b);
}

Tensor d_loss(const Tensor& logit_real, const Tensor& logit_fake) {
  return add(softplus(neg(logit_real)), softplus(logit_fake));
}

Tensor g_loss(const Tensor& logit_fake) { return softplus(neg(logit_fake)); }

namespace {
double softplus_d(double x) {
  if (x > 30) return x;
  if (x < -30) return std::exp(x);
  return std::log1p(std::exp(x));
}
}  // namespace

double d_loss_value(double lr, double lf) { return softplus_d(-lr) + softplus_d(lf); }
double g_loss_value(double lf) { return softplus_d(-lf); }

double r1_penalty(const Discriminator& d, const std::vector<Image>& reals) {
  if (reals.empty()) throw ContractError("r1_penalty: empty batch");
  double acc = 0;
  for (const auto& img : reals) {
    Tensor x = img.to_tensor(d.c1w.dtype());
    x.set_requires_grad(true);
    ad::Tape tape;
    Tensor logit = d.forward(x);
    ad::backward(logit);
    Tensor g = x.grad();
    double n2 = 0;
    if (g.defined())
      for (int64_t i = 0; i < g.numel(); ++i) n2 += sqr(g.at(i));
    acc += n2;
  }
  return acc / double(reals.size());
}

Tensor r1_fd_surrogate(const Discriminator& d, const Tensor& real_image, Rng& rng, double delta) {
  Tensor u = Tensor::randn(real_image.shape(), rng, real_image.dtype());
  Tensor perturbed = add(real_image, mul_scalar(u, delta));
  Tensor diff = sub(d.forward(perturbed), d.forward(real_image));
  return mul_scalar(square(diff), 1.0 / (delta * delta));
}

}  // namespace tpd::gan
