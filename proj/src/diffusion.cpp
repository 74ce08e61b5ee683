#include "diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>

namespace tpd::distill {

using namespace tpd::ad;

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
  if (T < 2) throw ConfigError("schedule: T must be >= 2");
  if (!(beta_start > 0 && beta_end < 1 && beta_start <= beta_end))
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.resize(size_t(T));
  s.alpha_bar_.resize(size_t(T) + 1);
  s.alpha_bar_[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    double b = beta_start + (beta_end - beta_start) * double(t - 1) / double(T - 1);
    s.beta[size_t(t - 1)] = b;
    s.alpha_bar_[size_t(t)] = s.alpha_bar_[size_t(t - 1)] * (1.0 - b);
  }
  return s;
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > T) throw ContractError("alpha_bar: t out of range");
  return alpha_bar_[size_t(t)];
}

double NoiseSchedule::weight(int t) const { return 1.0 - alpha_bar(t); }

Vec q_sample(const Vec& x0, int t, const Vec& eps, const NoiseSchedule& s) {
  if (x0.size() != eps.size()) throw ContractError("q_sample: shape mismatch");
  double ab = s.alpha_bar(t);
  double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Vec out(x0.size());
  for (size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

// ---------------------------------------------------------------------------
// analytic mixture teacher
// ---------------------------------------------------------------------------

std::vector<const MixtureComponent*> AnalyticMixtureTeacher::select(
    const text::Attributes* y) const {
  std::vector<const MixtureComponent*> out;
  for (const auto& [attrs, comps] : conditions) {
    if (y && !attrs.matches(*y)) continue;
    for (const auto& c : comps) out.push_back(&c);
  }
  return out;
}

const std::vector<MixtureComponent>& AnalyticMixtureTeacher::components_of(
    const text::Attributes& full) const {
  for (const auto& [attrs, comps] : conditions)
    if (attrs == full) return comps;
  throw ContractError("teacher: unknown condition key");
}

Vec AnalyticMixtureTeacher::posterior_mean(const Vec& x_t, const text::Attributes* y,
                                           int t) const {
  if (int(x_t.size()) != dim_) throw ContractError("teacher: dimension mismatch");
  auto comps = select(y);
  if (comps.empty()) throw ContractError("teacher: unknown condition key");
  double ab = alpha_bar_guard(t);
  double sab = std::sqrt(ab), one_m = 1.0 - ab;
  size_t n = x_t.size();
  std::vector<double> logr(comps.size());
  for (size_t k = 0; k < comps.size(); ++k) {
    const auto& c = *comps[k];
    double var = ab * c.sigma * c.sigma + one_m;
    double q = 0;
    for (size_t i = 0; i < n; ++i) q += sqr(x_t[i] - sab * c.mean[i]);
    logr[k] = std::log(std::max(c.weight, 1e-300)) - 0.5 * q / var -
              0.5 * double(n) * std::log(var);
  }
  double mx = *std::max_element(logr.begin(), logr.end());
  double z = 0;
  for (double& l : logr) {
    l = std::exp(l - mx);
    z += l;
  }
  Vec mean(n, 0.0);
  for (size_t k = 0; k < comps.size(); ++k) {
    const auto& c = *comps[k];
    double var = ab * c.sigma * c.sigma + one_m;
    double r = logr[k] / z;
    double a = sab * c.sigma * c.sigma / var;
    double b = one_m / var;
    for (size_t i = 0; i < n; ++i) mean[i] += r * (a * x_t[i] + b * c.mean[i]);
  }
  return mean;
}

double AnalyticMixtureTeacher::alpha_bar_guard(int t) const {
  double ab = sched.alpha_bar(t);
  if (!(ab < 1.0)) throw ContractError("teacher: epsilon undefined at t = 0");
  return ab;
}

Vec AnalyticMixtureTeacher::epsilon(const Vec& x_t, const text::Attributes* y, int t) const {
  ++calls_;
  Vec m = posterior_mean(x_t, y, t);
  double ab = sched.alpha_bar(t);
  double sab = std::sqrt(ab), inv = 1.0 / std::sqrt(1.0 - ab);
  Vec out(x_t.size());
  for (size_t i = 0; i < x_t.size(); ++i) out[i] = (x_t[i] - sab * m[i]) * inv;
  return out;
}

namespace {

const char* kB64 = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string b64_encode(const std::vector<float>& v) {
  const unsigned char* p = reinterpret_cast<const unsigned char*>(v.data());
  size_t n = v.size() * sizeof(float);
  std::string out;
  out.reserve((n + 2) / 3 * 4);
  for (size_t i = 0; i < n; i += 3) {
    uint32_t b = uint32_t(p[i]) << 16;
    if (i + 1 < n) b |= uint32_t(p[i + 1]) << 8;
    if (i + 2 < n) b |= uint32_t(p[i + 2]);
    out.push_back(kB64[(b >> 18) & 63]);
    out.push_back(kB64[(b >> 12) & 63]);
    out.push_back(i + 1 < n ? kB64[(b >> 6) & 63] : '=');
    out.push_back(i + 2 < n ? kB64[b & 63] : '=');
  }
  return out;
}

std::vector<float> b64_decode(const std::string& s) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::vector<unsigned char> bytes;
  bytes.reserve(s.size() / 4 * 3);
  uint32_t acc = 0;
  int bits = 0;
  for (char c : s) {
    int v = val(c);
    if (v < 0) continue;
    acc = (acc << 6) | uint32_t(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      bytes.push_back((unsigned char)((acc >> bits) & 0xff));
    }
  }
  std::vector<float> out(bytes.size() / sizeof(float));
  std::memcpy(out.data(), bytes.data(), out.size() * sizeof(float));
  return out;
}

nlohmann::json attrs_json(const text::Attributes& a, const text::Vocabulary& vocab) {
  nlohmann::json j;
  for (int s = 0; s < text::kNumSlots; ++s)
    if (a.specified(s)) j[text::kSlotNames[s]] = vocab.value_word(s, a.v[size_t(s)]);
  return j;
}

}  // namespace

void AnalyticMixtureTeacher::save_json(const std::string& path) const {
  nlohmann::json j;
  j["variant"] = "analytic_mixture";
  j["dim"] = dim_;
  j["schedule"] = {{"T", sched.T}, {"beta_start", sched.beta_start}, {"beta_end", sched.beta_end}};
  auto& conds = j["conditions"] = nlohmann::json::array();
  for (const auto& [attrs, comps] : conditions) {
    nlohmann::json c;
    nlohmann::json words = nlohmann::json::array();
    for (int s = 0; s < text::kNumSlots; ++s) words.push_back(attrs.v[size_t(s)]);
    c["attr_values"] = words;
    auto& cl = c["components"] = nlohmann::json::array();
    for (const auto& comp : comps) {
      std::vector<float> m(comp.mean.begin(), comp.mean.end());
      cl.push_back({{"weight", comp.weight}, {"sigma", comp.sigma}, {"mean_f32_b64", b64_encode(m)}});
    }
    conds.push_back(std::move(c));
  }
  std::ofstream f(path);
  if (!f) throw IoError("cannot write teacher json: " + path);
  f << j.dump() << "\n";
}

AnalyticMixtureTeacher AnalyticMixtureTeacher::load_json(const std::string& path,
                                                         const text::Vocabulary&) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open teacher json: " + path);
  nlohmann::json j;
  f >> j;
  if (j.value("variant", "") != "analytic_mixture")
    throw ConfigError("teacher json: unsupported variant");
  AnalyticMixtureTeacher t;
  t.dim_ = j["dim"].get<int>();
  t.sched = NoiseSchedule::linear(j["schedule"]["T"].get<int>(),
                                  j["schedule"]["beta_start"].get<double>(),
                                  j["schedule"]["beta_end"].get<double>());
  for (const auto& c : j["conditions"]) {
    text::Attributes a;
    auto vals = c["attr_values"].get<std::vector<int>>();
    for (int s = 0; s < text::kNumSlots; ++s) a.v[size_t(s)] = vals[size_t(s)];
    std::vector<MixtureComponent> comps;
    for (const auto& cj : c["components"]) {
      MixtureComponent mc;
      mc.weight = cj["weight"].get<double>();
      mc.sigma = cj["sigma"].get<double>();
      auto m = b64_decode(cj["mean_f32_b64"].get<std::string>());
      mc.mean.assign(m.begin(), m.end());
      comps.push_back(std::move(mc));
    }
    t.conditions.emplace_back(a, std::move(comps));
  }
  return t;
}

// ---------------------------------------------------------------------------
// learned denoiser
// ---------------------------------------------------------------------------

DenoiserNet DenoiserNet::init(int res, int text_dim, uint64_t seed, ad::Scalar dt) {
  DenoiserNet n;
  n.res = res;
  n.text_dim = text_dim;
  Rng rng(hash64(seed, 0xde0153ull));
  auto he = [&](const Shape& s, int64_t fan) {
    return mul_scalar(Tensor::randn(s, rng, dt), 1.0 / std::sqrt(double(fan))).detach();
  };
  n.cond_w = he({text_dim, 4}, text_dim);
  int cin = 3 + 4 + 2;  // image + condition + (t, sqrt(1-ab)) maps
  n.c1w = he({3, 3, cin, 16}, 9 * cin);
  n.c1b = Tensor::zeros({16}, dt);
  n.c2w = he({3, 3, 16, 16}, 9 * 16);
  n.c2b = Tensor::zeros({16}, dt);
  n.c3w = mul_scalar(Tensor::randn({3, 3, 16, 3}, rng, dt), 0.1 / std::sqrt(9.0 * 16)).detach();
  n.c3b = Tensor::zeros({3}, dt);
  return n;
}

void DenoiserNet::register_params(ParamStore& s) const {
  s.add("den.cond_w", cond_w);
  s.add("den.c1w", c1w);
  s.add("den.c1b", c1b);
  s.add("den.c2w", c2w);
  s.add("den.c2b", c2b);
  s.add("den.c3w", c3w);
  s.add("den.c3b", c3b);
}

Tensor DenoiserNet::forward(const Tensor& x_t, const Vec& eot, int t,
                            const NoiseSchedule& s) const {
  int64_t h = x_t.dim(0), w = x_t.dim(1);
  Scalar dt = x_t.dtype();
  Tensor cond;
  if (eot.empty()) {
    cond = Tensor::zeros({1, 4}, dt);
  } else {
    Tensor e = Tensor::from_vector({1, int64_t(eot.size())}, eot, dt);
    cond = matmul(e, cond_w);
  }
  Tensor cond_map = expand(expand(reshape(cond, {1, 1, 4}), 0, h), 1, w);
  double tf = double(t) / double(s.T);
  double nf = std::sqrt(1.0 - s.alpha_bar(t));
  Tensor tmap = concat({Tensor::full({h, w, 1}, tf, dt), Tensor::full({h, w, 1}, nf, dt)}, 2);
  Tensor in = concat({x_t, cond_map, tmap}, 2);
  Tensor y = lrelu(conv2d(in, c1w, c1b, 1, 1), 0.2);
  y = lrelu(conv2d(y, c2w, c2b, 1, 1), 0.2);
  return conv2d(y, c3w, c3b, 1, 1);
}

Vec LearnedDenoiserTeacher::epsilon(const Vec& x_t, const text::Attributes* y, int t) const {
  ++calls_;
  Vec eot;
  if (y) {
    if (!vocab) throw ContractError("learned teacher: vocabulary not set");
    eot = text::encode_text(text::canonical_caption(*y, *vocab), *vocab).eot;
  }
  Tensor img = Tensor::from_vector({net.res, net.res, 3}, x_t, net.c1w.dtype());
  Tensor out = net.forward(img, eot, t, sched);  // no tape active: frozen
  return out.to_vector();
}

void LearnedDenoiserTeacher::save_json(const std::string& path) const {
  nlohmann::json j;
  j["variant"] = "learned_denoiser";
  j["res"] = net.res;
  j["schedule"] = {{"T", sched.T}, {"beta_start", sched.beta_start}, {"beta_end", sched.beta_end}};
  nlohmann::json ps = nlohmann::json::object();
  for (const auto& item : params.items) {
    std::vector<float> v;
    for (double x : item.tensor.to_vector()) v.push_back(float(x));
    ps[item.name] = b64_encode(v);
  }
  j["params_f32_b64"] = ps;
  std::ofstream f(path);
  if (!f) throw IoError("cannot write teacher json: " + path);
  f << j.dump() << "\n";
}

DenoiserTrainStats train_denoiser(LearnedDenoiserTeacher& teacher,
                                  const std::vector<std::pair<Vec, text::Attributes>>& dataset,
                                  int steps, int batch, double lr, double cond_drop_prob,
                                  uint64_t seed) {
  if (dataset.empty()) throw ContractError("train_denoiser: empty dataset");
  if (teacher.params.items.empty()) teacher.net.register_params(teacher.params);
  DenoiserTrainStats stats;
  stats.steps = steps;
  if (steps == 0) return stats;
  Adam opt;
  opt.lr = lr;
  opt.reset(teacher.params);
  const NoiseSchedule& s = teacher.sched;
  int t_lo = s.t_min(0.02), t_hi = s.t_max(0.98);
  double running = 0;
  int n = teacher.net.res * teacher.net.res * 3;
  for (int step = 0; step < steps; ++step) {
    Rng rng = Rng::derive(seed, 0x7261696eull, uint64_t(step));
    ad::Tape tape;
    Tensor loss;
    for (int b = 0; b < batch; ++b) {
      const auto& [img, attrs] = dataset[size_t(rng.uniform_int(0, int64_t(dataset.size()) - 1))];
      if (int(img.size()) != n) throw ContractError("train_denoiser: image size mismatch");
      int t = int(rng.uniform_int(t_lo, t_hi));
      Vec eps(img.size());
      for (auto& e : eps) e = rng.gaussian();
      Vec xt = q_sample(img, t, eps, s);
      Vec eot;
      if (rng.uniform() >= cond_drop_prob)
        eot = text::encode_text(text::canonical_caption(attrs, *teacher.vocab), *teacher.vocab).eot;
      Tensor xt_t = Tensor::from_vector({teacher.net.res, teacher.net.res, 3}, xt,
                                        teacher.net.c1w.dtype());
      Tensor pred = teacher.net.forward(xt_t, eot, t, s);
      Tensor target = Tensor::from_vector(pred.shape(), eps, pred.dtype());
      Tensor l = mean_all(square(sub(pred, target)));
      loss = loss.defined() ? add(loss, l) : l;
    }
    loss = mul_scalar(loss, 1.0 / double(batch));
    double lv = loss.item();
    if (!std::isfinite(lv)) throw NumericError("train_denoiser: loss diverged (non-finite)");
    if (step == 0) stats.initial_loss = lv;
    running = step == 0 ? lv : 0.98 * running + 0.02 * lv;
    backward(loss);
    opt.step(teacher.params);
    teacher.params.zero_grads();
  }
  stats.final_loss = running;
  return stats;
}

// ---------------------------------------------------------------------------
// cfg / rescale / codec / sds
// ---------------------------------------------------------------------------

Vec cfg_combine(const Vec& eps_cond, const Vec& eps_uncond, double g) {
  if (eps_cond.size() != eps_uncond.size()) throw ContractError("cfg_combine: shape mismatch");
  if (g < 0) throw ContractError("cfg_combine: guidance must be >= 0");
  Vec out(eps_cond.size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = eps_uncond[i] + g * (eps_cond[i] - eps_uncond[i]);
  return out;
}

RescaleMode rescale_mode_from_string(const std::string& s) {
  if (s == "off") return RescaleMode::Off;
  if (s == "norm_match") return RescaleMode::NormMatch;
  throw ConfigError("rescale_mode must be 'off' or 'norm_match', got '" + s + "'");
}

namespace {
double rms(const Vec& v) {
  if (v.empty()) return 0;
  double acc = 0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc / double(v.size()));
}
}  // namespace

Vec rescale_residual(const Vec& residual, const Vec& eps, RescaleMode mode, double* factor) {
  if (factor) *factor = 1.0;
  if (mode == RescaleMode::Off) return residual;
  double re = rms(eps), rr = rms(residual);
  double scale = re / std::max(rr, re);
  if (!(scale <= 1.0)) scale = 1.0;  // only ever shrinks
  if (factor) *factor = scale;
  Vec out(residual.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = residual[i] * scale;
  return out;
}

LatentCodec LatentCodec::identity() { return LatentCodec{}; }

namespace {
// fixed rotation mixing RGB (orthogonal, det 1): 30 degrees about (1,1,1)/sqrt3
const double kMix[9] = {0.9106836025229591,  -0.24401693585629242, 0.3333333333333333,
                        0.3333333333333333,  0.9106836025229591,   -0.24401693585629242,
                        -0.24401693585629242, 0.3333333333333333,  0.9106836025229591};
}  // namespace

LatentCodec LatentCodec::channel_mix() {
  LatentCodec c;
  c.mode = Mode::ChannelMix;
  return c;
}

LatentCodec LatentCodec::conv1x1_identity(ad::Scalar dt) {
  LatentCodec c;
  c.mode = Mode::Conv1x1;
  c.conv_w = Tensor::from_vector({1, 1, 3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}, dt);
  return c;
}

Tensor LatentCodec::encode(const Tensor& image) const {
  switch (mode) {
    case Mode::Identity:
      return image;
    case Mode::ChannelMix: {
      int64_t h = image.dim(0), w = image.dim(1);
      Tensor flat = reshape(image, {h * w, 3});
      Tensor q = Tensor::from_vector({3, 3}, std::vector<double>(kMix, kMix + 9), image.dtype());
      return reshape(matmul(flat, q, false, true), {h, w, 3});
    }
    case Mode::Conv1x1:
      return conv2d(image, conv_w, Tensor(), 1, 0);
  }
  throw ContractError("codec: bad mode");
}

Vec LatentCodec::encode_plain(const Vec& image) const {
  if (mode == Mode::Identity) return image;
  Vec out(image.size());
  const double* q = kMix;
  if (mode == Mode::Conv1x1) {
    std::vector<double> w = conv_w.to_vector();  // (ci, co) row-major on 1x1
    for (size_t p = 0; p + 2 < image.size(); p += 3)
      for (int co = 0; co < 3; ++co)
        out[p + size_t(co)] = image[p] * w[size_t(co)] + image[p + 1] * w[size_t(3 + co)] +
                              image[p + 2] * w[size_t(6 + co)];
    return out;
  }
  for (size_t p = 0; p + 2 < image.size(); p += 3)
    for (int r = 0; r < 3; ++r)
      out[p + size_t(r)] = q[r * 3 + 0] * image[p] + q[r * 3 + 1] * image[p + 1] +
                           q[r * 3 + 2] * image[p + 2];
  return out;
}

Vec LatentCodec::decode_plain(const Vec& latent) const {
  if (mode == Mode::Identity) return latent;
  if (mode == Mode::Conv1x1)
    throw ContractError("codec: conv decoder not defined for the identity-initialized encoder");
  Vec out(latent.size());
  const double* q = kMix;  // orthogonal: inverse = transpose
  for (size_t p = 0; p + 2 < latent.size(); p += 3)
    for (int r = 0; r < 3; ++r)
      out[p + size_t(r)] = q[0 * 3 + r] * latent[p] + q[1 * 3 + r] * latent[p + 1] +
                           q[2 * 3 + r] * latent[p + 2];
  return out;
}

SdsSample sds_gradient(const Teacher& teacher, const NoiseSchedule& sched, const Vec& x_latent,
                       const text::Attributes* y, Rng& rng, double cfg_g, RescaleMode rescale,
                       int t_lo, int t_hi) {
  SdsSample s;
  s.t = int(rng.uniform_int(t_lo, t_hi));
  Vec eps(x_latent.size());
  for (auto& e : eps) e = rng.gaussian();
  Vec x_t = q_sample(x_latent, s.t, eps, sched);
  Vec eps_cond = teacher.epsilon(x_t, y, s.t);
  Vec eps_hat;
  if (cfg_g == 1.0) {
    eps_hat = eps_cond;
  } else {
    Vec eps_uncond = teacher.epsilon(x_t, nullptr, s.t);
    eps_hat = cfg_combine(eps_cond, eps_uncond, cfg_g);
  }
  Vec residual(eps_hat.size());
  for (size_t i = 0; i < residual.size(); ++i) residual[i] = eps_hat[i] - eps[i];
  s.rms_eps = rms(eps);
  s.rms_residual = rms(residual);
  residual = rescale_residual(residual, eps, rescale, &s.rescale_factor);
  s.weight = sched.weight(s.t);
  s.grad.resize(residual.size());
  for (size_t i = 0; i < residual.size(); ++i) {
    s.grad[i] = s.weight * residual[i];
    if (!std::isfinite(s.grad[i]))
      throw NumericError("sds_gradient: non-finite gradient at t=" + std::to_string(s.t) +
                         " rms_residual=" + std::to_string(s.rms_residual));
  }
  return s;
}

}  // namespace tpd::distill
