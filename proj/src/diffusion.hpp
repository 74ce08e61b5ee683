#pragma once

#include <atomic>
#include <memory>

#include "params.hpp"
#include "text.hpp"

namespace tpd::distill {

using ad::Tensor;
using Vec = std::vector<double>;

struct NoiseSchedule {
  int T = 1000;
  double beta_start = 1e-4, beta_end = 0.02;
  std::vector<double> beta;       // beta[t-1] for t in 1..T
  std::vector<double> alpha_bar_; // [0..T], alpha_bar_[0] = 1

  static NoiseSchedule linear(int T, double beta_start, double beta_end);
  double alpha_bar(int t) const;       // errors when t outside [0, T]
  double weight(int t) const;          // w(t) = 1 - alpha_bar(t)
  int t_min(double frac) const { return std::max(1, int(frac * T)); }
  int t_max(double frac) const { return std::min(T, int(frac * T)); }
};

Vec q_sample(const Vec& x0, int t, const Vec& eps, const NoiseSchedule& s);

// Frozen score oracle epsilon_phi(x_t; y, t). y may be partial (conditioning
// marginalizes over consistent components) or null for unconditional.
struct Teacher {
  virtual ~Teacher() = default;
  virtual Vec epsilon(const Vec& x_t, const text::Attributes* y, int t) const = 0;
  virtual int dim() const = 0;
  virtual void save_json(const std::string& path) const = 0;
  int64_t call_count() const { return calls_.load(); }

 protected:
  mutable std::atomic<int64_t> calls_{0};
};

struct MixtureComponent {
  Vec mean;
  double weight = 1.0;
  double sigma = 0.0;
};

// Gaussian-mixture image prior with the exact Bayes-optimal eps-prediction:
// eps = (x_t - sqrt(ab) E[x0 | x_t, y]) / sqrt(1 - ab).
struct AnalyticMixtureTeacher : Teacher {
  NoiseSchedule sched;
  int dim_ = 0;
  std::vector<std::pair<text::Attributes, std::vector<MixtureComponent>>> conditions;

  Vec epsilon(const Vec& x_t, const text::Attributes* y, int t) const override;
  Vec posterior_mean(const Vec& x_t, const text::Attributes* y, int t) const;
  int dim() const override { return dim_; }
  void save_json(const std::string& path) const override;
  static AnalyticMixtureTeacher load_json(const std::string& path,
                                          const text::Vocabulary& vocab);
  const std::vector<MixtureComponent>& components_of(const text::Attributes& full) const;
  // components consistent with the (possibly partial / null) condition
  std::vector<const MixtureComponent*> select(const text::Attributes* y) const;

 private:
  double alpha_bar_guard(int t) const;
};

// Tiny conditional conv denoiser; the toy stand-in for a learned teacher.
struct DenoiserNet {
  int res = 0, text_dim = 0;
  Tensor cond_w;                 // (text_dim, 4): projects eot to 4 channels
  Tensor c1w, c1b, c2w, c2b, c3w, c3b;

  static DenoiserNet init(int res, int text_dim, uint64_t seed, ad::Scalar dt);
  void register_params(ParamStore& store) const;
  // x_t: (H,W,3) tensor; eot may be empty for unconditional
  Tensor forward(const Tensor& x_t, const Vec& eot, int t, const NoiseSchedule& s) const;
};

struct LearnedDenoiserTeacher : Teacher {
  NoiseSchedule sched;
  DenoiserNet net;
  const text::Vocabulary* vocab = nullptr;
  ParamStore params;

  Vec epsilon(const Vec& x_t, const text::Attributes* y, int t) const override;
  int dim() const override { return net.res * net.res * 3; }
  void save_json(const std::string& path) const override;
};

struct DenoiserTrainStats {
  double initial_loss = 0, final_loss = 0;
  int64_t steps = 0;
};

// Minimizes E || eps_phi(x_t; y, t) - eps ||^2 over (image, attrs) pairs;
// cond_drop_prob trains the unconditional branch. Returns with the teacher
// frozen. Throws NumericError if the loss goes non-finite.
DenoiserTrainStats train_denoiser(LearnedDenoiserTeacher& teacher,
                                  const std::vector<std::pair<Vec, text::Attributes>>& dataset,
                                  int steps, int batch, double lr, double cond_drop_prob,
                                  uint64_t seed);

Vec cfg_combine(const Vec& eps_cond, const Vec& eps_uncond, double g);

enum class RescaleMode { Off, NormMatch };
RescaleMode rescale_mode_from_string(const std::string& s);
// norm_match: scales the residual so its RMS never exceeds the RMS of eps.
Vec rescale_residual(const Vec& residual, const Vec& eps, RescaleMode mode,
                     double* factor = nullptr);

// Optional latent codec (Auto-Encoder analog). Identity by default; the
// channel-mix variant applies a fixed orthogonal RGB rotation (its decoder is
// the exact inverse); conv1x1 is a learnable identity-initialized encoder.
struct LatentCodec {
  enum class Mode { Identity, ChannelMix, Conv1x1 };
  Mode mode = Mode::Identity;
  Tensor conv_w;  // (1,1,3,3) for Conv1x1

  static LatentCodec identity();
  static LatentCodec channel_mix();
  static LatentCodec conv1x1_identity(ad::Scalar dt);
  Tensor encode(const Tensor& image) const;  // differentiable
  Vec encode_plain(const Vec& image) const;
  Vec decode_plain(const Vec& latent) const;
};

struct SdsSample {
  int t = 0;
  double rms_residual = 0, rms_eps = 0, rescale_factor = 1.0, weight = 0;
  Vec grad;  // d/dx' of the SDS objective, to be injected as a custom adjoint
};

// Computes w(t) * rescale(eps_hat - eps) at x' = encode(x). No gradient flows
// into the teacher; chaining into d/dtheta happens by injecting grad at the
// recorded x' (inner(x', const grad)).
SdsSample sds_gradient(const Teacher& teacher, const NoiseSchedule& sched, const Vec& x_latent,
                       const text::Attributes* y, Rng& rng, double cfg_g, RescaleMode rescale,
                       int t_lo, int t_hi);

}  // namespace tpd::distill
