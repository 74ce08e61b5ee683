#pragma once

#include <functional>

#include "diffusion.hpp"
#include "scene.hpp"

namespace tpd::metrics {

using tpd::Image;

// Renders a prompt at a pose with a seeded z; the metrics below are generic
// over how images are produced.
using GenerateFn =
    std::function<Image(const std::string& prompt, uint64_t z_seed, const tri::CameraPose& pose)>;

struct ProbeResult {
  bool empty = true;
  text::Attributes attrs;
  std::vector<double> features;  // 8 hue bins + aspect + area + marker = 11
  double fg_frac = 0, dark_frac = 0, gray_frac = 0;
};

// Region-statistics classifier, exact on analytically rendered corpus images:
// dominant foreground hue -> hair, silhouette aspect -> age, width -> gender,
// dark-pixel fraction -> eyewear, gray-pixel fraction -> expression.
class Probe {
 public:
  Probe(const text::Vocabulary& vocab, double radius, double fov);
  ProbeResult attribute_probe(const Image& img) const;
  std::vector<uint8_t> foreground_mask(const Image& img) const;
  const text::Vocabulary& vocab() const { return *vocab_; }

 private:
  const text::Vocabulary* vocab_;
  std::vector<double> hue_centers_;    // per hair value
  std::vector<double> aspect_edges_;   // between age values
  std::vector<double> width_edges_;    // between gender values (fraction of image)
};

std::array<tri::CameraPose, 3> eval_views(double radius, double fov, int image_size);

// Joint toy embedding: the probe's predicted attributes re-encoded through the
// vocabulary (canonical caption eot); prompts use their own eot.
std::vector<double> embed_image(const ProbeResult& pr, const text::Vocabulary& vocab);
double cosine(const std::vector<double>& a, const std::vector<double>& b);

// Mean cosine(image embedding, prompt eot) over the three fixed views.
double msc_score(const GenerateFn& gen, const std::string& prompt, uint64_t z_seed,
                 const std::array<tri::CameraPose, 3>& views, const Probe& probe);

// Mean pairwise per-pixel L2 over foreground unions, fixed prompt and pose,
// z varying; order-invariant.
double diversity_score(const GenerateFn& gen, const std::string& prompt, int n_z,
                       const tri::CameraPose& pose, const Probe& probe, uint64_t z_seed_base = 0);
double diversity_of_images(const std::vector<Image>& imgs, const Probe& probe);

// Fraction of mixture components with >= 1 sample within 2 sigma_k of mu_k
// (per-element RMS distance).
double mode_coverage(const std::vector<distill::Vec>& samples,
                     const std::vector<distill::MixtureComponent>& comps);

// Frechet distance between Gaussian fits of probe feature vectors.
double fid_analog(const std::vector<std::vector<double>>& feats_a,
                  const std::vector<std::vector<double>>& feats_b, double eps_reg = 1e-6);

// Retrieval precision: rank the true caption among candidates (true + 15
// distractor captions from other attribute combinations) by embedding
// similarity; returns the top-1 rate.
double rp_analog(const GenerateFn& gen, const data::Corpus& corpus, const Probe& probe,
                 int max_scenes, int n_distractors, uint64_t seed,
                 const tri::CameraPose& eval_pose);

struct MixStep {
  std::string prompt;
  text::Attributes target;   // slots mentioned so far
  text::Attributes probed;
  int satisfied = 0, mentioned = 0;
};
struct MixReport {
  std::vector<MixStep> steps;
  bool monotone = true;
};

MixReport prompt_mix_eval(const GenerateFn& gen, const std::string& base_prompt,
                          const std::vector<std::string>& additions, const Probe& probe,
                          uint64_t z_seed, const tri::CameraPose& pose);

// Differentiable single-view semantic loss (the "w/ CLIP" ablation): soft
// foreground statistics classified against the hue/size bindings, embedded
// through the vocabulary and compared to the prompt's mean word embedding.
ad::Tensor clip_style_loss(const ad::Tensor& image, const text::TokenSet& tokens,
                           const Probe& probe);

}  // namespace tpd::metrics
