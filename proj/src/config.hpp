#pragma once

#include <string>

#include "tensor.hpp"

namespace tpd::harness {

// Flat key=value configuration; unknown keys are rejected and every value is
// validated at load. Checkpoints embed the canonical serialization.
struct Config {
  // architecture
  int plane_res = 64;
  int plane_channels = 16;
  int z_dim = 64;
  int w_dim = 64;
  int text_dim = 32;
  int max_words = 12;
  int adapter_count = 4;
  int decoder_hidden = 32;
  double density_bias = -1.0;
  // rendering
  int train_render_res = 64;
  int eval_render_res = 64;
  int ray_samples = 48;
  double radius = 2.7;
  double fov = 0.6;
  double near_offset = 1.2;
  double far_offset = 1.2;
  // diffusion / teacher
  int schedule_T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  double t_min_frac = 0.02;
  double t_max_frac = 0.98;
  double cfg_g = 3.0;
  std::string rescale_mode = "norm_match";  // off | norm_match
  std::string teacher = "analytic";         // analytic | learned
  double teacher_sigma = 0.08;
  int teacher_components = 3;
  int denoiser_steps = 600;
  std::string codec = "identity";  // identity | channel_mix
  // training
  int stage1_steps = 0;
  int stage2_steps = 0;
  int batch_size = 4;
  int grad_accum = 1;
  double lambda_sds = 0.1;
  double gan_weight = 1.0;
  double lr_g = 0.002;
  double lr_d = 0.002;
  double adam_beta1 = 0.0;
  double adam_beta2 = 0.99;
  double adapter_lr_mul = 1.0;
  double mapping_lr_mul = 0.01;
  int r1_every = 16;
  double r1_gamma = 1.0;
  uint64_t seed = 1;
  int corpus_n = 96;
  uint64_t corpus_seed = 7;
  std::string corpus_manifest;  // reuse an existing corpus instead of building
  std::string vocab_file;
  int corpus_image_res = 64;
  int snapshot_every = 50;
  double partial_prompt_prob = 0.0;
  std::string dsds_pose = "frontal";  // frontal | orbit
  // ablation / freeze flags
  bool freeze_g = false;
  bool freeze_d = false;
  bool no_dsds = false;
  bool clip_style_loss = false;
  bool global_only = false;
  bool local_only = false;
  bool no_gate = false;
  bool no_3d_aware = false;
  bool adapter_max_pool = false;
  std::string precision = "f32";  // f32 | f64
  // evaluation
  int eval_scenes = 32;
  int diversity_samples = 6;

  static Config parse_file(const std::string& path);
  static Config parse_text(const std::string& text);
  std::string to_text() const;  // canonical, fixed key order
  void validate() const;
  ad::Scalar scalar() const;
};

}  // namespace tpd::harness
