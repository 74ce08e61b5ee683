#pragma once

#include "gan.hpp"
#include "model.hpp"

namespace tpd::distill {

// Distribution samplers for D-SDS. Per batch item the draw order from the
// item RNG stream Rng::derive(base_seed, step, item) is fixed: z, prompt,
// pose, ray seed, then t and the noise inside sds_gradient. Singleton
// samplers therefore reproduce single-point SDS bit-for-bit.
struct DsdsSamplers {
  std::function<ad::Tensor(Rng&)> sample_z;
  std::function<std::string(Rng&)> sample_prompt;
  std::function<tri::CameraPose(Rng&)> sample_pose;
};

struct DsdsOpts {
  int batch = 1;
  int render_res = 32;
  double lambda = 1.0;
  double cfg_g = 1.0;
  RescaleMode rescale = RescaleMode::Off;
  int t_lo = 20, t_hi = 980;
  bool jitter_rays = false;
  uint64_t base_seed = 0;
  const LatentCodec* codec = nullptr;  // identity when null
};

struct DsdsDiag {
  double mean_sds_rms = 0;
  double mean_loss = 0;
  std::vector<int> ts;
};

// Samples a batch {(z_i, y_i, pose_i)}, renders, injects the SDS gradient at
// each image (or its codec latent), backpropagates through renderer/
// generator/adapters/mapping and applies one optimizer step.
DsdsDiag dsds_step(harness::Model& model, const DsdsSamplers& samplers, const Teacher& teacher,
                   const NoiseSchedule& sched, Adam& opt, const DsdsOpts& opts,
                   int64_t step_index);

}  // namespace tpd::distill

namespace tpd::harness {

struct TrainSchedule {
  int stage1_steps = 0;  // GAN only
  int stage2_steps = 0;  // GAN regularization + D-SDS
  double lambda_sds = 0.1;
  int grad_accum = 1;
};

struct TrainOutputs {
  std::string checkpoint_path;
  std::string metrics_path;
  int64_t teacher_calls_stage1 = 0;
  int64_t steps = 0;
};

// Two-stage training per the schedule; writes the corpus, teacher spec,
// metrics JSON-lines and the final checkpoint into out_dir.
TrainOutputs two_stage_train(Model& model, const std::string& out_dir);

}  // namespace tpd::harness
