#pragma once

#include "checkpoint.hpp"
#include "config.hpp"
#include "generator.hpp"
#include "metrics.hpp"

namespace tpd::harness {

using ad::Tensor;

// The assembled text-to-tri-plane pipeline: vocabulary + generator (with
// semantic mapper, adapters, decoder) + rendering defaults from the config.
// Copies share parameter storage; build independent models via init().
struct Model {
  Config cfg;
  text::Vocabulary vocab;
  gen::Generator generator;
  ParamStore params;

  static Model init(const Config& cfg);
  static Model from_checkpoint(const Checkpoint& ck, const std::string& precision_override = "");

  tri::RenderOpts render_opts(int res, uint64_t ray_seed, bool jitter) const;

  // Single forward pass: encode -> map_style -> map_semantics -> synthesize ->
  // render. Performs zero parameter updates.
  Image generate_image(const std::string& prompt, uint64_t z_seed, const tri::CameraPose& pose,
                       int res) const;
  Image generate_from_w(const Tensor& w, const std::string& prompt, const tri::CameraPose& pose,
                        int res) const;
  metrics::GenerateFn generate_fn(int res) const;

  // Recorded forward for training (call under an active Tape).
  Tensor forward_image(const Tensor& z, const text::TokenSet& tokens, const tri::CameraPose& pose,
                       int res, uint64_t ray_seed, bool jitter) const;

  Checkpoint to_checkpoint(uint64_t step) const;
};

}  // namespace tpd::harness
