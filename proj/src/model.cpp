#include "model.hpp"

namespace tpd::harness {

using namespace tpd::ad;

namespace {

gen::GeneratorConfig gen_config(const Config& c) {
  gen::GeneratorConfig g;
  g.plane_res = c.plane_res;
  g.plane_channels = c.plane_channels;
  g.z_dim = c.z_dim;
  g.w_dim = c.w_dim;
  g.text_dim = c.text_dim;
  g.adapter_count = c.adapter_count;
  g.decoder_hidden = c.decoder_hidden;
  g.density_bias = c.density_bias;
  g.no_gate = c.no_gate;
  g.no_3d_aware = c.no_3d_aware;
  g.adapter_max_pool = c.adapter_max_pool;
  return g;
}

text::Vocabulary make_vocab(const Config& c) {
  text::Vocabulary v =
      c.vocab_file.empty() ? text::Vocabulary::builtin() : text::Vocabulary::load_json(c.vocab_file);
  if (v.text_dim != c.text_dim)
    throw ConfigError("vocabulary text_dim does not match config text_dim");
  v.max_words = c.max_words;
  return v;
}

}  // namespace

Model Model::init(const Config& cfg) {
  cfg.validate();
  Model m{cfg, make_vocab(cfg), gen::Generator::init(gen_config(cfg), cfg.seed, cfg.scalar()), {}};
  m.generator.register_params(m.params);
  return m;
}

Model Model::from_checkpoint(const Checkpoint& ck, const std::string& precision_override) {
  Config cfg = Config::parse_text(ck.config_text);
  if (!precision_override.empty()) cfg.precision = precision_override;
  cfg.vocab_file.clear();  // the vocabulary is embedded
  Model m{cfg, text::Vocabulary::load_json_text(ck.vocab_json),
          gen::Generator::init(gen_config(cfg), cfg.seed, cfg.scalar()), {}};
  if (m.vocab.text_dim != cfg.text_dim)
    throw IoError("checkpoint: embedded vocabulary does not match config");
  m.vocab.max_words = cfg.max_words;
  m.generator.register_params(m.params);
  ck.apply_to(m.params, "gen.");
  return m;
}

tri::RenderOpts Model::render_opts(int res, uint64_t ray_seed, bool jitter) const {
  tri::RenderOpts o;
  o.resolution = res;
  o.samples = cfg.ray_samples;
  o.near_offset = cfg.near_offset;
  o.far_offset = cfg.far_offset;
  o.seed = ray_seed;
  o.jitter = jitter;
  o.background = {1.0, 1.0, 1.0};
  return o;
}

Tensor Model::forward_image(const Tensor& z, const text::TokenSet& tokens,
                            const tri::CameraPose& pose, int res, uint64_t ray_seed,
                            bool jitter) const {
  Scalar dt = cfg.scalar();
  Tensor w = generator.map_style(z);
  Tensor wt = generator.map_semantics(w, text::eot_tensor(tokens, dt), !cfg.local_only);
  tri::TriPlane tp = generator.synthesize(wt, text::tokens_tensor(tokens, dt), !cfg.global_only);
  return tri::render(tp, pose, render_opts(res, ray_seed, jitter)).image;
}

Image Model::generate_image(const std::string& prompt, uint64_t z_seed,
                            const tri::CameraPose& pose, int res) const {
  text::TokenSet tokens = text::encode_text(prompt, vocab);
  Tensor z = generator.sample_z(z_seed);
  return Image::from_tensor(forward_image(z, tokens, pose, res, 0, false));
}

Image Model::generate_from_w(const Tensor& w, const std::string& prompt,
                             const tri::CameraPose& pose, int res) const {
  Scalar dt = cfg.scalar();
  text::TokenSet tokens = text::encode_text(prompt, vocab);
  Tensor wt = generator.map_semantics(w, text::eot_tensor(tokens, dt), !cfg.local_only);
  tri::TriPlane tp = generator.synthesize(wt, text::tokens_tensor(tokens, dt), !cfg.global_only);
  return Image::from_tensor(tri::render(tp, pose, render_opts(res, 0, false)).image);
}

metrics::GenerateFn Model::generate_fn(int res) const {
  return [this, res](const std::string& prompt, uint64_t z_seed, const tri::CameraPose& pose) {
    return generate_image(prompt, z_seed, pose, res);
  };
}

Checkpoint Model::to_checkpoint(uint64_t step) const {
  Checkpoint ck;
  ck.config_text = cfg.to_text();
  ck.vocab_json = vocab.to_json_text();
  ck.step = step;
  ck.rng_seed = cfg.seed;
  ck.add_store(params);
  return ck;
}

}  // namespace tpd::harness
