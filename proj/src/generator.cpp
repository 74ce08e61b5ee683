#include "generator.hpp"

#include <cmath>

namespace tpd::gen {

using namespace tpd::ad;

int GeneratorConfig::levels() const {
  if (plane_res < 8 || (plane_res & (plane_res - 1)) != 0)
    throw ConfigError("plane_res must be a power of two >= 8");
  int l = 1, r = 4;
  while (r < plane_res) {
    r *= 2;
    ++l;
  }
  return l;
}

int GeneratorConfig::block_count() const { return levels() + 1; }

Tensor modulated_conv(const Tensor& features, const Tensor& kernel, const Tensor& bias,
                      const Tensor& style_row, bool demodulate) {
  int64_t kh = kernel.dim(0), kw = kernel.dim(1), ci = kernel.dim(2), co = kernel.dim(3);
  if (style_row.ndim() != 2 || style_row.dim(0) != 1 || style_row.dim(1) != ci)
    throw ContractError("modulated_conv: style must be (1, Cin)");
  Tensor s = reshape(style_row, {1, 1, ci, 1});
  s = expand(expand(expand(s, 0, kh), 1, kw), 3, co);
  Tensor scaled = mul(kernel, s);
  if (demodulate) {
    Tensor d = rsqrt(reduce_sum(square(scaled), {0, 1, 2}, false), 1e-8);  // (Co)
    Tensor dd = expand(expand(expand(reshape(d, {1, 1, 1, co}), 0, kh), 1, kw), 2, ci);
    scaled = mul(scaled, dd);
  }
  int pad = int((kh - 1) / 2);
  return conv2d(features, scaled, bias, 1, pad);
}

namespace {

Tensor he_weight(const Shape& s, int64_t fan_in, Rng& rng, Scalar dt, double gain = 1.0) {
  return mul_scalar(Tensor::randn(s, rng, dt), gain / std::sqrt(double(fan_in))).detach();
}

SynthBlock make_block(int k, int cin, int cout, int w_dim, Rng& rng, Scalar dt) {
  SynthBlock b;
  b.conv_w = he_weight({k, k, cin, cout}, int64_t(k) * k * cin, rng, dt);
  b.conv_b = Tensor::zeros({cout}, dt);
  b.style_w = he_weight({w_dim, cin}, w_dim, rng, dt);
  b.style_b = Tensor::full({1, cin}, 1.0, dt);
  return b;
}

}  // namespace

Generator Generator::init(const GeneratorConfig& cfg, uint64_t seed, ad::Scalar dt) {
  Generator g;
  g.cfg = cfg;
  Rng rng(hash64(seed, 0x67656ell));
  int c3 = 3 * cfg.plane_channels;
  g.map_w1 = he_weight({cfg.z_dim, cfg.w_dim}, cfg.z_dim, rng, dt);
  g.map_b1 = Tensor::zeros({1, cfg.w_dim}, dt);
  g.map_w2 = he_weight({cfg.w_dim, cfg.w_dim}, cfg.w_dim, rng, dt);
  g.map_b2 = Tensor::zeros({1, cfg.w_dim}, dt);
  g.mapper = text::SemanticsMapper::init(cfg.text_dim, cfg.w_dim, rng, dt);
  g.const_base = mul_scalar(Tensor::randn({4, 4, c3}, rng, dt), 0.25).detach();
  int nb = cfg.block_count();
  for (int b = 0; b < nb; ++b) g.blocks.push_back(make_block(3, c3, c3, cfg.w_dim, rng, dt));
  g.head = make_block(1, c3, c3, cfg.w_dim, rng, dt);
  int slots = std::min(cfg.adapter_count, nb);
  for (int a = 0; a < slots; ++a)
    g.adapters.push_back(adapter::AdapterParams::init(cfg.plane_channels, cfg.text_dim, rng, dt));
  Rng drng(hash64(seed, 0xdec0deull));
  g.decoder = tri::Decoder::init(cfg.plane_channels, cfg.decoder_hidden, cfg.density_bias, drng, dt);
  return g;
}

int Generator::adapter_at(int block) const {
  int nb = cfg.block_count();
  int slots = int(adapters.size());
  int first = nb - slots;
  return block >= first ? block - first : -1;
}

void Generator::register_params(ParamStore& s) const {
  s.add("gen.map.w1", map_w1, "mapping");
  s.add("gen.map.b1", map_b1, "mapping");
  s.add("gen.map.w2", map_w2, "mapping");
  s.add("gen.map.b2", map_b2, "mapping");
  s.add("gen.sem.et_w1", mapper.et_w1, "semantics");
  s.add("gen.sem.et_b1", mapper.et_b1, "semantics");
  s.add("gen.sem.et_w2", mapper.et_w2, "semantics");
  s.add("gen.sem.et_b2", mapper.et_b2, "semantics");
  s.add("gen.sem.st_w1", mapper.st_w1, "semantics");
  s.add("gen.sem.st_b1", mapper.st_b1, "semantics");
  s.add("gen.sem.st_w2", mapper.st_w2, "semantics");
  s.add("gen.sem.st_b2", mapper.st_b2, "semantics");
  s.add("gen.sem.fuse_w", mapper.fuse_w, "semantics");
  s.add("gen.sem.fuse_b", mapper.fuse_b, "semantics");
  s.add("gen.const_base", const_base, "synthesis");
  for (size_t b = 0; b < blocks.size(); ++b) {
    std::string p = "gen.block" + std::to_string(b) + ".";
    s.add(p + "conv_w", blocks[b].conv_w, "synthesis");
    s.add(p + "conv_b", blocks[b].conv_b, "synthesis");
    s.add(p + "style_w", blocks[b].style_w, "synthesis");
    s.add(p + "style_b", blocks[b].style_b, "synthesis");
  }
  s.add("gen.head.conv_w", head.conv_w, "synthesis");
  s.add("gen.head.conv_b", head.conv_b, "synthesis");
  s.add("gen.head.style_w", head.style_w, "synthesis");
  s.add("gen.head.style_b", head.style_b, "synthesis");
  for (size_t a = 0; a < adapters.size(); ++a) {
    std::string p = "gen.adapter" + std::to_string(a) + ".";
    s.add(p + "wq", adapters[a].wq, "adapter");
    s.add(p + "wk", adapters[a].wk, "adapter");
    s.add(p + "wv", adapters[a].wv, "adapter");
    s.add(p + "wo", adapters[a].wo, "adapter");
    s.add(p + "beta", adapters[a].beta, "adapter");
    s.add(p + "gamma", adapters[a].gamma, "adapter");
  }
  s.add("gen.dec.w1", decoder.w1, "decoder");
  s.add("gen.dec.b1", decoder.b1, "decoder");
  s.add("gen.dec.w2", decoder.w2, "decoder");
  s.add("gen.dec.b2", decoder.b2, "decoder");
}

Tensor Generator::sample_z(uint64_t seed) const {
  Rng rng = Rng::derive(seed, 0x7aull);
  return Tensor::randn({1, cfg.z_dim}, rng, map_w1.dtype());
}

Tensor Generator::map_style(const Tensor& z) const {
  if (z.ndim() != 2 || z.dim(1) != cfg.z_dim) throw ContractError("map_style: z must be (1, z_dim)");
  Tensor h = lrelu(add(matmul(z, map_w1), map_b1), 0.2);
  return lrelu(add(matmul(h, map_w2), map_b2), 0.2);
}

Tensor Generator::map_semantics(const Tensor& w, const Tensor& eot, bool use_text) const {
  return mapper.map(w, eot, use_text);
}

tri::TriPlane Generator::synthesize(const Tensor& w_t, const Tensor& word_tokens,
                                    bool adapters_enabled) const {
  int c = cfg.plane_channels;
  int c3 = 3 * c;
  adapter::AdapterOpts aopts;
  aopts.use_gate = !cfg.no_gate;
  aopts.no_3d_aware = cfg.no_3d_aware;
  aopts.max_pool = cfg.adapter_max_pool;

  auto apply_adapter = [&](Tensor x, int block) -> Tensor {
    int slot = adapter_at(block);
    if (slot < 0 || !adapters_enabled) return x;
    std::array<Tensor, 3> planes = {slice(x, 2, 0, c), slice(x, 2, c, 2 * c),
                                    slice(x, 2, 2 * c, 3 * c)};
    planes = adapter::adapter_forward(planes, word_tokens, adapters[size_t(slot)], aopts);
    return concat({planes[0], planes[1], planes[2]}, 2);
  };

  Tensor x = const_base;
  for (size_t b = 0; b < blocks.size(); ++b) {
    if (b > 0 && x.dim(0) < cfg.plane_res) x = upsample2x(x);
    const SynthBlock& blk = blocks[b];
    Tensor style = add(matmul(w_t, blk.style_w), blk.style_b);
    x = lrelu(modulated_conv(x, blk.conv_w, blk.conv_b, style), 0.2);
    x = apply_adapter(x, int(b));
  }
  Tensor style = add(matmul(w_t, head.style_w), head.style_b);
  x = modulated_conv(x, head.conv_w, head.conv_b, style);
  tri::TriPlane tp;
  tp.planes = {slice(x, 2, 0, c), slice(x, 2, c, 2 * c), slice(x, 2, 2 * c, c3)};
  tp.decoder = &decoder;
  return tp;
}

}  // namespace tpd::gen
