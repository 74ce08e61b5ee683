#pragma once

#include <vector>

#include "adapter.hpp"
#include "params.hpp"
#include "text.hpp"
#include "triplane.hpp"

namespace tpd::gen {

using ad::Tensor;

struct GeneratorConfig {
  int plane_res = 64;       // power of two, >= 8
  int plane_channels = 16;  // C per plane; synthesis width is 3C
  int z_dim = 64;
  int w_dim = 64;
  int text_dim = 32;
  int adapter_count = 4;  // fills the slots closest to the output
  int decoder_hidden = 32;
  double density_bias = -1.0;
  bool no_gate = false;
  bool no_3d_aware = false;
  bool adapter_max_pool = false;

  int levels() const;        // 4^2 ... plane_res^2
  int block_count() const;   // levels + 1 (extra conv at top resolution)
};

// style = affine(w_t); kernel scaled per input channel, demodulated to unit
// per-output-channel norm, then convolved. Uniform positive scaling of the
// style vector cancels in the demodulation.
Tensor modulated_conv(const Tensor& features, const Tensor& kernel, const Tensor& bias,
                      const Tensor& style_row, bool demodulate = true);

struct SynthBlock {
  Tensor conv_w, conv_b;    // (k,k,Cin,Cout), (Cout)
  Tensor style_w, style_b;  // (w_dim, Cin), (1, Cin); bias initialized at 1
};

struct Generator {
  GeneratorConfig cfg;
  // z -> w (no text on this path)
  Tensor map_w1, map_b1, map_w2, map_b2;
  text::SemanticsMapper mapper;
  Tensor const_base;  // (4, 4, 3C)
  std::vector<SynthBlock> blocks;
  SynthBlock head;  // 1x1, linear
  std::vector<adapter::AdapterParams> adapters;  // one per filled slot
  tri::Decoder decoder;

  static Generator init(const GeneratorConfig& cfg, uint64_t seed, ad::Scalar dt);
  void register_params(ParamStore& store) const;

  Tensor sample_z(uint64_t seed) const;                   // (1, z_dim) standard normal
  Tensor map_style(const Tensor& z) const;                // (1, w_dim)
  Tensor map_semantics(const Tensor& w, const Tensor& eot, bool use_text) const;

  // Runs the modulated conv pyramid; after each slot holding an adapter the
  // current plane triple is passed through it (zero-init identity).
  tri::TriPlane synthesize(const Tensor& w_t, const Tensor& word_tokens,
                           bool adapters_enabled) const;

  // adapter slot index of block b, or -1
  int adapter_at(int block) const;
};

}  // namespace tpd::gen
