#pragma once

#include <string>
#include <vector>

#include "params.hpp"

namespace tpd::harness {

// Binary container: magic "TPD1", version, config snapshot, embedded
// vocabulary json, step counter, RNG base seed, then named parameter entries
// (name, dtype, shape, little-endian raw payload). save -> load -> save is
// byte-identical.
struct Checkpoint {
  static constexpr uint32_t kVersion = 1;
  std::string config_text;
  std::string vocab_json;
  uint64_t step = 0;
  uint64_t rng_seed = 0;

  struct Entry {
    std::string name;
    ad::Scalar dtype;
    ad::Shape shape;
    std::vector<unsigned char> payload;
  };
  std::vector<Entry> entries;

  void add_store(const ParamStore& store);
  // Writes values into matching store tensors; widening f32 payloads into f64
  // tensors is lossless. Throws when a store parameter has no entry or the
  // shapes disagree.
  void apply_to(ParamStore& store, const std::string& prefix) const;
};

void checkpoint_save(const Checkpoint& ck, const std::string& path);
Checkpoint checkpoint_load(const std::string& path);

}  // namespace tpd::harness
