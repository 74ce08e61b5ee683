#include "checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace tpd::harness {

namespace {

const char kMagic[4] = {'T', 'P', 'D', '1'};

template <class T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <class T>
T get(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!f) throw IoError("checkpoint: truncated file");
  return v;
}
void put_str(std::ofstream& f, const std::string& s) {
  put<uint64_t>(f, s.size());
  f.write(s.data(), std::streamsize(s.size()));
}
std::string get_str(std::ifstream& f, uint64_t limit = 1ull << 30) {
  uint64_t n = get<uint64_t>(f);
  if (n > limit) throw IoError("checkpoint: corrupt string length");
  std::string s(n, '\0');
  f.read(s.data(), std::streamsize(n));
  if (!f) throw IoError("checkpoint: truncated file");
  return s;
}

}  // namespace

void Checkpoint::add_store(const ParamStore& store) {
  for (const auto& item : store.items) {
    Entry e;
    e.name = item.name;
    e.dtype = item.tensor.dtype();
    e.shape = item.tensor.shape();
    const auto& st = item.tensor.payload()->value;
    if (e.dtype == ad::Scalar::F32) {
      e.payload.resize(st.f32.size() * sizeof(float));
      std::memcpy(e.payload.data(), st.f32.data(), e.payload.size());
    } else {
      e.payload.resize(st.f64.size() * sizeof(double));
      std::memcpy(e.payload.data(), st.f64.data(), e.payload.size());
    }
    entries.push_back(std::move(e));
  }
}

void Checkpoint::apply_to(ParamStore& store, const std::string& prefix) const {
  for (auto& item : store.items) {
    if (item.name.rfind(prefix, 0) != 0) continue;
    const Entry* found = nullptr;
    for (const auto& e : entries)
      if (e.name == item.name) {
        found = &e;
        break;
      }
    if (!found) throw IoError("checkpoint: missing parameter '" + item.name + "'");
    if (found->shape != item.tensor.shape())
      throw IoError("checkpoint: shape mismatch for '" + item.name + "'");
    auto& dst = item.tensor.payload()->value;
    int64_t n = item.tensor.numel();
    if (found->dtype == ad::Scalar::F32) {
      if (found->payload.size() != size_t(n) * sizeof(float))
        throw IoError("checkpoint: payload size mismatch for '" + item.name + "'");
      const float* src = reinterpret_cast<const float*>(found->payload.data());
      for (int64_t i = 0; i < n; ++i) dst.set(size_t(i), double(src[i]));  // exact widening
    } else {
      if (found->payload.size() != size_t(n) * sizeof(double))
        throw IoError("checkpoint: payload size mismatch for '" + item.name + "'");
      const double* src = reinterpret_cast<const double*>(found->payload.data());
      if (dst.dt == ad::Scalar::F32)
        throw IoError("checkpoint: cannot narrow f64 payload '" + item.name + "' into f32 model");
      for (int64_t i = 0; i < n; ++i) dst.set(size_t(i), src[i]);
    }
  }
}

void checkpoint_save(const Checkpoint& ck, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint: " + path);
  f.write(kMagic, 4);
  put<uint32_t>(f, Checkpoint::kVersion);
  put_str(f, ck.config_text);
  put_str(f, ck.vocab_json);
  put<uint64_t>(f, ck.step);
  put<uint64_t>(f, ck.rng_seed);
  put<uint32_t>(f, uint32_t(ck.entries.size()));
  for (const auto& e : ck.entries) {
    put_str(f, e.name);
    put<uint8_t>(f, uint8_t(e.dtype));
    put<uint8_t>(f, uint8_t(e.shape.size()));
    for (auto d : e.shape) put<uint32_t>(f, uint32_t(d));
    put<uint64_t>(f, e.payload.size());
    f.write(reinterpret_cast<const char*>(e.payload.data()), std::streamsize(e.payload.size()));
  }
  if (!f) throw IoError("checkpoint write failed: " + path);
}

Checkpoint checkpoint_load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("checkpoint: bad magic (not a TPD1 file): " + path);
  uint32_t version = get<uint32_t>(f);
  if (version != Checkpoint::kVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.config_text = get_str(f);
  ck.vocab_json = get_str(f);
  ck.step = get<uint64_t>(f);
  ck.rng_seed = get<uint64_t>(f);
  uint32_t count = get<uint32_t>(f);
  for (uint32_t i = 0; i < count; ++i) {
    Checkpoint::Entry e;
    e.name = get_str(f, 1 << 16);
    uint8_t dt = get<uint8_t>(f);
    if (dt > 1) throw IoError("checkpoint: bad dtype tag");
    e.dtype = ad::Scalar(dt);
    uint8_t nd = get<uint8_t>(f);
    int64_t numel = 1;
    for (int d = 0; d < nd; ++d) {
      uint32_t dim = get<uint32_t>(f);
      e.shape.push_back(int64_t(dim));
      numel *= dim;
    }
    uint64_t bytes = get<uint64_t>(f);
    size_t want = size_t(numel) * (e.dtype == ad::Scalar::F32 ? sizeof(float) : sizeof(double));
    if (bytes != want) throw IoError("checkpoint: payload size mismatch for '" + e.name + "'");
    e.payload.resize(bytes);
    f.read(reinterpret_cast<char*>(e.payload.data()), std::streamsize(bytes));
    if (!f) throw IoError("checkpoint: truncated file");
    ck.entries.push_back(std::move(e));
  }
  return ck;
}

}  // namespace tpd::harness
