#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tpd {

// Error taxonomy. The CLI maps these onto its exit-code contract
// (config error 2, numeric abort 3, i/o error 4).
struct ConfigError : std::runtime_error { using std::runtime_error::runtime_error; };
struct IoError : std::runtime_error { using std::runtime_error::runtime_error; };
struct NumericError : std::runtime_error { using std::runtime_error::runtime_error; };
struct ContractError : std::logic_error { using std::logic_error::logic_error; };

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t hash64(uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  uint64_t s = a;
  uint64_t h = splitmix64(s);
  s ^= b + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  h = splitmix64(s);
  s ^= c + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  return splitmix64(s);
}

inline uint64_t hash_str(const std::string& s, uint64_t seed = 0x811c9dc5u) {
  uint64_t h = 0xcbf29ce484222325ull ^ seed;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return hash64(h);
}

// Deterministic counter-seeded RNG (xoshiro256**). Streams are derived with
// Rng::derive so parallel consumers never share state.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t s = seed;
    for (auto& w : state_) w = splitmix64(s);
  }
  static Rng derive(uint64_t base, uint64_t a, uint64_t b = 0) { return Rng(hash64(base, a, b)); }

  uint64_t next_u64() {
    auto rotl = [](uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
    uint64_t result = rotl(state_[1] * 5, 7) * 9;
    uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // inclusive bounds
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (hi < lo) throw ContractError("uniform_int: empty range");
    uint64_t span = uint64_t(hi - lo) + 1;
    return lo + int64_t(next_u64() % span);
  }
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do { u1 = uniform(); } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Worker cap: TPD_THREADS env var, default min(4, hardware).
int max_threads();

// Runs fn(begin, end) over [0, n) in disjoint chunks. Callers must only write
// disjoint outputs per index; results are identical for any thread count.
// Nested calls run serially on the calling thread.
void parallel_for(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& fn);

inline double sqr(double x) { return x * x; }
inline double clampd(double v, double lo, double hi) { return v < lo ? lo : (v > hi ? hi : v); }

struct Vec3 {
  double x = 0, y = 0, z = 0;
  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    double n = norm();
    if (n == 0.0) throw NumericError("normalize of zero vector");
    return *this * (1.0 / n);
  }
};

}  // namespace tpd
