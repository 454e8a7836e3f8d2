// Small shared pieces: 3-vectors, 4x4 rigid transforms, deterministic RNG,
// string/format helpers and error throwing used across the library.
#pragma once

#include <array>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace panfield {

// ---------------------------------------------------------------------------
// errors

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }
[[noreturn]] inline void fail_domain(const std::string& msg) { throw std::domain_error(msg); }
[[noreturn]] inline void fail_usage(const std::string& msg) { throw std::invalid_argument(msg); }

inline std::string strf(const char* fmt, ...) {
  char buf[1024];
  va_list args;
  va_start(args, fmt);
  vsnprintf(buf, sizeof(buf), fmt, args);
  va_end(args);
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// vectors / transforms (geometry is always double; field scalars are templated)

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3() = default;
  Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) {
  double n = norm(a);
  if (n == 0) fail_domain("cannot normalize zero vector");
  return a / n;
}
inline bool finite(const Vec3& a) {
  return std::isfinite(a.x) && std::isfinite(a.y) && std::isfinite(a.z);
}

// Rigid transform stored as a full row-major 4x4; bottom row (0,0,0,1).
struct Mat4 {
  std::array<double, 16> m{};  // row-major

  static Mat4 identity() {
    Mat4 r;
    r.m = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
    return r;
  }
  double& at(int r, int c) { return m[r * 4 + c]; }
  double at(int r, int c) const { return m[r * 4 + c]; }

  Vec3 rotate(const Vec3& v) const {
    return {at(0, 0) * v.x + at(0, 1) * v.y + at(0, 2) * v.z,
            at(1, 0) * v.x + at(1, 1) * v.y + at(1, 2) * v.z,
            at(2, 0) * v.x + at(2, 1) * v.y + at(2, 2) * v.z};
  }
  Vec3 apply(const Vec3& v) const {
    Vec3 r = rotate(v);
    return {r.x + at(0, 3), r.y + at(1, 3), r.z + at(2, 3)};
  }
  Vec3 translation() const { return {at(0, 3), at(1, 3), at(2, 3)}; }
};

// max |R^T R - I| over entries, for pose validation
double rotation_orthonormality_error(const Mat4& pose);

// ---------------------------------------------------------------------------
// deterministic RNG (pcg32; seeded via splitmix64 so nearby seeds decorrelate)

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed = 0, uint64_t stream = 0) { reseed(seed, stream); }

  void reseed(uint64_t seed, uint64_t stream = 0) {
    uint64_t s = seed;
    state_ = splitmix64(s);
    inc_ = (splitmix64(s) ^ stream) | 1ULL;
    next_u32();
    next_u32();
  }

  uint32_t next_u32() {
    uint64_t old = state_;
    state_ = old * 6364136223846793005ULL + inc_;
    uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
    uint32_t rot = static_cast<uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
  }

  uint64_t next_u64() { return (uint64_t(next_u32()) << 32) | next_u32(); }

  // uniform in [0,1)
  double uniform() { return next_u32() * (1.0 / 4294967296.0); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint32_t uniform_int(uint32_t n) {
    // Lemire-style rejection to avoid modulo bias
    uint64_t m = uint64_t(next_u32()) * n;
    uint32_t l = static_cast<uint32_t>(m);
    if (l < n) {
      uint32_t t = (0u - n) % n;
      while (l < t) {
        m = uint64_t(next_u32()) * n;
        l = static_cast<uint32_t>(m);
      }
    }
    return static_cast<uint32_t>(m >> 32);
  }

  double normal() {
    // Box-Muller; consumes two uniforms
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Derive an independent deterministic stream, e.g. per ray or per frame.
  Rng fork(uint64_t a, uint64_t b = 0) const {
    uint64_t s = state_ ^ (a * 0x9e3779b97f4a7c15ULL) ^ (b * 0xda942042e4dd58b5ULL);
    uint64_t str = inc_ ^ (b * 0x9e3779b97f4a7c15ULL) ^ a;
    return Rng(splitmix64(s), str);
  }

  std::pair<uint64_t, uint64_t> state() const { return {state_, inc_}; }
  void set_state(uint64_t state, uint64_t inc) { state_ = state; inc_ = inc; }

 private:
  uint64_t state_ = 0;
  uint64_t inc_ = 1;
};

// ---------------------------------------------------------------------------
// misc

template <class T>
inline T clamp(T v, T lo, T hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::vector<std::string> split_ws(const std::string& line);
std::string trim(const std::string& s);

// Fork-join helper: runs fn(chunk_index, begin, end) over [0, n) split into
// fixed chunks. Chunking (not thread count) determines any accumulation
// order, so results are reproducible for a given chunk size.
void parallel_chunks(size_t n, size_t chunk, int n_threads,
                     const std::function<void(size_t, size_t, size_t)>& fn);

int default_thread_count();

}  // namespace panfield
