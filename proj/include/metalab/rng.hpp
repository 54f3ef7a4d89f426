#pragma once

#include <cmath>
#include <cstdint>

namespace metalab {

// Counter-based splittable random stream.  Every stream is addressed by
// (seed, task index, role); draws are a pure function of the address and the
// draw counter, so results do not depend on evaluation order or on how other
// streams are consumed.  The generator is the SplitMix64 sequence seeded with
// a hash of the address.
enum class StreamRole : std::uint64_t {
  InitTeacher = 1,
  InitStudent = 2,
  InitEmbed = 3,
  TaskVector = 4,
  TeacherShift = 5,
  TrainInput = 6,
  ValInput = 7,
  LabelNoise = 8,
  EvalTask = 9,
  InitOverlap = 10,
  CovSample = 11,
};

namespace detail {
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace detail

class CounterRng {
 public:
  CounterRng(std::uint64_t seed, std::uint64_t task, StreamRole role)
      : state_(derive_key(seed, task, static_cast<std::uint64_t>(role))) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform on (0, 1]: never returns 0 so log() below is safe.
  double next_uniform() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; draws come in cached pairs.
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_uniform();
    double u2 = next_uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  static std::uint64_t derive_key(std::uint64_t seed, std::uint64_t task,
                                  std::uint64_t role) {
    std::uint64_t k = detail::mix64(seed ^ 0x6d61737465726b79ULL);
    k = detail::mix64(k ^ task);
    k = detail::mix64(k ^ (role * 0x100000001b3ULL));
    return k;
  }

  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace metalab
