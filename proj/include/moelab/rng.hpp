#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "moelab/errors.hpp"

namespace moelab {

// Deterministic random source. Gaussian samples come from Box-Muller on the
// raw engine stream rather than std::normal_distribution, whose output is
// implementation-defined; no spare sample is cached, so the serializable
// state is exactly the mt19937_64 engine state.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n).
  int64_t below(int64_t n) {
    if (n <= 0) throw ContractError("Rng::below: n must be positive");
    return static_cast<int64_t>(engine_() % static_cast<uint64_t>(n));
  }

  // Standard normal.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  std::string save_state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void load_state(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
    if (is.fail()) throw IntegrityError("Rng::load_state: malformed engine state");
  }

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace moelab
