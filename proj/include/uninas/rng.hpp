#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace uninas {

// Deterministic splitmix64 stream. Distributions are implemented by hand
// instead of <random> so sequences do not depend on the standard library
// implementation.
class DetRng {
 public:
  explicit DetRng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();

  // uniform in [0, 1)
  double uniform();
  double uniform(double lo, double hi);

  // standard normal via Box-Muller (two draws per sample, none cached)
  double normal();

  // normal(0, sigma) resampled until within 2 sigma
  double trunc_normal(double sigma);

  // index drawn from an unnormalized nonnegative weight vector
  int categorical(const std::vector<double>& weights);

  // independent substream; advances this stream by one draw
  DetRng fork(std::uint64_t stream);

 private:
  std::uint64_t state_;
};

// 64-bit FNV-1a, used for content digests
std::uint64_t fnv1a64(const void* data, std::size_t len);
std::uint64_t fnv1a64(const std::string& s);

}  // namespace uninas
