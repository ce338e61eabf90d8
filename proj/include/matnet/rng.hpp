#pragma once

#include "matnet/tensor.hpp"

#include <array>
#include <cstdint>

namespace matnet {

/// Counter-based Philox-4x32-10 generator. Output depends only on
/// (seed, stream, draw index), so streams can be split freely across
/// workers without changing results.
class Rng {
 public:
  Rng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t draws() const { return counter_; }

  /// Independent generator for a derived stream.
  Rng split(std::uint64_t child) const;

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();

  template <typename S>
  Tensor<S> normal_tensor(const Shape& shape) {
    Tensor<S> t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(normal());
    return t;
  }
  template <typename S>
  Tensor<S> uniform_tensor(const Shape& shape) {
    Tensor<S> t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<S>(uniform());
    return t;
  }

  /// Raw Philox block: counter in words 0-1, stream in words 2-3, seed as key.
  std::array<std::uint32_t, 4> block(std::uint64_t counter) const;

 private:

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  int buffered_ = 0;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

}  // namespace matnet
