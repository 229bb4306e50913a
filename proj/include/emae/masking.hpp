#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "emae/errors.hpp"
#include "emae/rng.hpp"
#include "emae/tensor.hpp"

namespace emae {

/// Parameters of one mask draw over an m x n signal matrix.
struct MaskSpec {
  std::size_t rows = 1;
  std::size_t cols = 1;
  double ratio = 0.5;
  std::uint64_t rng_seed = 0;
  std::uint64_t draw_counter = 0;

  void validate() const {
    if (rows == 0 || cols == 0) throw ContractError("mask dimensions must be positive");
    if (!(ratio > 0.0) || ratio > 1.0) {
      throw ContractError("mask ratio must lie in (0, 1], got " + std::to_string(ratio));
    }
  }

  /// floor(m * n * r). The small nudge keeps decimal ratios such as 0.3 or
  /// 0.7 from landing one below the exact rational product.
  std::size_t masked_count() const {
    const double total = static_cast<double>(rows * cols);
    return static_cast<std::size_t>(std::floor(total * ratio + 1e-9));
  }
};

/// Set of masked positions of an m x n matrix, stored as sorted flat indices.
struct Mask {
  std::vector<std::size_t> flat_indices;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;

  std::size_t size() const noexcept { return flat_indices.size(); }
  bool empty() const noexcept { return flat_indices.empty(); }

  /// Dense 0/1 indicator in row-major order.
  std::vector<std::uint8_t> indicator() const {
    std::vector<std::uint8_t> bits(rows * cols, 0);
    for (std::size_t i : flat_indices) bits[i] = 1;
    return bits;
  }

  friend bool operator==(const Mask& a, const Mask& b) {
    return a.rows == b.rows && a.cols == b.cols && a.flat_indices == b.flat_indices;
  }
};

struct MatrixIndex {
  std::size_t row;
  std::size_t col;
  friend bool operator==(const MatrixIndex&, const MatrixIndex&) = default;
};

inline MatrixIndex flat_to_2d(std::size_t i, std::size_t n) {
  if (n == 0) throw ContractError("flat_to_2d requires n >= 1");
  return {i / n, i % n};
}

/// Fisher-Yates shuffle of 0..m*n-1 driven by the (seed, counter) stream;
/// the first floor(m*n*r) entries are the masked positions.
inline Mask generate_mask(const MaskSpec& spec) {
  spec.validate();
  const std::size_t total = spec.rows * spec.cols;
  std::vector<std::size_t> perm(total);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  CounterRng rng(spec.rng_seed, streams::kMask + spec.draw_counter);
  for (std::size_t i = total; i-- > 1;) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i + 1));
    std::swap(perm[i], perm[j]);
  }
  Mask mask;
  mask.rows = spec.rows;
  mask.cols = spec.cols;
  mask.seed = spec.rng_seed;
  mask.counter = spec.draw_counter;
  mask.flat_indices.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(spec.masked_count()));
  std::sort(mask.flat_indices.begin(), mask.flat_indices.end());
  return mask;
}

/// Stateful source of fresh masks: every call consumes one counter value.
class MaskGenerator {
 public:
  explicit MaskGenerator(MaskSpec spec) : spec_(spec) { spec_.validate(); }

  Mask next() {
    Mask m = generate_mask(spec_);
    ++spec_.draw_counter;
    return m;
  }

  std::uint64_t draws() const noexcept { return spec_.draw_counter; }
  const MaskSpec& spec() const noexcept { return spec_; }

 private:
  MaskSpec spec_;
};

namespace detail {

inline void check_mask_dims(const Tensor& x, const Mask& mask) {
  if (x.rank() < 2 || x.dim(x.rank() - 2) != mask.rows || x.dim(x.rank() - 1) != mask.cols) {
    throw ShapeError("mask " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                     " does not match tensor " + shape_str(x.shape()));
  }
}

}  // namespace detail

/// Zeroes masked positions. Leading dimensions are treated as a batch that
/// shares the mask.
inline Tensor apply_mask(const Tensor& x, const Mask& mask) {
  detail::check_mask_dims(x, mask);
  Tensor out = x;
  const std::size_t plane = mask.rows * mask.cols;
  for (std::size_t base = 0; base < out.numel(); base += plane)
    for (std::size_t i : mask.flat_indices) out[base + i] = 0.0;
  return out;
}

/// Keeps only masked positions; everything else becomes zero.
inline Tensor apply_reversed_mask(const Tensor& x, const Mask& mask) {
  detail::check_mask_dims(x, mask);
  Tensor out(x.shape());
  const std::size_t plane = mask.rows * mask.cols;
  for (std::size_t base = 0; base < out.numel(); base += plane)
    for (std::size_t i : mask.flat_indices) out[base + i] = x[base + i];
  return out;
}

}  // namespace emae
