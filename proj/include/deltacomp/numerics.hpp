#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace deltacomp {

/// Dense row-major matrix with 32-bit storage. Reductions over its elements
/// accumulate in double.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols);
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<float>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  bool all_finite() const noexcept;
  std::string shape_string() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

/// Thin SVD factors: a ≈ u · diag(sigma) · vᵀ with u (rows × r), v (cols × r).
struct SvdResult {
  Matrix u;
  std::vector<float> sigma;
  Matrix v;

  std::size_t rank() const noexcept { return sigma.size(); }
};

/// SplitMix64 stream feeding a Box–Muller normal sampler.
///
/// next_u64: state += 0x9E3779B97F4A7C15, then the standard SplitMix64
/// finalizer (shifts 30/27/31, multipliers 0xBF58476D1CE4E5B9 and
/// 0x94D049BB133111EB). Gaussians are produced in pairs from
/// u1 = ((next >> 11) + 1) · 2⁻⁵³ and u2 = (next >> 11) · 2⁻⁵³ as
/// √(−2 ln u1)·cos(2πu2), then √(−2 ln u1)·sin(2πu2).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) noexcept : state_(seed) {}

  /// Independent stream for a named consumer: seed xor FNV-1a64(name).
  static Rng for_stream(std::uint64_t seed, std::string_view name) noexcept;

  std::uint64_t next_u64() noexcept;
  /// Uniform in [0, 1).
  double next_uniform() noexcept;
  /// Uniform integer in [0, bound); bound must be positive.
  std::uint64_t next_below(std::uint64_t bound) noexcept;
  double next_gaussian() noexcept;

 private:
  std::uint64_t state_;
  std::optional<double> spare_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix subtract(const Matrix& a, const Matrix& b);
Matrix add(const Matrix& a, const Matrix& b);

/// Columns [begin, end) of a.
Matrix column_slice(const Matrix& a, std::size_t begin, std::size_t end);

double fro_norm(const Matrix& a);

/// Thin SVD by one-sided Jacobi over the smaller dimension, keeping the
/// r_max largest singular triplets. Columns of u and v are orthonormal even
/// when a is rank deficient, and the largest-magnitude entry of each u
/// column is non-negative.
SvdResult thin_svd(const Matrix& a, std::size_t r_max);

Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols);

}  // namespace deltacomp
