#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "deltacomp/numerics.hpp"

namespace deltacomp {

/// Precision of stored scales and zero points. Half rounds them to binary16
/// before codes are chosen, so a serialized tensor dequantizes bit-exactly.
enum class ParamPrecision { Full, Half };

/// Group-quantized matrix. For bits in {2,3,4,8} each row is split into
/// groups of `group_size` consecutive columns (last one may be partial) with
/// x̂ = zero + scale·code. For bits == 1 there is one global scale γ and
/// x̂ = γ·(2·code − 1); `zeros` is empty and group_size is 0.
struct QuantizedTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  unsigned bits = 0;
  std::size_t group_size = 0;
  std::vector<double> scales;
  std::vector<double> zeros;
  /// rows·cols codes, row-major, LSB-first packed at `bits` bits each.
  std::vector<std::uint8_t> codes;

  std::size_t groups_per_row() const noexcept;
  std::size_t scale_count() const noexcept;

  friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

bool is_quantizer_bits(unsigned bits) noexcept;

QuantizedTensor rtn_quantize(const Matrix& w, unsigned bits, std::size_t group_size,
                             ParamPrecision precision = ParamPrecision::Full);

/// Cholesky factor of the damped inverse Hessian of a calibration input X
/// (h_in × n_samples). Reusable across weights that share the same X.
class HessianFactor {
 public:
  static HessianFactor from_calibration(const Matrix& x);

  std::size_t dim() const noexcept { return dim_; }
  double damping() const noexcept { return damping_; }
  /// Upper-triangular U with (XXᵀ + λI)⁻¹ = UᵀU, row-major dim × dim.
  std::span<const double> inverse_upper() const noexcept { return inverse_upper_; }
  /// Undamped XXᵀ, row-major, used to report the objective.
  std::span<const double> gram() const noexcept { return gram_; }

 private:
  std::size_t dim_ = 0;
  double damping_ = 0.0;
  std::vector<double> inverse_upper_;
  std::vector<double> gram_;
};

struct GptqResult {
  QuantizedTensor tensor;
  /// ‖WX − ŴX‖²_F
  double objective = 0.0;
};

/// Calibration-aware quantization on the RTN grid: columns are quantized left
/// to right and each column's rounding error is pushed onto the remaining
/// columns through the inverse-Hessian factor.
GptqResult gptq_quantize(const Matrix& w, const Matrix& x, unsigned bits, std::size_t group_size,
                         ParamPrecision precision = ParamPrecision::Full);
GptqResult gptq_quantize(const Matrix& w, const HessianFactor& hessian, unsigned bits, std::size_t group_size,
                         ParamPrecision precision = ParamPrecision::Full);

/// 1-bit quantization with the least-squares scale γ = mean(|w|).
QuantizedTensor sign_quantize(const Matrix& w, ParamPrecision precision = ParamPrecision::Full);

Matrix dequantize(const QuantizedTensor& q);

/// Dequantizes row r into `out` (length q.cols). Shares the arithmetic of
/// dequantize() exactly.
void dequantize_row(const QuantizedTensor& q, std::size_t r, std::span<float> out);

/// Throws CORRUPT_DATA when sizes or code ranges are inconsistent.
void validate(const QuantizedTensor& q);

/// ‖(W − Ŵ)X‖²_F, accumulated in double.
double quantization_objective(const Matrix& w, const Matrix& w_hat, const Matrix& x);

std::vector<std::uint8_t> pack_bits(std::span<const std::uint8_t> codes, unsigned bits);
std::vector<std::uint8_t> unpack_bits(std::span<const std::uint8_t> bytes, std::size_t count, unsigned bits);
/// Decodes codes [first, first + out.size()) without unpacking the whole stream.
void unpack_bits_range(std::span<const std::uint8_t> bytes, std::size_t first, unsigned bits,
                       std::span<std::uint8_t> out);

constexpr std::size_t packed_size(std::size_t count, unsigned bits) noexcept { return (count * bits + 7) / 8; }

}  // namespace deltacomp
