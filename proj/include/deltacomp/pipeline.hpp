#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "deltacomp/model_io.hpp"
#include "deltacomp/numerics.hpp"
#include "deltacomp/planner.hpp"
#include "deltacomp/quantizers.hpp"

namespace deltacomp {

inline constexpr std::size_t kDefaultGroupSize = 128;
inline constexpr std::size_t kSyntheticCalibrationSamples = 512;

/// Quantized factors of one schedule group. `u` is the h_out × width slice
/// of U; `vt` is the width × h_in slice of Vᵀ (quantized along h_in).
struct QuantizedFactors {
  QuantizedTensor u;
  QuantizedTensor vt;

  friend bool operator==(const QuantizedFactors&, const QuantizedFactors&) = default;
};

/// 16-bit groups: the same slices rounded to binary16, no quantization grid.
struct HalfFactors {
  Matrix u;
  Matrix vt;

  friend bool operator==(const HalfFactors&, const HalfFactors&) = default;
};

struct FactorGroup {
  PrecisionGroup range;
  std::variant<QuantizedFactors, HalfFactors> factors;

  friend bool operator==(const FactorGroup&, const FactorGroup&) = default;
};

/// Mixed-precision low-rank form of one delta matrix:
/// Δ̂ = Σ_g Û_g · diag(σ_g) · V̂_gᵀ.
struct CompressedMatrix {
  std::size_t h_out = 0;
  std::size_t h_in = 0;
  std::size_t group_size = kDefaultGroupSize;
  /// Retained singular values, binary16-representable.
  std::vector<float> sigma;
  std::vector<FactorGroup> groups;
  PrecisionSchedule schedule;

  friend bool operator==(const CompressedMatrix&, const CompressedMatrix&) = default;
};

struct CompressOptions {
  std::size_t group_size = kDefaultGroupSize;
  /// False replaces calibration-aware quantization with round-to-nearest;
  /// the calibration matrix is then ignored.
  bool calibration_aware = true;
};

/// SVD to the scheduled rank, then per group: V slice quantized against X,
/// U slice quantized against Σ_g·V̂_gᵀ·X. 16-bit groups are rounded to
/// binary16 and 1-bit groups use sign quantization.
CompressedMatrix compress_matrix(const Matrix& delta, const Matrix& x, const PrecisionSchedule& schedule,
                                 const CompressOptions& options = {});

/// Same as compress_matrix with a precomputed SVD holding at least the
/// scheduled rank. Lets callers share one decomposition across schedules.
CompressedMatrix compress_factors(const SvdResult& svd, std::size_t h_out, std::size_t h_in, const Matrix& x,
                                  const PrecisionSchedule& schedule, const CompressOptions& options = {});

Matrix decompress_matrix(const CompressedMatrix& cm);
/// Û_g · diag(σ_g) · V̂_gᵀ for a single group.
Matrix decompress_group(const CompressedMatrix& cm, std::size_t group_index);

/// Δ̂·x computed as Σ_g Û_g(σ_g ⊙ (V̂_gᵀ x)), dequantizing one row at a time.
/// Working memory is O(h_out + h_in + rank); Δ̂ is never formed.
std::vector<float> fused_apply(const CompressedMatrix& cm, std::span<const float> x);
/// backbone·x + Δ̂·x.
std::vector<float> fused_apply(const CompressedMatrix& cm, std::span<const float> x, const Matrix& backbone);
/// Δ̂·X for a batch X of shape h_in × batch.
Matrix fused_apply_batch(const CompressedMatrix& cm, const Matrix& x);

struct SizeBreakdown {
  /// Codes plus binary16 factor slices: the quantity bounded by the α budget.
  std::uint64_t payload_bits = 0;
  /// Scales, zero points and σ at 16 bits each.
  std::uint64_t overhead_bits = 0;
};

SizeBreakdown size_breakdown(const CompressedMatrix& cm);

/// A tensor passed through uncompressed, values rounded to binary16.
struct RawEntry {
  Tensor tensor;

  friend bool operator==(const RawEntry&, const RawEntry&) = default;
};

using PackageEntry = std::variant<CompressedMatrix, RawEntry>;

struct DeltaPackage {
  std::vector<std::pair<std::string, PackageEntry>> entries;
  double alpha = 0.0;
  std::string schedule_spec;
  std::uint64_t backbone_checksum = 0;
  std::size_t group_size = kDefaultGroupSize;

  friend bool operator==(const DeltaPackage&, const DeltaPackage&) = default;
};

struct ModelCompressOptions {
  std::size_t group_size = kDefaultGroupSize;
  /// Glob patterns (fnmatch) of 2-D tensors to store raw instead.
  std::vector<std::string> exclude;
  /// Use Gaussian calibration (h_in × 512) for tensors without calibration.
  bool synthetic_calibration = false;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

using CalibrationSet = std::map<std::string, Matrix, std::less<>>;

DeltaPackage compress_model(const DeltaWeights& delta, const CalibrationSet& calibration, std::string_view spec,
                            double alpha, const ModelCompressOptions& options = {});

DeltaWeights decompress_package(const DeltaPackage& package);

struct PackageSize {
  std::uint64_t payload_bits = 0;
  std::uint64_t overhead_bits = 0;
  /// Bits of raw (uncompressed) entries.
  std::uint64_t raw_bits = 0;
  /// 16·α·Σ h_out·h_in over compressed entries.
  double budget_bits = 0.0;
};

PackageSize package_size(const DeltaPackage& package);

std::vector<std::uint8_t> serialize_package(const DeltaPackage& package);
DeltaPackage deserialize_package(std::span<const std::uint8_t> bytes);
void save_package(const DeltaPackage& package, const std::filesystem::path& path);
DeltaPackage load_package(const std::filesystem::path& path);

/// Payload byte count implied by each entry's dimensions and schedule under
/// the DCOM layout, computed without serializing.
std::uint64_t predicted_payload_bytes(const DeltaPackage& package);

}  // namespace deltacomp
