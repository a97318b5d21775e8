#pragma once

#include <array>
#include <cstddef>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "deltacomp/numerics.hpp"
#include "deltacomp/pipeline.hpp"
#include "deltacomp/planner.hpp"

namespace deltacomp {

/// mean((WX − ŴX)²) over all h_out × n entries.
double activation_error(const Matrix& w, const Matrix& w_hat, const Matrix& x);

/// activation_error with every column of W and Ŵ outside `columns` zeroed.
double outlier_activation_error(const Matrix& w, const Matrix& w_hat, const Matrix& x,
                                const std::vector<std::size_t>& columns);

using IndexRange = std::pair<std::size_t, std::size_t>;

/// Low / medium / high layer ranges: 11, 11 and 10 of 32 layers, scaled
/// proportionally (floored) for other depths, remainder to the last bin.
std::array<IndexRange, 3> layer_bins(std::size_t n_layers);
inline constexpr std::array<const char*, 3> kLayerBinNames{"low", "medium", "high"};

/// max(1, floor(fraction·cols)) columns with the largest L1 norm, ties to
/// the lower index; returned in ascending order.
std::vector<std::size_t> outlier_columns(const Matrix& w, double fraction = 0.01);

/// n × r matrix with orthonormal columns: modified Gram–Schmidt applied to
/// a standard Gaussian draw. Requires r ≤ n.
Matrix random_orthonormal(Rng& rng, std::size_t n, std::size_t r);

struct LongTailOptions {
  /// Largest singular value of the structured part.
  double sigma0 = 4.0;
  /// Number of structured components; 0 means min(h_out, h_in).
  std::size_t rank = 0;
};

/// Σ_i σ0·(i+1)^(−decay)·u_i·v_iᵀ + noise·G with random orthonormal u, v and
/// standard Gaussian G.
Matrix synth_longtail_delta(Rng& rng, std::size_t h_out, std::size_t h_in, double decay, double noise,
                            const LongTailOptions& options = {});

struct SyntheticCase {
  std::uint64_t seed = 0;
  double decay = 0.0;
  Matrix delta;
  /// Gaussian calibration activations, h_in × samples.
  Matrix x;
};

/// Long-tail delta and calibration drawn from independent streams of `seed`.
SyntheticCase synthetic_case(std::uint64_t seed, std::size_t h_out, std::size_t h_in, double decay, double noise = 0.01,
                             std::size_t samples = kSyntheticCalibrationSamples);

/// The fixed evaluation suite: seeds 0..9 on square matrices, decay 0.8 for
/// even seeds and 1.2 for odd ones, noise 0.01.
inline constexpr std::size_t kSuiteSize = 10;
SyntheticCase suite_case(std::size_t index, std::size_t hidden = 256);

enum class Method { LowRank, Sign, Single, Triple };
inline constexpr std::array<Method, 4> kAllMethods{Method::LowRank, Method::Sign, Method::Single, Method::Triple};

std::string method_label(Method method);

struct MethodResult {
  Method method = Method::LowRank;
  double mse_all = 0.0;
  double mse_outliers = 0.0;
  std::uint64_t payload_bits = 0;
};

struct CompareOptions {
  std::size_t group_size = kDefaultGroupSize;
  double outlier_fraction = 0.01;
  bool calibration_aware = true;
};

/// Evaluates 16-bit low-rank truncation, 1-bit sign quantization, the
/// single "3" schedule and the triple "8+3+2" schedule at budget alpha.
std::vector<MethodResult> compare_methods(const Matrix& delta, const Matrix& x, double alpha,
                                          const CompareOptions& options = {});

struct ErrorRow {
  std::string method;
  std::string param_kind;
  std::string layer_bin;
  std::string scope;
  double mse = 0.0;
};

/// Stored values are unscaled; tables conventionally display them ×10⁻².
struct ErrorReport {
  std::vector<ErrorRow> rows;

  void add(const std::vector<MethodResult>& results, const std::string& param_kind, const std::string& layer_bin);
};

void write_csv(const ErrorReport& report, std::ostream& out);
/// Aligned text table with values shown in units of 10⁻².
void write_table(const ErrorReport& report, std::ostream& out);

/// Mean activation error of an allocation's induced schedule over a set of
/// (delta, calibration) pairs. Decompositions are computed once up front, so
/// each call only quantizes. Safe to call concurrently.
class ActivationProxy {
 public:
  ActivationProxy(std::vector<std::pair<Matrix, Matrix>> pairs, double alpha, std::size_t group_size = kDefaultGroupSize);

  double operator()(const Allocation& allocation) const;
  double evaluate(const PrecisionSchedule& schedule) const;

  std::size_t h_out() const noexcept { return h_out_; }
  std::size_t h_in() const noexcept { return h_in_; }

 private:
  struct Case {
    Matrix delta;
    Matrix x;
    SvdResult svd;
  };
  std::vector<Case> cases_;
  double alpha_;
  std::size_t group_size_;
  std::size_t h_out_ = 0;
  std::size_t h_in_ = 0;
};

}  // namespace deltacomp
