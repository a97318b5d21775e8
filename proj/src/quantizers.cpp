#include "deltacomp/quantizers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "deltacomp/error.hpp"
#include "deltacomp/half.hpp"

namespace deltacomp {

namespace {

constexpr double kDampingFraction = 0.01;
constexpr int kDampingRetries = 3;
constexpr double kSmallestHalf = 0x1p-24;

struct Grid {
  double scale = 0.0;
  double zero = 0.0;
};

double to_half_checked(double v) {
  const float h = round_to_half(static_cast<float>(v));
  if (!std::isfinite(h)) {
    throw Error(ErrorCode::InvalidArgument, "quantization parameter " + std::to_string(v) + " overflows binary16");
  }
  return h;
}

Grid make_grid(std::span<const float> values, unsigned bits, ParamPrecision precision) {
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  Grid g;
  g.zero = *lo;
  if (*hi != *lo) g.scale = (static_cast<double>(*hi) - static_cast<double>(*lo)) / ((1u << bits) - 1);
  if (precision == ParamPrecision::Half) {
    g.zero = to_half_checked(g.zero);
    if (g.scale != 0.0) g.scale = std::max(to_half_checked(g.scale), kSmallestHalf);
  }
  return g;
}

// Round half away from zero, clamped onto the grid.
std::uint8_t code_for(double x, const Grid& g, unsigned bits) {
  if (g.scale == 0.0) return 0;
  const double max_code = static_cast<double>((1u << bits) - 1);
  const double c = std::round((x - g.zero) / g.scale);
  return static_cast<std::uint8_t>(std::clamp(c, 0.0, max_code));
}

double grid_value(std::uint8_t code, const Grid& g) { return g.zero + g.scale * code; }

void check_bits(unsigned bits) {
  if (bits != 2 && bits != 3 && bits != 4 && bits != 8) {
    throw Error(ErrorCode::InvalidArgument, "group quantization supports 2, 3, 4 or 8 bits, got " + std::to_string(bits));
  }
}

std::vector<Grid> grids_for(const Matrix& w, unsigned bits, std::size_t group_size, ParamPrecision precision) {
  const std::size_t groups = (w.cols() + group_size - 1) / group_size;
  std::vector<Grid> grids;
  grids.reserve(w.rows() * groups);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    auto row = w.row(r);
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t begin = g * group_size;
      const std::size_t end = std::min(begin + group_size, w.cols());
      grids.push_back(make_grid(row.subspan(begin, end - begin), bits, precision));
    }
  }
  return grids;
}

QuantizedTensor empty_tensor(const Matrix& w, unsigned bits, std::size_t group_size, const std::vector<Grid>& grids) {
  QuantizedTensor q;
  q.rows = w.rows();
  q.cols = w.cols();
  q.bits = bits;
  q.group_size = group_size;
  q.scales.reserve(grids.size());
  q.zeros.reserve(grids.size());
  for (const Grid& g : grids) {
    q.scales.push_back(g.scale);
    q.zeros.push_back(g.zero);
  }
  return q;
}

// Lower Cholesky factor in place (row-major n × n); false if not positive definite.
bool cholesky_lower(std::vector<double>& a, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (!(d > 0.0) || !std::isfinite(d)) return false;
    const double ljj = std::sqrt(d);
    a[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      const double* li = &a[i * n];
      const double* lj = &a[j * n];
      for (std::size_t k = 0; k < j; ++k) s -= li[k] * lj[k];
      a[i * n + j] = s / ljj;
    }
    for (std::size_t k = j + 1; k < n; ++k) a[j * n + k] = 0.0;
  }
  return true;
}

// (L Lᵀ)⁻¹ from a lower Cholesky factor.
std::vector<double> inverse_from_cholesky(const std::vector<double>& l, std::size_t n) {
  // Linv lower triangular, row-major.
  std::vector<double> linv(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    linv[i * n + i] = 1.0 / l[i * n + i];
    for (std::size_t j = 0; j < i; ++j) {
      double s = 0.0;
      for (std::size_t k = j; k < i; ++k) s += l[i * n + k] * linv[k * n + j];
      linv[i * n + j] = -s / l[i * n + i];
    }
  }
  // Linvᵀ Linv
  std::vector<double> inv(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t k = i; k < n; ++k) s += linv[k * n + i] * linv[k * n + j];
      inv[i * n + j] = s;
      inv[j * n + i] = s;
    }
  }
  return inv;
}

}  // namespace

bool is_quantizer_bits(unsigned bits) noexcept { return bits == 1 || bits == 2 || bits == 3 || bits == 4 || bits == 8; }

std::size_t QuantizedTensor::groups_per_row() const noexcept {
  if (bits == 1 || group_size == 0) return 0;
  return (cols + group_size - 1) / group_size;
}

std::size_t QuantizedTensor::scale_count() const noexcept { return bits == 1 ? 1 : rows * groups_per_row(); }

QuantizedTensor rtn_quantize(const Matrix& w, unsigned bits, std::size_t group_size, ParamPrecision precision) {
  check_bits(bits);
  if (group_size == 0) throw Error(ErrorCode::InvalidArgument, "group_size must be positive");
  const auto grids = grids_for(w, bits, group_size, precision);
  QuantizedTensor q = empty_tensor(w, bits, group_size, grids);
  const std::size_t groups = q.groups_per_row();
  std::vector<std::uint8_t> codes(w.size());
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c)
      codes[r * w.cols() + c] = code_for(w(r, c), grids[r * groups + c / group_size], bits);
  q.codes = pack_bits(codes, bits);
  return q;
}

HessianFactor HessianFactor::from_calibration(const Matrix& x) {
  if (x.cols() == 0) throw Error(ErrorCode::InvalidArgument, "calibration input needs at least one sample");
  HessianFactor f;
  const std::size_t d = x.rows();
  f.dim_ = d;
  f.gram_.assign(d * d, 0.0);
  std::vector<double> xd(x.data().begin(), x.data().end());
  const std::size_t n = x.cols();
  for (std::size_t i = 0; i < d; ++i) {
    const double* xi = &xd[i * n];
    for (std::size_t j = 0; j <= i; ++j) {
      const double* xj = &xd[j * n];
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += xi[k] * xj[k];
      f.gram_[i * d + j] = s;
      f.gram_[j * d + i] = s;
    }
  }
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < d; ++i) mean_diag += f.gram_[i * d + i];
  mean_diag /= static_cast<double>(d);
  // An all-zero X carries no information; any positive damping gives RTN.
  double damping = mean_diag > 0.0 ? kDampingFraction * mean_diag : 1.0;

  for (int attempt = 0; attempt <= kDampingRetries; ++attempt, damping *= 10.0) {
    std::vector<double> h = f.gram_;
    for (std::size_t i = 0; i < d; ++i) h[i * d + i] += damping;
    if (!cholesky_lower(h, d)) continue;
    std::vector<double> inv = inverse_from_cholesky(h, d);
    if (!cholesky_lower(inv, d)) continue;
    f.inverse_upper_.assign(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j <= i; ++j) f.inverse_upper_[j * d + i] = inv[i * d + j];
    f.damping_ = damping;
    return f;
  }
  throw Error(ErrorCode::NumericallySingular, "Cholesky failed after damping retries");
}

GptqResult gptq_quantize(const Matrix& w, const Matrix& x, unsigned bits, std::size_t group_size,
                         ParamPrecision precision) {
  if (x.rows() != w.cols()) {
    throw Error(ErrorCode::DimensionMismatch,
                "calibration " + x.shape_string() + " does not match weight " + w.shape_string());
  }
  check_bits(bits);
  return gptq_quantize(w, HessianFactor::from_calibration(x), bits, group_size, precision);
}

GptqResult gptq_quantize(const Matrix& w, const HessianFactor& hessian, unsigned bits, std::size_t group_size,
                         ParamPrecision precision) {
  check_bits(bits);
  if (group_size == 0) throw Error(ErrorCode::InvalidArgument, "group_size must be positive");
  if (hessian.dim() != w.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "Hessian of dimension " + std::to_string(hessian.dim()) +
                                                  " does not match weight " + w.shape_string());
  }
  const std::size_t rows = w.rows();
  const std::size_t cols = w.cols();
  const auto grids = grids_for(w, bits, group_size, precision);
  const std::size_t groups = (cols + group_size - 1) / group_size;

  std::vector<double> work(w.data().begin(), w.data().end());
  std::vector<std::uint8_t> codes(w.size());
  std::vector<double> err(rows);
  const auto upper = hessian.inverse_upper();

  for (std::size_t j = 0; j < cols; ++j) {
    const double diag = upper[j * cols + j];
    for (std::size_t r = 0; r < rows; ++r) {
      const Grid& g = grids[r * groups + j / group_size];
      const double value = work[r * cols + j];
      const std::uint8_t c = code_for(value, g, bits);
      codes[r * cols + j] = c;
      err[r] = (value - grid_value(c, g)) / diag;
    }
    const double* urow = &upper[j * cols];
    for (std::size_t r = 0; r < rows; ++r) {
      const double e = err[r];
      if (e == 0.0) continue;
      double* wr = &work[r * cols];
      for (std::size_t k = j + 1; k < cols; ++k) wr[k] -= e * urow[k];
    }
  }

  GptqResult result;
  result.tensor = empty_tensor(w, bits, group_size, grids);
  result.tensor.codes = pack_bits(codes, bits);

  const auto gram = hessian.gram();
  std::vector<double> diff(cols);
  double objective = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const Grid& g = grids[r * groups + c / group_size];
      diff[c] = static_cast<double>(w(r, c)) - static_cast<double>(static_cast<float>(grid_value(codes[r * cols + c], g)));
    }
    for (std::size_t i = 0; i < cols; ++i) {
      if (diff[i] == 0.0) continue;
      double s = 0.0;
      const double* gi = &gram[i * cols];
      for (std::size_t k = 0; k < cols; ++k) s += gi[k] * diff[k];
      objective += diff[i] * s;
    }
  }
  result.objective = std::max(objective, 0.0);
  return result;
}

QuantizedTensor sign_quantize(const Matrix& w, ParamPrecision precision) {
  double sum = 0.0;
  for (float v : w.data()) sum += std::abs(static_cast<double>(v));
  double gamma = w.size() ? sum / static_cast<double>(w.size()) : 0.0;
  if (precision == ParamPrecision::Half) gamma = to_half_checked(gamma);

  QuantizedTensor q;
  q.rows = w.rows();
  q.cols = w.cols();
  q.bits = 1;
  q.group_size = 0;
  q.scales = {gamma};
  std::vector<std::uint8_t> codes(w.size());
  auto data = w.data();
  for (std::size_t i = 0; i < codes.size(); ++i) codes[i] = data[i] >= 0.0f ? 1 : 0;
  q.codes = pack_bits(codes, 1);
  return q;
}

void validate(const QuantizedTensor& q) {
  if (!is_quantizer_bits(q.bits)) throw Error(ErrorCode::CorruptData, "invalid bit width " + std::to_string(q.bits));
  if (q.bits != 1 && q.group_size == 0) throw Error(ErrorCode::CorruptData, "group_size is zero");
  if (q.codes.size() != packed_size(q.rows * q.cols, q.bits)) {
    throw Error(ErrorCode::CorruptData, "packed code stream has " + std::to_string(q.codes.size()) + " bytes, expected " +
                                            std::to_string(packed_size(q.rows * q.cols, q.bits)));
  }
  if (q.scales.size() != q.scale_count()) throw Error(ErrorCode::CorruptData, "scale count mismatch");
  if (q.zeros.size() != (q.bits == 1 ? 0 : q.scale_count())) throw Error(ErrorCode::CorruptData, "zero-point count mismatch");
  for (double s : q.scales)
    if (!std::isfinite(s) || s < 0.0) throw Error(ErrorCode::CorruptData, "scale is negative or not finite");
  for (double z : q.zeros)
    if (!std::isfinite(z)) throw Error(ErrorCode::CorruptData, "zero point is not finite");
}

void dequantize_row(const QuantizedTensor& q, std::size_t r, std::span<float> out) {
  if (out.size() != q.cols || r >= q.rows) throw Error(ErrorCode::DimensionMismatch, "dequantize_row bounds");
  std::vector<std::uint8_t> codes(q.cols);
  unpack_bits_range(q.codes, r * q.cols, q.bits, codes);
  if (q.bits == 1) {
    const double gamma = q.scales[0];
    for (std::size_t c = 0; c < q.cols; ++c) out[c] = static_cast<float>(codes[c] ? gamma : -gamma);
    return;
  }
  const std::size_t groups = q.groups_per_row();
  for (std::size_t c = 0; c < q.cols; ++c) {
    const std::size_t idx = r * groups + c / q.group_size;
    const Grid g{q.scales[idx], q.zeros[idx]};
    if (g.scale == 0.0 && codes[c] != 0) {
      throw Error(ErrorCode::CorruptData, "non-zero code in a degenerate group at row " + std::to_string(r));
    }
    out[c] = static_cast<float>(grid_value(codes[c], g));
  }
}

Matrix dequantize(const QuantizedTensor& q) {
  validate(q);
  Matrix out(q.rows, q.cols);
  for (std::size_t r = 0; r < q.rows; ++r) dequantize_row(q, r, out.row(r));
  return out;
}

double quantization_objective(const Matrix& w, const Matrix& w_hat, const Matrix& x) {
  if (w.rows() != w_hat.rows() || w.cols() != w_hat.cols() || x.rows() != w.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "objective of " + w.shape_string() + ", " + w_hat.shape_string() +
                                                  " with calibration " + x.shape_string());
  }
  double total = 0.0;
  std::vector<double> acc(x.cols());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < w.cols(); ++k) {
      const double d = static_cast<double>(w(r, k)) - static_cast<double>(w_hat(r, k));
      if (d == 0.0) continue;
      auto xrow = x.row(k);
      for (std::size_t j = 0; j < x.cols(); ++j) acc[j] += d * xrow[j];
    }
    for (double a : acc) total += a * a;
  }
  return total;
}

std::vector<std::uint8_t> pack_bits(std::span<const std::uint8_t> codes, unsigned bits) {
  if (bits == 0 || bits > 8) throw Error(ErrorCode::InvalidArgument, "pack_bits supports 1..8 bits");
  std::vector<std::uint8_t> out(packed_size(codes.size(), bits), 0);
  const unsigned limit = 1u << bits;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const unsigned c = codes[i];
    if (c >= limit) {
      throw Error(ErrorCode::InvalidArgument, "code " + std::to_string(c) + " does not fit in " + std::to_string(bits) + " bits");
    }
    const std::size_t bit = i * bits;
    const std::size_t byte = bit / 8;
    const unsigned shift = bit % 8;
    out[byte] |= static_cast<std::uint8_t>(c << shift);
    if (shift + bits > 8) out[byte + 1] |= static_cast<std::uint8_t>(c >> (8 - shift));
  }
  return out;
}

void unpack_bits_range(std::span<const std::uint8_t> bytes, std::size_t first, unsigned bits, std::span<std::uint8_t> out) {
  if (bits == 0 || bits > 8) throw Error(ErrorCode::InvalidArgument, "unpack_bits supports 1..8 bits");
  if (packed_size(first + out.size(), bits) > bytes.size()) {
    throw Error(ErrorCode::Truncated, "packed stream of " + std::to_string(bytes.size()) + " bytes is too short for " +
                                          std::to_string(first + out.size()) + " codes");
  }
  const unsigned mask = (1u << bits) - 1;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t bit = (first + i) * bits;
    const std::size_t byte = bit / 8;
    const unsigned shift = bit % 8;
    unsigned v = bytes[byte] >> shift;
    if (shift + bits > 8) v |= static_cast<unsigned>(bytes[byte + 1]) << (8 - shift);
    out[i] = static_cast<std::uint8_t>(v & mask);
  }
}

std::vector<std::uint8_t> unpack_bits(std::span<const std::uint8_t> bytes, std::size_t count, unsigned bits) {
  std::vector<std::uint8_t> out(count);
  unpack_bits_range(bytes, 0, bits, out);
  return out;
}

}  // namespace deltacomp
