#include "deltacomp/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "deltacomp/error.hpp"
#include "deltacomp/hash.hpp"

namespace deltacomp {

std::string_view error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "INVALID_ARGUMENT";
    case ErrorCode::DimensionMismatch: return "DIMENSION_MISMATCH";
    case ErrorCode::NameMismatch: return "NAME_MISMATCH";
    case ErrorCode::MissingCalibration: return "MISSING_CALIBRATION";
    case ErrorCode::BudgetExhausted: return "BUDGET_EXHAUSTED";
    case ErrorCode::RankOverflow: return "RANK_OVERFLOW";
    case ErrorCode::Io: return "IO_ERROR";
    case ErrorCode::ChecksumMismatch: return "CHECKSUM_MISMATCH";
    case ErrorCode::Truncated: return "TRUNCATED";
    case ErrorCode::BadMagic: return "BAD_MAGIC";
    case ErrorCode::BadVersion: return "BAD_VERSION";
    case ErrorCode::CorruptData: return "CORRUPT_DATA";
    case ErrorCode::NumericallySingular: return "NUMERICALLY_SINGULAR";
    case ErrorCode::NotConverged: return "NOT_CONVERGED";
  }
  return "UNKNOWN";
}

Matrix::Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw Error(ErrorCode::DimensionMismatch, "matrix data length " + std::to_string(data_.size()) +
                                                  " does not match shape " + shape_string());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<float> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw Error(ErrorCode::DimensionMismatch, "ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

std::string Matrix::shape_string() const {
  return std::to_string(rows_) + "x" + std::to_string(cols_);
}

Rng Rng::for_stream(std::uint64_t seed, std::string_view name) noexcept {
  return Rng(seed ^ fnv1a64(name));
}

std::uint64_t Rng::next_u64() noexcept {
  state_ += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::next_uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1p-53;
}

std::uint64_t Rng::next_below(std::uint64_t bound) noexcept {
  const auto wide = static_cast<unsigned __int128>(next_u64()) * bound;
  return static_cast<std::uint64_t>(wide >> 64);
}

double Rng::next_gaussian() noexcept {
  if (spare_) {
    const double z = *spare_;
    spare_.reset();
    return z;
  }
  const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1p-53;
  const double u2 = static_cast<double>(next_u64() >> 11) * 0x1p-53;
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  return radius * std::cos(angle);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorCode::DimensionMismatch,
                "matmul of " + a.shape_string() + " by " + b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  std::vector<double> acc(b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const float* brow = b.row(k).data();
      for (std::size_t j = 0; j < b.cols(); ++j) acc[j] += aik * brow[j];
    }
    float* orow = out.row(i).data();
    for (std::size_t j = 0; j < b.cols(); ++j) orow[j] = static_cast<float>(acc[j]);
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

namespace {

template <typename Op>
Matrix elementwise(const Matrix& a, const Matrix& b, const char* what, Op op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorCode::DimensionMismatch,
                std::string(what) + " of " + a.shape_string() + " and " + b.shape_string());
  }
  Matrix out(a.rows(), a.cols());
  auto x = a.data();
  auto y = b.data();
  auto z = out.data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = op(x[i], y[i]);
  return out;
}

}  // namespace

Matrix subtract(const Matrix& a, const Matrix& b) {
  return elementwise(a, b, "subtract", [](float x, float y) { return x - y; });
}

Matrix add(const Matrix& a, const Matrix& b) {
  return elementwise(a, b, "add", [](float x, float y) { return x + y; });
}

Matrix column_slice(const Matrix& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.cols()) {
    throw Error(ErrorCode::InvalidArgument, "column slice [" + std::to_string(begin) + ", " +
                                                std::to_string(end) + ") of " + a.shape_string());
  }
  Matrix out(a.rows(), end - begin);
  for (std::size_t i = 0; i < a.rows(); ++i)
    std::copy_n(a.row(i).begin() + static_cast<std::ptrdiff_t>(begin), end - begin, out.row(i).begin());
  return out;
}

double fro_norm(const Matrix& a) {
  double sum = 0.0;
  for (float v : a.data()) sum += static_cast<double>(v) * v;
  return std::sqrt(sum);
}

namespace {

constexpr int kMaxSweeps = 60;
constexpr double kOrthogonalityTol = 1e-12;
// Columns whose norm falls below this fraction of the largest are treated as
// null directions and replaced by an orthonormal completion.
constexpr double kNullColumnTol = 1e-12;

double dot(const double* x, const double* y, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

// One-sided Jacobi on the n columns (length m, m >= n) of `work`, stored
// column-major. Rotations are mirrored into `right` (n × n, column-major).
void jacobi_orthogonalize(std::vector<double>& work, std::vector<double>& right, std::size_t m,
                          std::size_t n) {
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      double* wp = work.data() + p * m;
      for (std::size_t q = p + 1; q < n; ++q) {
        double* wq = work.data() + q * m;
        const double alpha = dot(wp, wp, m);
        const double beta = dot(wq, wq, m);
        const double gamma = dot(wp, wq, m);
        if (std::abs(gamma) <= kOrthogonalityTol * std::sqrt(alpha) * std::sqrt(beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = wp[i];
          const double y = wq[i];
          wp[i] = c * x - s * y;
          wq[i] = s * x + c * y;
        }
        double* vp = right.data() + p * n;
        double* vq = right.data() + q * n;
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i];
          const double y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
    if (!rotated) return;
  }
  throw Error(ErrorCode::NotConverged,
              "one-sided Jacobi did not converge in " + std::to_string(kMaxSweeps) + " sweeps");
}

// Replaces column `target` (length m) with a unit vector orthogonal to every
// column listed in `basis`, drawn from the standard basis by Gram–Schmidt.
void complete_column(std::vector<double>& cols, std::size_t m, std::size_t target,
                     const std::vector<std::size_t>& basis) {
  std::vector<double> candidate(m);
  for (std::size_t e = 0; e < m; ++e) {
    std::fill(candidate.begin(), candidate.end(), 0.0);
    candidate[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t b : basis) {
        const double* col = cols.data() + b * m;
        const double proj = dot(col, candidate.data(), m);
        for (std::size_t i = 0; i < m; ++i) candidate[i] -= proj * col[i];
      }
    }
    const double norm = std::sqrt(dot(candidate.data(), candidate.data(), m));
    if (norm > 0.5) {
      double* out = cols.data() + target * m;
      for (std::size_t i = 0; i < m; ++i) out[i] = candidate[i] / norm;
      return;
    }
  }
  throw Error(ErrorCode::NotConverged, "could not complete orthonormal basis");
}

}  // namespace

SvdResult thin_svd(const Matrix& a, std::size_t r_max) {
  const std::size_t min_dim = std::min(a.rows(), a.cols());
  if (r_max == 0) throw Error(ErrorCode::InvalidArgument, "thin_svd requires r_max >= 1");
  if (r_max > min_dim) {
    throw Error(ErrorCode::InvalidArgument, "thin_svd r_max " + std::to_string(r_max) +
                                                " exceeds min dimension of " + a.shape_string());
  }
  if (!a.all_finite()) throw Error(ErrorCode::InvalidArgument, "thin_svd input is not finite");

  const bool transposed = a.rows() < a.cols();
  const std::size_t m = transposed ? a.cols() : a.rows();
  const std::size_t n = min_dim;

  // Columns of the tall orientation, column-major.
  std::vector<double> work(m * n);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const double v = a(i, j);
      if (transposed) {
        work[i * m + j] = v;
      } else {
        work[j * m + i] = v;
      }
    }
  }
  std::vector<double> right(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) right[i * n + i] = 1.0;

  jacobi_orthogonalize(work, right, m, n);

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) norms[j] = std::sqrt(dot(&work[j * m], &work[j * m], m));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  const double largest = norms[order[0]];
  std::vector<std::size_t> good;
  std::vector<std::size_t> null_cols;
  for (std::size_t k = 0; k < r_max; ++k) {
    const std::size_t j = order[k];
    if (largest > 0.0 && norms[j] > kNullColumnTol * largest) {
      double* col = &work[j * m];
      for (std::size_t i = 0; i < m; ++i) col[i] /= norms[j];
      good.push_back(j);
    } else {
      null_cols.push_back(j);
    }
  }
  for (std::size_t j : null_cols) {
    complete_column(work, m, j, good);
    good.push_back(j);
  }

  Matrix left_out(m, r_max);
  Matrix right_out(n, r_max);
  std::vector<float> sigma(r_max);
  for (std::size_t k = 0; k < r_max; ++k) {
    const std::size_t j = order[k];
    sigma[k] = static_cast<float>(norms[j]);
    for (std::size_t i = 0; i < m; ++i) left_out(i, k) = static_cast<float>(work[j * m + i]);
    for (std::size_t i = 0; i < n; ++i) right_out(i, k) = static_cast<float>(right[j * n + i]);
  }

  SvdResult result;
  result.sigma = std::move(sigma);
  if (transposed) {
    result.u = std::move(right_out);
    result.v = std::move(left_out);
  } else {
    result.u = std::move(left_out);
    result.v = std::move(right_out);
  }

  for (std::size_t k = 0; k < r_max; ++k) {
    std::size_t arg = 0;
    float best = -1.0f;
    for (std::size_t i = 0; i < result.u.rows(); ++i) {
      const float mag = std::abs(result.u(i, k));
      if (mag > best) {
        best = mag;
        arg = i;
      }
    }
    if (result.u(arg, k) < 0.0f) {
      for (std::size_t i = 0; i < result.u.rows(); ++i) result.u(i, k) = -result.u(i, k);
      for (std::size_t i = 0; i < result.v.rows(); ++i) result.v(i, k) = -result.v(i, k);
    }
  }
  return result;
}

Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix out(rows, cols);
  for (float& v : out.data()) v = static_cast<float>(rng.next_gaussian());
  return out;
}

}  // namespace deltacomp
