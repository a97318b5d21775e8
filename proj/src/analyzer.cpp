#include "deltacomp/analyzer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>

#include "deltacomp/error.hpp"
#include "deltacomp/quantizers.hpp"

namespace deltacomp {

namespace {

void check_activation_shapes(const Matrix& w, const Matrix& w_hat, const Matrix& x) {
  if (w.rows() != w_hat.rows() || w.cols() != w_hat.cols() || x.rows() != w.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "activation error of " + w.shape_string() + " vs " +
                                                  w_hat.shape_string() + " on input " + x.shape_string());
  }
}

// Σ over rows and samples of ((W − Ŵ)[:, cols] · X[cols, :])².
double restricted_error_sum(const Matrix& w, const Matrix& w_hat, const Matrix& x, const std::vector<std::size_t>& cols) {
  double total = 0.0;
  std::vector<double> acc(x.cols());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t k : cols) {
      const double d = static_cast<double>(w(r, k)) - static_cast<double>(w_hat(r, k));
      if (d == 0.0) continue;
      const float* xrow = x.row(k).data();
      for (std::size_t j = 0; j < x.cols(); ++j) acc[j] += d * xrow[j];
    }
    for (double a : acc) total += a * a;
  }
  return total;
}

std::string format_fixed(double value, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, value);
  return buf;
}

}  // namespace

// Modified Gram–Schmidt on the columns of a Gaussian matrix.
Matrix random_orthonormal(Rng& rng, std::size_t n, std::size_t r) {
  if (r > n) throw Error(ErrorCode::InvalidArgument, "cannot draw " + std::to_string(r) + " orthonormal columns in R^" + std::to_string(n));
  std::vector<double> q(n * r);
  for (double& v : q) v = rng.next_gaussian();
  // Column-major working copy: column j at q[j*n].
  for (std::size_t j = 0; j < r; ++j) {
    double* qj = &q[j * n];
    for (std::size_t i = 0; i < j; ++i) {
      const double* qi = &q[i * n];
      double proj = 0.0;
      for (std::size_t k = 0; k < n; ++k) proj += qi[k] * qj[k];
      for (std::size_t k = 0; k < n; ++k) qj[k] -= proj * qi[k];
    }
    double norm = 0.0;
    for (std::size_t k = 0; k < n; ++k) norm += qj[k] * qj[k];
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < n; ++k) qj[k] /= norm;
  }
  Matrix out(n, r);
  for (std::size_t j = 0; j < r; ++j)
    for (std::size_t k = 0; k < n; ++k) out(k, j) = static_cast<float>(q[j * n + k]);
  return out;
}

double activation_error(const Matrix& w, const Matrix& w_hat, const Matrix& x) {
  check_activation_shapes(w, w_hat, x);
  const double count = static_cast<double>(w.rows()) * static_cast<double>(x.cols());
  if (count == 0.0) return 0.0;
  return quantization_objective(w, w_hat, x) / count;
}

double outlier_activation_error(const Matrix& w, const Matrix& w_hat, const Matrix& x,
                                const std::vector<std::size_t>& columns) {
  check_activation_shapes(w, w_hat, x);
  for (std::size_t c : columns)
    if (c >= w.cols()) throw Error(ErrorCode::InvalidArgument, "outlier column " + std::to_string(c) + " out of range");
  const double count = static_cast<double>(w.rows()) * static_cast<double>(x.cols());
  if (count == 0.0) return 0.0;
  return restricted_error_sum(w, w_hat, x, columns) / count;
}

std::array<IndexRange, 3> layer_bins(std::size_t n_layers) {
  if (n_layers < 3) throw Error(ErrorCode::InvalidArgument, "layer binning needs at least 3 layers");
  const std::size_t low_end = n_layers * 11 / 32;
  const std::size_t mid_end = n_layers * 22 / 32;
  return {IndexRange{0, low_end}, IndexRange{low_end, mid_end}, IndexRange{mid_end, n_layers}};
}

std::vector<std::size_t> outlier_columns(const Matrix& w, double fraction) {
  if (!(fraction > 0.0) || fraction > 1.0) throw Error(ErrorCode::InvalidArgument, "outlier fraction must lie in (0, 1]");
  if (w.cols() == 0) return {};
  std::vector<double> score(w.cols(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) score[c] += std::abs(static_cast<double>(w(r, c)));
  const auto count = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(w.cols()))));
  std::vector<std::size_t> order(w.cols());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  order.resize(std::min(count, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

Matrix synth_longtail_delta(Rng& rng, std::size_t h_out, std::size_t h_in, double decay, double noise,
                            const LongTailOptions& options) {
  if (!(decay > 0.0)) throw Error(ErrorCode::InvalidArgument, "decay must be positive");
  const std::size_t rank = options.rank ? std::min(options.rank, std::min(h_out, h_in)) : std::min(h_out, h_in);
  const Matrix u = random_orthonormal(rng, h_out, rank);
  Matrix v = random_orthonormal(rng, h_in, rank);
  for (std::size_t i = 0; i < h_in; ++i)
    for (std::size_t k = 0; k < rank; ++k)
      v(i, k) = static_cast<float>(v(i, k) * options.sigma0 * std::pow(static_cast<double>(k + 1), -decay));
  Matrix delta = matmul(u, transpose(v));
  if (noise != 0.0) {
    const Matrix g = gaussian_matrix(rng, h_out, h_in);
    auto d = delta.data();
    auto n = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(d[i] + noise * n[i]);
  }
  return delta;
}

SyntheticCase synthetic_case(std::uint64_t seed, std::size_t h_out, std::size_t h_in, double decay, double noise,
                             std::size_t samples) {
  SyntheticCase c;
  c.seed = seed;
  c.decay = decay;
  Rng delta_rng = Rng::for_stream(seed, "delta");
  c.delta = synth_longtail_delta(delta_rng, h_out, h_in, decay, noise);
  Rng x_rng = Rng::for_stream(seed, "activations");
  c.x = gaussian_matrix(x_rng, h_in, samples);
  return c;
}

SyntheticCase suite_case(std::size_t index, std::size_t hidden) {
  if (index >= kSuiteSize) {
    throw Error(ErrorCode::InvalidArgument, "suite index " + std::to_string(index) + " is outside [0, " +
                                                std::to_string(kSuiteSize) + ")");
  }
  return synthetic_case(index, hidden, hidden, index % 2 == 0 ? 0.8 : 1.2);
}

std::string method_label(Method method) {
  switch (method) {
    case Method::LowRank: return "low-rank-16";
    case Method::Sign: return "sign-1bit";
    case Method::Single: return "single-3";
    case Method::Triple: return "triple-8+3+2";
  }
  return "unknown";
}

std::vector<MethodResult> compare_methods(const Matrix& delta, const Matrix& x, double alpha, const CompareOptions& options) {
  const std::size_t h_out = delta.rows();
  const std::size_t h_in = delta.cols();
  if (x.rows() != h_in) {
    throw Error(ErrorCode::DimensionMismatch, "calibration " + x.shape_string() + " does not match delta " + delta.shape_string());
  }
  const PrecisionSchedule low_rank = make_schedule("16", alpha, h_out, h_in);
  const PrecisionSchedule single = make_schedule("3", alpha, h_out, h_in);
  const PrecisionSchedule triple = make_schedule("8+3+2", alpha, h_out, h_in);
  const std::size_t ranks = std::max({low_rank.total_ranks(), single.total_ranks(), triple.total_ranks()});
  if (ranks > std::min(h_out, h_in)) {
    throw Error(ErrorCode::RankOverflow, "budget needs " + std::to_string(ranks) + " ranks for " + delta.shape_string());
  }
  const auto outliers = outlier_columns(delta, options.outlier_fraction);
  const CompressOptions compress{options.group_size, options.calibration_aware};

  std::optional<SvdResult> svd;
  if (ranks > 0) svd = thin_svd(delta, ranks);
  auto reconstruct = [&](const PrecisionSchedule& schedule) {
    if (schedule.total_ranks() == 0) return Matrix(h_out, h_in);
    return decompress_matrix(compress_factors(*svd, h_out, h_in, x, schedule, compress));
  };

  std::vector<MethodResult> results;
  for (Method m : kAllMethods) {
    Matrix approx;
    std::uint64_t bits = 0;
    switch (m) {
      case Method::LowRank:
        approx = reconstruct(low_rank);
        bits = schedule_payload_bits(low_rank, h_out, h_in);
        break;
      case Method::Sign:
        approx = dequantize(sign_quantize(delta, ParamPrecision::Half));
        bits = static_cast<std::uint64_t>(h_out) * h_in;
        break;
      case Method::Single:
        approx = reconstruct(single);
        bits = schedule_payload_bits(single, h_out, h_in);
        break;
      case Method::Triple:
        approx = reconstruct(triple);
        bits = schedule_payload_bits(triple, h_out, h_in);
        break;
    }
    results.push_back({m, activation_error(delta, approx, x), outlier_activation_error(delta, approx, x, outliers), bits});
  }
  return results;
}

void ErrorReport::add(const std::vector<MethodResult>& results, const std::string& param_kind, const std::string& layer_bin) {
  for (const auto& r : results) {
    rows.push_back({method_label(r.method), param_kind, layer_bin, "all", r.mse_all});
    rows.push_back({method_label(r.method), param_kind, layer_bin, "outliers", r.mse_outliers});
  }
}

void write_csv(const ErrorReport& report, std::ostream& out) {
  out << "method,param_kind,layer_bin,scope,mse\n";
  char buf[64];
  for (const auto& row : report.rows) {
    std::snprintf(buf, sizeof(buf), "%.9e", row.mse);
    out << row.method << ',' << row.param_kind << ',' << row.layer_bin << ',' << row.scope << ',' << buf << '\n';
  }
}

void write_table(const ErrorReport& report, std::ostream& out) {
  std::array<std::size_t, 5> width{6, 10, 9, 8, 12};
  std::vector<std::array<std::string, 5>> cells;
  for (const auto& row : report.rows) {
    cells.push_back({row.method, row.param_kind, row.layer_bin, row.scope, format_fixed(row.mse * 100.0, 4)});
    for (std::size_t i = 0; i < 5; ++i) width[i] = std::max(width[i], cells.back()[i].size());
  }
  const std::array<std::string, 5> head{"method", "param_kind", "layer_bin", "scope", "mse (x1e-2)"};
  auto emit = [&](const std::array<std::string, 5>& r) {
    for (std::size_t i = 0; i < 5; ++i) {
      out << r[i] << std::string(width[i] - std::min(width[i], r[i].size()) + 2, ' ');
    }
    out << '\n';
  };
  emit(head);
  for (const auto& r : cells) emit(r);
}

ActivationProxy::ActivationProxy(std::vector<std::pair<Matrix, Matrix>> pairs, double alpha, std::size_t group_size)
    : alpha_(alpha), group_size_(group_size) {
  if (pairs.empty()) throw Error(ErrorCode::InvalidArgument, "proxy objective needs at least one delta");
  h_out_ = pairs.front().first.rows();
  h_in_ = pairs.front().first.cols();
  for (auto& [delta, x] : pairs) {
    if (delta.rows() != h_out_ || delta.cols() != h_in_ || x.rows() != h_in_) {
      throw Error(ErrorCode::DimensionMismatch, "proxy deltas must share one shape and match their calibration");
    }
    SvdResult svd = thin_svd(delta, std::min(h_out_, h_in_));
    cases_.push_back({std::move(delta), std::move(x), std::move(svd)});
  }
}

double ActivationProxy::operator()(const Allocation& allocation) const { return evaluate(to_schedule(allocation, alpha_)); }

double ActivationProxy::evaluate(const PrecisionSchedule& schedule) const {
  double total = 0.0;
  for (const auto& c : cases_) {
    const Matrix approx = schedule.total_ranks() == 0
                              ? Matrix(h_out_, h_in_)
                              : decompress_matrix(compress_factors(c.svd, h_out_, h_in_, c.x, schedule,
                                                                   CompressOptions{group_size_, true}));
    total += activation_error(c.delta, approx, c.x);
  }
  return total / static_cast<double>(cases_.size());
}

}  // namespace deltacomp
