#include "deltacomp/pipeline.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <cmath>
#include <optional>

#include "deltacomp/error.hpp"
#include "deltacomp/half.hpp"
#include "deltacomp/parallel.hpp"

namespace deltacomp {

namespace {

Matrix round_matrix_to_half(const Matrix& m) {
  Matrix out = m;
  for (float& v : out.data()) {
    v = round_to_half(v);
    if (!std::isfinite(v)) throw Error(ErrorCode::InvalidArgument, "value overflows binary16 storage");
  }
  return out;
}

Matrix scale_rows(const Matrix& m, std::span<const float> factors) {
  Matrix out = m;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (float& v : out.row(r)) v = static_cast<float>(static_cast<double>(v) * factors[r]);
  return out;
}

// Dequantized (or stored) factor slices of one group.
std::pair<Matrix, Matrix> group_factors(const FactorGroup& group) {
  if (const auto* half = std::get_if<HalfFactors>(&group.factors)) return {half->u, half->vt};
  const auto& q = std::get<QuantizedFactors>(group.factors);
  return {dequantize(q.u), dequantize(q.vt)};
}

void check_group_shapes(const CompressedMatrix& cm, const FactorGroup& g) {
  const std::size_t w = g.range.width();
  auto check = [&](std::size_t rows, std::size_t cols, std::size_t er, std::size_t ec) {
    if (rows != er || cols != ec) throw Error(ErrorCode::CorruptData, "factor group shape does not match its rank range");
  };
  if (g.range.r_end > cm.sigma.size()) throw Error(ErrorCode::CorruptData, "group rank range exceeds sigma length");
  if (const auto* half = std::get_if<HalfFactors>(&g.factors)) {
    check(half->u.rows(), half->u.cols(), cm.h_out, w);
    check(half->vt.rows(), half->vt.cols(), w, cm.h_in);
  } else {
    const auto& q = std::get<QuantizedFactors>(g.factors);
    check(q.u.rows, q.u.cols, cm.h_out, w);
    check(q.vt.rows, q.vt.cols, w, cm.h_in);
    validate(q.u);
    validate(q.vt);
  }
}

// Reads factor rows of one group without materializing the slices.
class RowSource {
 public:
  explicit RowSource(const FactorGroup& g) : group_(g) {}

  void u_row(std::size_t r, std::span<float> out) const { row(r, out, true); }
  void vt_row(std::size_t r, std::span<float> out) const { row(r, out, false); }

 private:
  void row(std::size_t r, std::span<float> out, bool left) const {
    if (const auto* half = std::get_if<HalfFactors>(&group_.factors)) {
      const Matrix& m = left ? half->u : half->vt;
      std::copy(m.row(r).begin(), m.row(r).end(), out.begin());
      return;
    }
    const auto& q = std::get<QuantizedFactors>(group_.factors);
    dequantize_row(left ? q.u : q.vt, r, out);
  }

  const FactorGroup& group_;
};

bool excluded(const std::string& name, const std::vector<std::string>& patterns) {
  return std::any_of(patterns.begin(), patterns.end(),
                     [&](const std::string& p) { return fnmatch(p.c_str(), name.c_str(), 0) == 0; });
}

}  // namespace

CompressedMatrix compress_factors(const SvdResult& svd, std::size_t h_out, std::size_t h_in, const Matrix& x,
                                  const PrecisionSchedule& schedule, const CompressOptions& options) {
  validate_schedule(schedule, h_out, h_in);
  const std::size_t ranks = schedule.total_ranks();
  if (ranks > std::min(h_out, h_in)) {
    throw Error(ErrorCode::RankOverflow, "schedule needs " + std::to_string(ranks) + " ranks but a " +
                                             std::to_string(h_out) + "x" + std::to_string(h_in) + " matrix has at most " +
                                             std::to_string(std::min(h_out, h_in)));
  }
  if (ranks > svd.rank() || svd.u.rows() != h_out || svd.v.rows() != h_in) {
    throw Error(ErrorCode::DimensionMismatch, "SVD factors do not cover the schedule");
  }
  if (options.calibration_aware && x.rows() != h_in) {
    throw Error(ErrorCode::DimensionMismatch,
                "calibration " + x.shape_string() + " does not match input dimension " + std::to_string(h_in));
  }
  if (options.group_size == 0) throw Error(ErrorCode::InvalidArgument, "group_size must be positive");

  CompressedMatrix cm;
  cm.h_out = h_out;
  cm.h_in = h_in;
  cm.group_size = options.group_size;
  cm.schedule = schedule;
  cm.sigma.resize(ranks);
  for (std::size_t i = 0; i < ranks; ++i) cm.sigma[i] = round_to_half(svd.sigma[i]);

  std::optional<HessianFactor> input_hessian;
  for (const auto& range : schedule.groups) {
    if (range.width() == 0) continue;
    Matrix u = column_slice(svd.u, range.r_begin, range.r_end);
    Matrix vt = transpose(column_slice(svd.v, range.r_begin, range.r_end));
    FactorGroup group{range, HalfFactors{}};

    if (range.bits == 16) {
      group.factors = HalfFactors{round_matrix_to_half(u), round_matrix_to_half(vt)};
    } else if (range.bits == 1) {
      group.factors = QuantizedFactors{sign_quantize(u, ParamPrecision::Half), sign_quantize(vt, ParamPrecision::Half)};
    } else if (!options.calibration_aware) {
      group.factors = QuantizedFactors{rtn_quantize(u, range.bits, options.group_size, ParamPrecision::Half),
                                       rtn_quantize(vt, range.bits, options.group_size, ParamPrecision::Half)};
    } else {
      if (!input_hessian) input_hessian = HessianFactor::from_calibration(x);
      QuantizedTensor vt_q = gptq_quantize(vt, *input_hessian, range.bits, options.group_size, ParamPrecision::Half).tensor;
      // U sees the activations produced by the already-quantized V slice.
      const std::span<const float> sigma_g(cm.sigma.data() + range.r_begin, range.width());
      const Matrix u_input = matmul(scale_rows(dequantize(vt_q), sigma_g), x);
      QuantizedTensor u_q = gptq_quantize(u, u_input, range.bits, options.group_size, ParamPrecision::Half).tensor;
      group.factors = QuantizedFactors{std::move(u_q), std::move(vt_q)};
    }
    cm.groups.push_back(std::move(group));
  }
  return cm;
}

CompressedMatrix compress_matrix(const Matrix& delta, const Matrix& x, const PrecisionSchedule& schedule,
                                 const CompressOptions& options) {
  const std::size_t ranks = schedule.total_ranks();
  if (ranks > std::min(delta.rows(), delta.cols())) {
    throw Error(ErrorCode::RankOverflow, "schedule needs " + std::to_string(ranks) + " ranks but the delta is " +
                                             delta.shape_string());
  }
  if (ranks == 0) {
    validate_schedule(schedule, delta.rows(), delta.cols());
    CompressedMatrix cm;
    cm.h_out = delta.rows();
    cm.h_in = delta.cols();
    cm.group_size = options.group_size;
    cm.schedule = schedule;
    return cm;
  }
  return compress_factors(thin_svd(delta, ranks), delta.rows(), delta.cols(), x, schedule, options);
}

Matrix decompress_group(const CompressedMatrix& cm, std::size_t group_index) {
  const FactorGroup& g = cm.groups.at(group_index);
  check_group_shapes(cm, g);
  auto [u, vt] = group_factors(g);
  const std::span<const float> sigma_g(cm.sigma.data() + g.range.r_begin, g.range.width());
  return matmul(transpose(scale_rows(transpose(u), sigma_g)), vt);
}

Matrix decompress_matrix(const CompressedMatrix& cm) {
  std::vector<std::pair<Matrix, Matrix>> factors;
  for (const auto& g : cm.groups) {
    check_group_shapes(cm, g);
    factors.push_back(group_factors(g));
  }
  Matrix out(cm.h_out, cm.h_in);
  std::vector<double> acc(cm.h_in);
  for (std::size_t i = 0; i < cm.h_out; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t gi = 0; gi < cm.groups.size(); ++gi) {
      const auto& [u, vt] = factors[gi];
      const std::size_t begin = cm.groups[gi].range.r_begin;
      for (std::size_t k = 0; k < u.cols(); ++k) {
        const double coef = static_cast<double>(u(i, k)) * cm.sigma[begin + k];
        if (coef == 0.0) continue;
        const float* vrow = vt.row(k).data();
        for (std::size_t j = 0; j < cm.h_in; ++j) acc[j] += coef * vrow[j];
      }
    }
    float* orow = out.row(i).data();
    for (std::size_t j = 0; j < cm.h_in; ++j) orow[j] = static_cast<float>(acc[j]);
  }
  return out;
}

Matrix fused_apply_batch(const CompressedMatrix& cm, const Matrix& x) {
  if (x.rows() != cm.h_in) {
    throw Error(ErrorCode::DimensionMismatch,
                "input " + x.shape_string() + " does not match delta input dimension " + std::to_string(cm.h_in));
  }
  for (const auto& g : cm.groups) check_group_shapes(cm, g);
  const std::size_t batch = x.cols();
  const std::size_t ranks = cm.sigma.size();

  // t = diag(σ) · V̂ᵀ · X, one dequantized row of V̂ᵀ at a time.
  std::vector<double> t(ranks * batch, 0.0);
  std::vector<float> vrow(cm.h_in);
  for (const auto& g : cm.groups) {
    const RowSource source(g);
    for (std::size_t k = 0; k < g.range.width(); ++k) {
      source.vt_row(k, vrow);
      double* trow = &t[(g.range.r_begin + k) * batch];
      for (std::size_t j = 0; j < cm.h_in; ++j) {
        const double v = vrow[j];
        if (v == 0.0) continue;
        const float* xrow = x.row(j).data();
        for (std::size_t b = 0; b < batch; ++b) trow[b] += v * xrow[b];
      }
      const double s = cm.sigma[g.range.r_begin + k];
      for (std::size_t b = 0; b < batch; ++b) trow[b] *= s;
    }
  }

  // y = Û · t, one dequantized row of Û at a time.
  Matrix y(cm.h_out, batch);
  std::vector<double> acc(batch);
  std::vector<std::vector<float>> urows;
  for (const auto& g : cm.groups) urows.emplace_back(g.range.width());
  for (std::size_t i = 0; i < cm.h_out; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t gi = 0; gi < cm.groups.size(); ++gi) {
      const auto& g = cm.groups[gi];
      RowSource(g).u_row(i, urows[gi]);
      for (std::size_t k = 0; k < g.range.width(); ++k) {
        const double u = urows[gi][k];
        const double* trow = &t[(g.range.r_begin + k) * batch];
        for (std::size_t b = 0; b < batch; ++b) acc[b] += u * trow[b];
      }
    }
    for (std::size_t b = 0; b < batch; ++b) y(i, b) = static_cast<float>(acc[b]);
  }
  return y;
}

std::vector<float> fused_apply(const CompressedMatrix& cm, std::span<const float> x) {
  if (x.size() != cm.h_in) {
    throw Error(ErrorCode::DimensionMismatch, "input of length " + std::to_string(x.size()) +
                                                  " does not match delta input dimension " + std::to_string(cm.h_in));
  }
  const Matrix column(cm.h_in, 1, std::vector<float>(x.begin(), x.end()));
  const Matrix y = fused_apply_batch(cm, column);
  return {y.data().begin(), y.data().end()};
}

std::vector<float> fused_apply(const CompressedMatrix& cm, std::span<const float> x, const Matrix& backbone) {
  if (backbone.rows() != cm.h_out || backbone.cols() != cm.h_in) {
    throw Error(ErrorCode::DimensionMismatch, "backbone " + backbone.shape_string() + " does not match delta " +
                                                  std::to_string(cm.h_out) + "x" + std::to_string(cm.h_in));
  }
  std::vector<float> y = fused_apply(cm, x);
  for (std::size_t i = 0; i < cm.h_out; ++i) {
    double s = 0.0;
    auto row = backbone.row(i);
    for (std::size_t j = 0; j < cm.h_in; ++j) s += static_cast<double>(row[j]) * x[j];
    y[i] = static_cast<float>(s + y[i]);
  }
  return y;
}

SizeBreakdown size_breakdown(const CompressedMatrix& cm) {
  SizeBreakdown s;
  s.overhead_bits = 16ULL * cm.sigma.size();
  for (const auto& g : cm.groups) {
    s.payload_bits += static_cast<std::uint64_t>(g.range.bits) * g.range.width() * (cm.h_out + cm.h_in);
    if (const auto* q = std::get_if<QuantizedFactors>(&g.factors)) {
      s.overhead_bits += 16ULL * (q->u.scales.size() + q->u.zeros.size() + q->vt.scales.size() + q->vt.zeros.size());
    }
  }
  return s;
}

DeltaPackage compress_model(const DeltaWeights& delta, const CalibrationSet& calibration, std::string_view spec,
                            double alpha, const ModelCompressOptions& options) {
  parse_schedule_spec(spec);
  const auto& entries = delta.tensors.entries();
  std::vector<bool> compress(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, tensor] = entries[i];
    compress[i] = !tensor.is_vector && !excluded(name, options.exclude);
    if (compress[i] && !options.synthetic_calibration && !calibration.contains(name)) {
      throw Error(ErrorCode::MissingCalibration, "no calibration input for tensor '" + name + "'");
    }
  }

  std::vector<PackageEntry> results(entries.size());
  parallel_for(entries.size(), options.threads, [&](std::size_t i) {
    const auto& [name, tensor] = entries[i];
    if (!compress[i]) {
      results[i] = RawEntry{Tensor{round_matrix_to_half(tensor.values), tensor.is_vector}};
      return;
    }
    const Matrix& w = tensor.values;
    Matrix synthetic;
    const Matrix* x = nullptr;
    if (auto it = calibration.find(name); it != calibration.end()) {
      x = &it->second;
    } else {
      Rng rng = Rng::for_stream(options.seed, "calibration:" + name);
      synthetic = gaussian_matrix(rng, w.cols(), kSyntheticCalibrationSamples);
      x = &synthetic;
    }
    const PrecisionSchedule schedule = make_schedule(spec, alpha, w.rows(), w.cols());
    results[i] = compress_matrix(w, *x, schedule, CompressOptions{options.group_size, true});
  });

  DeltaPackage package;
  package.alpha = alpha;
  package.schedule_spec = std::string(spec);
  package.backbone_checksum = delta.backbone_checksum;
  package.group_size = options.group_size;
  for (std::size_t i = 0; i < entries.size(); ++i) package.entries.emplace_back(entries[i].first, std::move(results[i]));
  return package;
}

DeltaWeights decompress_package(const DeltaPackage& package) {
  DeltaWeights out;
  out.backbone_checksum = package.backbone_checksum;
  for (const auto& [name, entry] : package.entries) {
    if (const auto* raw = std::get_if<RawEntry>(&entry)) {
      out.tensors.add(name, raw->tensor);
    } else {
      out.tensors.add(name, Tensor{decompress_matrix(std::get<CompressedMatrix>(entry)), false});
    }
  }
  return out;
}

PackageSize package_size(const DeltaPackage& package) {
  PackageSize s;
  for (const auto& [name, entry] : package.entries) {
    if (const auto* raw = std::get_if<RawEntry>(&entry)) {
      s.raw_bits += 16ULL * raw->tensor.values.size();
      continue;
    }
    const auto& cm = std::get<CompressedMatrix>(entry);
    const SizeBreakdown b = size_breakdown(cm);
    s.payload_bits += b.payload_bits;
    s.overhead_bits += b.overhead_bits;
    s.budget_bits += 16.0 * package.alpha * static_cast<double>(cm.h_out) * static_cast<double>(cm.h_in);
  }
  return s;
}

}  // namespace deltacomp
