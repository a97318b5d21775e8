#include "commands.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <regex>
#include <stdexcept>

#include "alloc_probe.hpp"
#include "deltacomp/analyzer.hpp"
#include "deltacomp/parallel.hpp"
#include "deltacomp/pipeline.hpp"
#include "deltacomp/planner.hpp"

namespace deltacomp::cli {

namespace {

namespace fs = std::filesystem;

std::string fmt(const char* format, ...) {
  char buf[256];
  va_list args;
  va_start(args, format);
  std::vsnprintf(buf, sizeof(buf), format, args);
  va_end(args);
  return buf;
}

std::string describe_schedule(const PrecisionSchedule& schedule) {
  std::string s;
  for (const auto& g : schedule.groups) {
    if (!s.empty()) s += ' ';
    s += std::to_string(g.bits) + "b[" + std::to_string(g.r_begin) + "," + std::to_string(g.r_end) + ")";
  }
  return s.empty() ? "-" : s;
}

// Outputs may not overwrite any input file.
void check_output(const std::string& output, std::initializer_list<const std::string*> inputs) {
  if (output.empty()) throw Error(ErrorCode::InvalidArgument, "--output is required");
  std::error_code ec;
  for (const std::string* in : inputs) {
    if (in->empty()) continue;
    if (fs::exists(output, ec) && fs::equivalent(output, *in, ec)) {
      throw Error(ErrorCode::InvalidArgument, "output '" + output + "' would overwrite input '" + *in + "'");
    }
  }
}

CalibrationSet load_calibration(const std::string& path) {
  CalibrationSet set;
  if (path.empty()) return set;
  const ModelCheckpoint ckpt = load_checkpoint(path);
  for (const auto& [name, tensor] : ckpt.tensors()) set.emplace(name, tensor.values);
  return set;
}

double relative(double num, double den) { return den > 0.0 ? num / den : num; }

// ---------------------------------------------------------------- compress

struct CompressArgs {
  std::string backbone;
  std::string aligned;
  std::string calibration;
  std::string output;
  std::string alpha = "1/16";
  std::string schedule = "8+3+2";
  std::uint64_t seed = 0;
  std::size_t group_size = kDefaultGroupSize;
  std::vector<std::string> exclude;
  bool synthetic_calibration = false;
  std::size_t threads = default_thread_count();
};

void print_package_summary(const DeltaPackage& package, std::ostream& out) {
  out << fmt("%-32s %-10s %-8s %-34s %12s %8s %9s\n", "tensor", "shape", "kind", "schedule", "payload_bits",
             "avg_bits", "overhead%");
  std::uint64_t params = 0;
  for (const auto& [name, entry] : package.entries) {
    if (const auto* raw = std::get_if<RawEntry>(&entry)) {
      out << fmt("%-32s %-10s %-8s %-34s %12llu %8.4f %9s\n", name.c_str(), raw->tensor.values.shape_string().c_str(),
                 "raw", "-", static_cast<unsigned long long>(16ULL * raw->tensor.values.size()), 16.0, "-");
      continue;
    }
    const auto& cm = std::get<CompressedMatrix>(entry);
    const SizeBreakdown b = size_breakdown(cm);
    const auto n = static_cast<std::uint64_t>(cm.h_out) * cm.h_in;
    params += n;
    const std::string shape = std::to_string(cm.h_out) + "x" + std::to_string(cm.h_in);
    out << fmt("%-32s %-10s %-8s %-34s %12llu %8.4f %9.3f\n", name.c_str(), shape.c_str(), "lowrank",
               describe_schedule(cm.schedule).c_str(), static_cast<unsigned long long>(b.payload_bits),
               static_cast<double>(b.payload_bits) / static_cast<double>(n),
               100.0 * relative(static_cast<double>(b.overhead_bits), static_cast<double>(b.payload_bits)));
  }
  const PackageSize s = package_size(package);
  out << fmt("payload %llu bits of budget %.0f (%.4f); avg bitwidth %.4f; overhead %llu bits (%.3f%% of payload); raw %llu bits\n",
             static_cast<unsigned long long>(s.payload_bits), s.budget_bits,
             relative(static_cast<double>(s.payload_bits), s.budget_bits),
             params ? static_cast<double>(s.payload_bits) / static_cast<double>(params) : 0.0,
             static_cast<unsigned long long>(s.overhead_bits),
             100.0 * relative(static_cast<double>(s.overhead_bits), static_cast<double>(s.payload_bits)),
             static_cast<unsigned long long>(s.raw_bits));
}

int cmd_compress(const CompressArgs& a, std::ostream& out) {
  const double alpha = parse_alpha(a.alpha);
  check_output(a.output, {&a.backbone, &a.aligned, &a.calibration});
  const ModelCheckpoint backbone = load_checkpoint(a.backbone);
  const ModelCheckpoint aligned = load_checkpoint(a.aligned);
  const DeltaWeights delta = extract_delta(aligned, backbone);
  const CalibrationSet calibration = load_calibration(a.calibration);
  ModelCompressOptions options;
  options.group_size = a.group_size;
  options.exclude = a.exclude;
  options.synthetic_calibration = a.synthetic_calibration;
  options.seed = a.seed;
  options.threads = a.threads;
  const DeltaPackage package = compress_model(delta, calibration, a.schedule, alpha, options);
  save_package(package, a.output);
  print_package_summary(package, out);
  out << "wrote " << a.output << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- restore

struct RestoreArgs {
  std::string backbone;
  std::string package;
  std::string output;
  std::string reference;
  bool force = false;
};

int cmd_restore(const RestoreArgs& a, std::ostream& out) {
  check_output(a.output, {&a.backbone, &a.package, &a.reference});
  const ModelCheckpoint backbone = load_checkpoint(a.backbone);
  const DeltaPackage package = load_package(a.package);
  const ModelCheckpoint restored = restore(backbone, decompress_package(package), a.force);
  save_checkpoint(restored, a.output);
  out << "wrote " << a.output << " (" << restored.tensors().size() << " tensors)\n";
  if (a.reference.empty()) return kExitOk;

  // Per-tensor error against the true aligned weights, next to the error a
  // 1-bit sign quantization of the true delta would have.
  const ModelCheckpoint aligned = load_checkpoint(a.reference);
  const DeltaWeights truth = extract_delta(aligned, backbone);
  out << fmt("%-32s %14s %14s\n", "tensor", "rel_error", "sign_rel_error");
  for (const auto& [name, entry] : package.entries) {
    if (!std::holds_alternative<CompressedMatrix>(entry)) continue;
    const Matrix& d = truth.tensors.at(name).values;
    const double norm = fro_norm(d);
    const double err = fro_norm(subtract(restored.tensors().at(name).values, aligned.tensors().at(name).values));
    const double sign_err = fro_norm(subtract(dequantize(sign_quantize(d, ParamPrecision::Half)), d));
    out << fmt("%-32s %14.6e %14.6e\n", name.c_str(), relative(err, norm), relative(sign_err, norm));
  }
  return kExitOk;
}

// ---------------------------------------------------------------- plan

struct PlanArgs {
  std::size_t h_out = 4096;
  std::size_t h_in = 0;
  std::string alpha = "1/16";
  std::string schedule = "8+3+2";
};

int cmd_plan(const PlanArgs& a, std::ostream& out) {
  const double alpha = parse_alpha(a.alpha);
  const std::size_t h_in = a.h_in ? a.h_in : a.h_out;
  const PrecisionSchedule schedule = make_schedule(a.schedule, alpha, a.h_out, h_in);
  out << fmt("matrix %zux%zu  alpha %.6g  schedule %s  budget %llu bits\n", a.h_out, h_in, alpha, a.schedule.c_str(),
             static_cast<unsigned long long>(budget_bits(alpha, a.h_out, h_in)));
  out << fmt("%-6s %-5s %-14s %-7s %s\n", "group", "bits", "range", "ranks", "payload_bits");
  for (std::size_t i = 0; i < schedule.groups.size(); ++i) {
    const auto& g = schedule.groups[i];
    const std::string range = "[" + std::to_string(g.r_begin) + "," + std::to_string(g.r_end) + ")";
    out << fmt("%-6zu %-5u %-14s %-7zu %llu\n", i, g.bits, range.c_str(), g.width(),
               static_cast<unsigned long long>(static_cast<std::uint64_t>(g.bits) * g.width() * (a.h_out + h_in)));
  }
  out << fmt("total ranks %zu  payload %llu bits  avg bitwidth %.4f\n", schedule.total_ranks(),
             static_cast<unsigned long long>(schedule_payload_bits(schedule, a.h_out, h_in)),
             avg_bitwidth(schedule, a.h_out, h_in));
  return kExitOk;
}

// ---------------------------------------------------------------- analyze

struct AnalyzeArgs {
  bool synthetic = false;
  std::uint64_t seed = 0;
  std::size_t seeds = 1;
  std::size_t hidden = 256;
  double decay = 1.2;
  double noise = 0.01;
  std::size_t samples = kSyntheticCalibrationSamples;
  std::string backbone;
  std::string aligned;
  std::string calibration;
  std::string alpha = "1/16";
  std::size_t group_size = kDefaultGroupSize;
  double outlier_fraction = 0.01;
  std::string format = "csv";
  std::string output;
  std::size_t threads = default_thread_count();
};

double mse_of(const std::vector<MethodResult>& results, Method m) {
  for (const auto& r : results)
    if (r.method == m) return r.mse_all;
  return 0.0;
}

// Splits "model.layers.12.attn.q" into layer 12 and kind "attn.q".
std::optional<std::pair<std::size_t, std::string>> parse_layer_name(const std::string& name) {
  static const std::regex pattern(R"((?:^|\.)layers?\.(\d+)\.(.+)$)");
  std::smatch m;
  if (!std::regex_search(name, m, pattern)) return std::nullopt;
  return std::pair{static_cast<std::size_t>(std::stoull(m[1].str())), m[2].str()};
}

ErrorReport analyze_checkpoints(const AnalyzeArgs& a, double alpha, const CompareOptions& options) {
  const ModelCheckpoint backbone = load_checkpoint(a.backbone);
  const ModelCheckpoint aligned = load_checkpoint(a.aligned);
  const DeltaWeights delta = extract_delta(aligned, backbone);
  const CalibrationSet calibration = load_calibration(a.calibration);

  std::vector<const std::pair<std::string, Tensor>*> matrices;
  for (const auto& entry : delta.tensors)
    if (!entry.second.is_vector) matrices.push_back(&entry);
  std::vector<std::vector<MethodResult>> results(matrices.size());
  parallel_for(matrices.size(), a.threads, [&](std::size_t i) {
    const auto& [name, tensor] = *matrices[i];
    Matrix synthetic;
    const Matrix* x = nullptr;
    if (auto it = calibration.find(name); it != calibration.end()) {
      x = &it->second;
    } else {
      Rng rng = Rng::for_stream(a.seed, "calibration:" + name);
      synthetic = gaussian_matrix(rng, tensor.values.cols(), a.samples);
      x = &synthetic;
    }
    results[i] = compare_methods(tensor.values, *x, alpha, options);
  });

  std::size_t n_layers = 0;
  for (const auto* m : matrices)
    if (auto parsed = parse_layer_name(m->first)) n_layers = std::max(n_layers, parsed->first + 1);

  // Mean over tensors sharing a (kind, bin) cell.
  std::map<std::pair<std::string, std::string>, std::pair<std::vector<MethodResult>, std::size_t>> cells;
  for (std::size_t i = 0; i < matrices.size(); ++i) {
    std::string kind = matrices[i]->first;
    std::string bin = "all";
    if (auto parsed = parse_layer_name(kind)) {
      kind = parsed->second;
      if (n_layers >= 3) {
        const auto bins = layer_bins(n_layers);
        for (std::size_t b = 0; b < bins.size(); ++b)
          if (parsed->first >= bins[b].first && parsed->first < bins[b].second) bin = kLayerBinNames[b];
      }
    }
    auto& [sum, count] = cells[{kind, bin}];
    if (sum.empty()) {
      sum = results[i];
    } else {
      for (std::size_t m = 0; m < sum.size(); ++m) {
        sum[m].mse_all += results[i][m].mse_all;
        sum[m].mse_outliers += results[i][m].mse_outliers;
        sum[m].payload_bits += results[i][m].payload_bits;
      }
    }
    ++count;
  }
  ErrorReport report;
  for (auto& [key, cell] : cells) {
    auto& [sum, count] = cell;
    for (auto& r : sum) {
      r.mse_all /= static_cast<double>(count);
      r.mse_outliers /= static_cast<double>(count);
    }
    report.add(sum, key.first, key.second);
  }
  return report;
}

int cmd_analyze(const AnalyzeArgs& a, std::ostream& out, std::ostream& err) {
  const double alpha = parse_alpha(a.alpha);
  if (a.format != "csv" && a.format != "table") throw Error(ErrorCode::InvalidArgument, "--format must be csv or table");
  if (!a.synthetic && (a.backbone.empty() || a.aligned.empty())) {
    throw Error(ErrorCode::InvalidArgument, "analyze needs --synthetic or both --backbone and --aligned");
  }
  if (!a.output.empty()) check_output(a.output, {&a.backbone, &a.aligned, &a.calibration});
  CompareOptions options;
  options.group_size = a.group_size;
  options.outlier_fraction = a.outlier_fraction;

  ErrorReport report;
  std::vector<std::string> summary;
  if (a.synthetic) {
    if (a.seeds == 0) throw Error(ErrorCode::InvalidArgument, "--seeds must be positive");
    std::vector<std::vector<MethodResult>> results(a.seeds);
    parallel_for(a.seeds, a.threads, [&](std::size_t i) {
      const SyntheticCase c = synthetic_case(a.seed + i, a.hidden, a.hidden, a.decay, a.noise, a.samples);
      results[i] = compare_methods(c.delta, c.x, alpha, options);
    });
    std::size_t beats_sign = 0, beats_low_rank = 0, beats_single = 0;
    for (std::size_t i = 0; i < a.seeds; ++i) {
      report.add(results[i], "synthetic", "seed" + std::to_string(a.seed + i));
      const double triple = mse_of(results[i], Method::Triple);
      beats_sign += triple < mse_of(results[i], Method::Sign);
      beats_low_rank += triple < mse_of(results[i], Method::LowRank);
      beats_single += triple <= mse_of(results[i], Method::Single);
    }
    if (a.seeds > 1) {
      summary.push_back(fmt("triple < %s on %zu/%zu seeds", method_label(Method::Sign).c_str(), beats_sign, a.seeds));
      summary.push_back(fmt("triple < %s on %zu/%zu seeds", method_label(Method::LowRank).c_str(), beats_low_rank, a.seeds));
      summary.push_back(fmt("triple <= %s on %zu/%zu seeds", method_label(Method::Single).c_str(), beats_single, a.seeds));
    }
  } else {
    report = analyze_checkpoints(a, alpha, options);
  }

  auto emit = [&](std::ostream& os) {
    if (a.format == "csv") {
      write_csv(report, os);
    } else {
      write_table(report, os);
    }
  };
  if (a.output.empty()) {
    emit(out);
    // Keep a CSV on standard output parseable.
    std::ostream& notes = a.format == "csv" ? err : out;
    for (const auto& line : summary) notes << line << '\n';
  } else {
    std::ofstream file(a.output, std::ios::binary);
    emit(file);
    if (!file) throw Error(ErrorCode::Io, "cannot write '" + a.output + "'");
    for (const auto& line : summary) out << line << '\n';
    out << "wrote " << a.output << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------- search

struct SearchArgs {
  std::uint64_t seed = 0;
  std::string alpha = "1/16";
  std::size_t hidden = 256;
  std::size_t cases = 2;
  std::size_t group_size = kDefaultGroupSize;
  GeneticParams params;
};

int cmd_search(SearchArgs a, std::ostream& out) {
  const double alpha = parse_alpha(a.alpha);
  if (a.cases == 0 || a.cases > kSuiteSize) {
    throw Error(ErrorCode::InvalidArgument, "--cases must lie in [1, " + std::to_string(kSuiteSize) + "]");
  }
  std::vector<std::pair<Matrix, Matrix>> pairs;
  for (std::size_t i = 0; i < a.cases; ++i) {
    SyntheticCase c = suite_case(i, a.hidden);
    pairs.emplace_back(std::move(c.delta), std::move(c.x));
  }
  const ActivationProxy proxy(std::move(pairs), alpha, a.group_size);
  Rng rng = Rng::for_stream(a.seed, "search");
  const SearchResult result =
      genetic_search([&](const Allocation& x) { return proxy(x); }, alpha, a.hidden, a.hidden, a.params, rng);
  const double greedy = proxy.evaluate(make_schedule("8+3+2", alpha, a.hidden, a.hidden));

  out << "generation,best_objective\n";
  for (std::size_t g = 0; g < result.trace.size(); ++g) out << fmt("%zu,%.9e\n", g, result.trace[g]);
  const PrecisionSchedule best = to_schedule(result.best, alpha);
  out << "best allocation: " << format_allocation(result.best) << '\n';
  out << "best schedule: " << describe_schedule(best) << fmt("  avg bitwidth %.4f\n", avg_bitwidth(best, a.hidden, a.hidden));
  out << fmt("best objective: %.9e\n", result.best_objective);
  out << fmt("greedy 8+3+2 objective: %.9e\n", greedy);
  out << "evaluations: " << result.evaluations << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- synth

struct SynthArgs {
  SyntheticModelConfig config;
  std::string output_dir;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  if (a.output_dir.empty()) throw Error(ErrorCode::InvalidArgument, "--output-dir is required");
  std::error_code ec;
  fs::create_directories(a.output_dir, ec);
  if (ec) throw Error(ErrorCode::Io, "cannot create '" + a.output_dir + "': " + ec.message());
  const SyntheticModels models = make_synthetic_models(a.config);
  const fs::path dir(a.output_dir);
  save_checkpoint(models.backbone, dir / "backbone.dckp");
  save_checkpoint(models.aligned, dir / "aligned.dckp");
  save_checkpoint(models.calibration, dir / "calibration.dckp");
  out << "wrote backbone.dckp, aligned.dckp, calibration.dckp to " << a.output_dir << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- bench

struct BenchArgs {
  BenchConfig config;
  std::string alpha = "1/16";
  std::string output;
};

int cmd_bench(BenchArgs a, std::ostream& out) {
  a.config.alpha = parse_alpha(a.alpha);
  const auto rows = run_bench(a.config);
  if (a.output.empty()) {
    write_bench_csv(rows, out);
    return kExitOk;
  }
  std::ofstream file(a.output, std::ios::binary);
  write_bench_csv(rows, file);
  if (!file) throw Error(ErrorCode::Io, "cannot write '" + a.output + "'");
  out << "wrote " << a.output << '\n';
  return kExitOk;
}

double rel_l2(const Matrix& a, const Matrix& ref) {
  return relative(fro_norm(subtract(a, ref)), fro_norm(ref));
}

}  // namespace

int exit_code(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::DimensionMismatch:
    case ErrorCode::NameMismatch:
    case ErrorCode::MissingCalibration:
    case ErrorCode::BudgetExhausted:
    case ErrorCode::RankOverflow:
    case ErrorCode::Io:
      return kExitUsage;
    case ErrorCode::ChecksumMismatch:
    case ErrorCode::Truncated:
    case ErrorCode::BadMagic:
    case ErrorCode::BadVersion:
    case ErrorCode::CorruptData:
      return kExitIntegrity;
    case ErrorCode::NumericallySingular:
    case ErrorCode::NotConverged:
      return kExitNumeric;
  }
  return 1;
}

double parse_alpha(const std::string& text) {
  auto number = [&](std::string_view s) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
      throw Error(ErrorCode::InvalidArgument, "alpha '" + text + "' is not a number or fraction");
    }
    return v;
  };
  const std::string_view s = text;
  const auto slash = s.find('/');
  const double alpha = slash == std::string_view::npos ? number(s) : number(s.substr(0, slash)) / number(s.substr(slash + 1));
  if (!(alpha > 0.0 && alpha <= 1.0)) throw Error(ErrorCode::InvalidArgument, "alpha must lie in (0, 1], got '" + text + "'");
  return alpha;
}

SyntheticModels make_synthetic_models(const SyntheticModelConfig& config) {
  const std::size_t h = config.hidden;
  const std::size_t f = config.ffn;
  struct Shape {
    const char* kind;
    std::size_t rows;
    std::size_t cols;
  };
  const std::array<Shape, 4> shapes{Shape{"attn.q", h, h}, Shape{"attn.o", h, h}, Shape{"mlp.up", f, h},
                                    Shape{"mlp.down", h, f}};
  TensorMap backbone, aligned, calibration;
  LongTailOptions longtail;
  longtail.sigma0 = 0.5;
  for (std::size_t layer = 0; layer < config.layers; ++layer) {
    const std::string prefix = "layers." + std::to_string(layer) + ".";
    for (const auto& s : shapes) {
      const std::string name = prefix + s.kind;
      Rng base_rng = Rng::for_stream(config.seed, "backbone:" + name);
      Matrix base = gaussian_matrix(base_rng, s.rows, s.cols);
      for (float& v : base.data()) v *= 0.02f;
      Rng delta_rng = Rng::for_stream(config.seed, "delta:" + name);
      const Matrix delta = synth_longtail_delta(delta_rng, s.rows, s.cols, config.decay, 0.001, longtail);
      Rng x_rng = Rng::for_stream(config.seed, "activations:" + name);
      calibration.add(name, Tensor{gaussian_matrix(x_rng, s.cols, config.samples), false});
      aligned.add(name, Tensor{add(base, delta), false});
      backbone.add(name, Tensor{std::move(base), false});
    }
    const std::string norm = prefix + "norm";
    Rng norm_rng = Rng::for_stream(config.seed, "delta:" + norm);
    Matrix shift = gaussian_matrix(norm_rng, h, 1);
    Matrix ones(h, 1);
    for (std::size_t i = 0; i < h; ++i) {
      ones(i, 0) = 1.0f;
      shift(i, 0) = 1.0f + 0.01f * shift(i, 0);
    }
    backbone.add(norm, Tensor{std::move(ones), true});
    aligned.add(norm, Tensor{std::move(shift), true});
  }
  return {ModelCheckpoint(std::move(backbone)), ModelCheckpoint(std::move(aligned)), ModelCheckpoint(std::move(calibration))};
}

std::vector<BenchRow> run_bench(const BenchConfig& config) {
  using clock = std::chrono::steady_clock;
  if (config.repeats == 0) throw Error(ErrorCode::InvalidArgument, "--repeats must be positive");
  std::vector<BenchRow> rows;
  for (std::size_t h : config.hidden) {
    for (std::size_t b : config.batch) {
      if (b == 0 || b >= h) {
        throw Error(ErrorCode::InvalidArgument, "batch sizes must lie in [1, hidden), got " + std::to_string(b) +
                                                    " for hidden " + std::to_string(h));
      }
    }
    // Synthetic factors stand in for an SVD so large sizes stay cheap to build.
    const PrecisionSchedule schedule = make_schedule(config.schedule, config.alpha, h, h);
    const std::size_t r = schedule.total_ranks();
    Rng rng = Rng::for_stream(config.seed, "bench:" + std::to_string(h));
    SvdResult svd;
    svd.u = random_orthonormal(rng, h, r);
    svd.v = random_orthonormal(rng, h, r);
    for (std::size_t i = 0; i < r; ++i) svd.sigma.push_back(static_cast<float>(4.0 / static_cast<double>(i + 1)));
    const CompressedMatrix cm = compress_factors(svd, h, h, Matrix(), schedule, CompressOptions{kDefaultGroupSize, false});

    for (std::size_t b : config.batch) {
      const Matrix x = gaussian_matrix(rng, h, b);

      Matrix materialized;
      alloc_probe::arm();
      auto start = clock::now();
      for (std::size_t i = 0; i < config.repeats; ++i) materialized = matmul(decompress_matrix(cm), x);
      const double t_mat = std::chrono::duration<double>(clock::now() - start).count() / static_cast<double>(config.repeats);
      const std::size_t mat_alloc = alloc_probe::disarm();

      Matrix fused;
      alloc_probe::arm();
      start = clock::now();
      for (std::size_t i = 0; i < config.repeats; ++i) fused = fused_apply_batch(cm, x);
      const double t_fused = std::chrono::duration<double>(clock::now() - start).count() / static_cast<double>(config.repeats);
      const std::size_t fused_alloc = alloc_probe::disarm();

      const double err = rel_l2(fused, materialized);
      if (!(err <= 1e-4)) {
        throw std::runtime_error(fmt("fused output differs from materialized by %.3e relative L2 (hidden %zu, batch %zu)",
                                     err, h, b));
      }
      const std::size_t dense_bytes = h * h * sizeof(float);
      if (fused_alloc >= dense_bytes) {
        throw std::runtime_error(fmt("fused apply allocated %zu bytes, at least the %zu-byte dense delta (hidden %zu)",
                                     fused_alloc, dense_bytes, h));
      }
      rows.push_back({"materialized", h, b, r, t_mat, mat_alloc, 0.0, 1.0});
      rows.push_back({"fused", h, b, r, t_fused, fused_alloc, err, t_fused > 0.0 ? t_mat / t_fused : 0.0});
    }
  }
  return rows;
}

void write_bench_csv(const std::vector<BenchRow>& rows, std::ostream& out) {
  out << "impl,hidden,batch,rank,seconds_per_apply,max_alloc_bytes,rel_l2,speedup\n";
  for (const auto& r : rows) {
    out << r.impl << ',' << r.hidden << ',' << r.batch << ',' << r.rank << ',' << fmt("%.6e", r.seconds_per_apply) << ','
        << r.max_alloc_bytes << ',' << fmt("%.3e", r.rel_l2) << ',' << fmt("%.3f", r.speedup) << '\n';
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mixed-precision low-rank compression of fine-tuned weight deltas", "deltacomp"};
  app.require_subcommand(1);
  app.allow_windows_style_options(false);
  std::function<int()> action;

  auto add_alpha = [](CLI::App* sub, std::string& alpha) {
    sub->add_option("--alpha", alpha, "Compression ratio, decimal or fraction")->capture_default_str();
  };
  auto add_threads = [](CLI::App* sub, std::size_t& threads) {
    sub->add_option("--threads", threads, "Worker threads for per-tensor work")->capture_default_str()->check(CLI::PositiveNumber);
  };

  CompressArgs compress;
  auto* c = app.add_subcommand("compress", "Compress aligned − backbone into a DCOM package");
  c->add_option("--backbone", compress.backbone, "Backbone checkpoint (DCKP)")->required();
  c->add_option("--aligned", compress.aligned, "Fine-tuned checkpoint (DCKP)")->required();
  c->add_option("--output", compress.output, "Package to write (DCOM)")->required();
  c->add_option("--calibration", compress.calibration, "Calibration activations (DCKP, one h_in × n tensor per name)");
  c->add_flag("--synthetic-calibration", compress.synthetic_calibration,
              "Use Gaussian activations for tensors without calibration");
  add_alpha(c, compress.alpha);
  c->add_option("--schedule", compress.schedule, "Precision schedule, e.g. 8+3+2")->capture_default_str();
  c->add_option("--seed", compress.seed, "Seed for synthetic calibration")->capture_default_str();
  c->add_option("--group-size", compress.group_size, "Quantization group size")->capture_default_str()->check(CLI::PositiveNumber);
  c->add_option("--exclude", compress.exclude, "Glob of tensor names kept uncompressed (repeatable)");
  add_threads(c, compress.threads);
  c->callback([&] { action = [&] { return cmd_compress(compress, out); }; });

  RestoreArgs restore_args;
  auto* r = app.add_subcommand("restore", "Apply a package to its backbone");
  r->add_option("--backbone", restore_args.backbone, "Backbone checkpoint (DCKP)")->required();
  r->add_option("--package", restore_args.package, "Delta package (DCOM)")->required();
  r->add_option("--output", restore_args.output, "Restored checkpoint to write (DCKP)")->required();
  r->add_option("--reference", restore_args.reference, "True aligned checkpoint; reports per-tensor error");
  r->add_flag("--force", restore_args.force, "Apply even if the backbone checksum differs");
  r->callback([&] { action = [&] { return cmd_restore(restore_args, out); }; });

  PlanArgs plan;
  auto* p = app.add_subcommand("plan", "Print the precision schedule for a matrix shape");
  p->add_option("--h-out", plan.h_out, "Output dimension")->capture_default_str()->check(CLI::PositiveNumber);
  p->add_option("--h-in", plan.h_in, "Input dimension (default: h-out)");
  add_alpha(p, plan.alpha);
  p->add_option("--schedule", plan.schedule, "Precision schedule")->capture_default_str();
  p->callback([&] { action = [&] { return cmd_plan(plan, out); }; });

  AnalyzeArgs analyze;
  auto* an = app.add_subcommand("analyze", "Compare low-rank, sign, single and triple methods by activation error");
  an->add_flag("--synthetic", analyze.synthetic, "Use synthetic long-tail deltas");
  an->add_option("--seed", analyze.seed, "First seed")->capture_default_str();
  an->add_option("--seeds", analyze.seeds, "Number of consecutive seeds (synthetic)")->capture_default_str();
  an->add_option("--hidden", analyze.hidden, "Matrix size (synthetic)")->capture_default_str()->check(CLI::PositiveNumber);
  an->add_option("--decay", analyze.decay, "Singular value decay exponent (synthetic)")->capture_default_str();
  an->add_option("--noise", analyze.noise, "Gaussian noise level (synthetic)")->capture_default_str();
  an->add_option("--samples", analyze.samples, "Calibration samples when generated")->capture_default_str()->check(CLI::PositiveNumber);
  an->add_option("--backbone", analyze.backbone, "Backbone checkpoint (DCKP)");
  an->add_option("--aligned", analyze.aligned, "Fine-tuned checkpoint (DCKP)");
  an->add_option("--calibration", analyze.calibration, "Calibration activations (DCKP)");
  add_alpha(an, analyze.alpha);
  an->add_option("--group-size", analyze.group_size, "Quantization group size")->capture_default_str()->check(CLI::PositiveNumber);
  an->add_option("--outlier-fraction", analyze.outlier_fraction, "Fraction of columns treated as outliers")->capture_default_str();
  an->add_option("--format", analyze.format, "csv or table")->capture_default_str();
  an->add_option("--output", analyze.output, "Write the report here instead of standard output");
  add_threads(an, analyze.threads);
  an->callback([&] { action = [&] { return cmd_analyze(analyze, out, err); }; });

  SearchArgs search;
  search.params.threads = default_thread_count();
  auto* s = app.add_subcommand("search", "Genetic search over bit allocations on the synthetic suite");
  s->add_option("--seed", search.seed, "Search seed")->capture_default_str();
  add_alpha(s, search.alpha);
  s->add_option("--hidden", search.hidden, "Matrix size")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--cases", search.cases, "Suite members in the objective")->capture_default_str();
  s->add_option("--group-size", search.group_size, "Quantization group size")->capture_default_str()->check(CLI::PositiveNumber);
  s->add_option("--population", search.params.population, "Population size")->capture_default_str();
  s->add_option("--generations", search.params.generations, "Generations")->capture_default_str();
  s->add_option("--tournament", search.params.tournament, "Tournament size")->capture_default_str();
  s->add_option("--mutation-rate", search.params.mutation_rate, "Mutation probability")->capture_default_str();
  add_threads(s, search.params.threads);
  s->callback([&] { action = [&] { return cmd_search(search, out); }; });

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Time fused apply against decompress-then-multiply");
  b->add_option("--hidden", bench.config.hidden, "Hidden sizes, comma separated")->delimiter(',')->capture_default_str();
  b->add_option("--batch", bench.config.batch, "Batch sizes, comma separated")->delimiter(',')->capture_default_str();
  b->add_option("--repeats", bench.config.repeats, "Applies per timing")->capture_default_str();
  add_alpha(b, bench.alpha);
  b->add_option("--schedule", bench.config.schedule, "Precision schedule")->capture_default_str();
  b->add_option("--seed", bench.config.seed, "Seed")->capture_default_str();
  b->add_option("--output", bench.output, "CSV file to write");
  b->callback([&] { action = [&] { return cmd_bench(bench, out); }; });

  SynthArgs synth;
  auto* sy = app.add_subcommand("synth", "Write a synthetic backbone, aligned model and calibration set");
  sy->add_option("--output-dir", synth.output_dir, "Directory for the three DCKP files")->required();
  sy->add_option("--seed", synth.config.seed, "Seed")->capture_default_str();
  sy->add_option("--layers", synth.config.layers, "Layers")->capture_default_str();
  sy->add_option("--hidden", synth.config.hidden, "Hidden size")->capture_default_str()->check(CLI::PositiveNumber);
  sy->add_option("--ffn", synth.config.ffn, "Feed-forward size")->capture_default_str()->check(CLI::PositiveNumber);
  sy->add_option("--samples", synth.config.samples, "Calibration samples per tensor")->capture_default_str()->check(CLI::PositiveNumber);
  sy->add_option("--decay", synth.config.decay, "Delta singular value decay")->capture_default_str();
  sy->callback([&] { action = [&] { return cmd_synth(synth, out); }; });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(std::move(reversed));
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kExitOk;
    }
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    return action();
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace deltacomp::cli
