#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "deltacomp/error.hpp"
#include "deltacomp/model_io.hpp"

namespace deltacomp::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIntegrity = 3;
inline constexpr int kExitNumeric = 4;

int exit_code(ErrorCode code) noexcept;

/// Runs one command line (without the program name). Results go to `out`,
/// diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Accepts a decimal ("0.0625") or a fraction ("1/16") in (0, 1].
double parse_alpha(const std::string& text);

struct SyntheticModels {
  ModelCheckpoint backbone;
  ModelCheckpoint aligned;
  /// Per 2-D tensor: Gaussian activations of shape h_in × samples.
  ModelCheckpoint calibration;
};

struct SyntheticModelConfig {
  std::uint64_t seed = 0;
  std::size_t layers = 2;
  std::size_t hidden = 256;
  std::size_t ffn = 512;
  std::size_t samples = 256;
  double decay = 1.0;
};

/// A small transformer-shaped model pair. Each layer holds attn.q, attn.o
/// (hidden²), mlp.up (ffn × hidden), mlp.down (hidden × ffn) and a norm
/// vector. The aligned model adds a long-tail delta to every matrix.
SyntheticModels make_synthetic_models(const SyntheticModelConfig& config);

struct BenchConfig {
  std::vector<std::size_t> hidden{256, 512, 1024};
  std::vector<std::size_t> batch{1, 4, 16};
  std::size_t repeats = 3;
  double alpha = 1.0 / 16.0;
  std::string schedule = "8+3+2";
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::string impl;
  std::size_t hidden = 0;
  std::size_t batch = 0;
  std::size_t rank = 0;
  double seconds_per_apply = 0.0;
  /// Largest single allocation during the timed applies.
  std::size_t max_alloc_bytes = 0;
  /// Relative L2 distance of this implementation's output to the materialized one.
  double rel_l2 = 0.0;
  double speedup = 1.0;
};

/// Times fused apply against decompress-then-multiply. Throws
/// std::runtime_error if the outputs disagree beyond 1e-4 relative L2 or if
/// the fused path allocates a buffer as large as the dense delta.
std::vector<BenchRow> run_bench(const BenchConfig& config);
void write_bench_csv(const std::vector<BenchRow>& rows, std::ostream& out);

}  // namespace deltacomp::cli
