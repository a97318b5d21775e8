#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deltacomp/numerics.hpp"

namespace deltacomp {

/// Singular-vector ranks [r_begin, r_end) stored at `bits` bits.
struct PrecisionGroup {
  unsigned bits = 0;
  std::size_t r_begin = 0;
  std::size_t r_end = 0;

  std::size_t width() const noexcept { return r_end - r_begin; }
  friend bool operator==(const PrecisionGroup&, const PrecisionGroup&) = default;
};

struct PrecisionSchedule {
  std::vector<PrecisionGroup> groups;
  double alpha = 0.0;

  std::size_t total_ranks() const noexcept { return groups.empty() ? 0 : groups.back().r_end; }
  friend bool operator==(const PrecisionSchedule&, const PrecisionSchedule&) = default;
};

/// Boundaries of the fixed leading ranges of multi-precision schedules:
/// the first group covers [0, 2), the second [2, 34).
inline constexpr std::array<std::size_t, 2> kDefaultPrefixBounds{2, 34};

/// Parses INT("+"INT)* with each INT in {16,8,4,3,2,1}, strictly decreasing.
std::vector<unsigned> parse_schedule_spec(std::string_view spec);
std::string format_schedule_spec(std::span<const unsigned> bits);

/// floor(16·alpha·h_out·h_in): the payload bit budget of one matrix.
std::uint64_t budget_bits(double alpha, std::size_t h_out, std::size_t h_in);

/// Ranks of a single k-bit group that fit the budget.
std::size_t budget_ranks(unsigned bits, double alpha, std::size_t h_out, std::size_t h_in);

/// Σ k·width·(h_out + h_in) over the groups.
std::uint64_t schedule_payload_bits(const PrecisionSchedule& schedule, std::size_t h_out, std::size_t h_in);

/// Builds a schedule whose leading groups take the fixed prefix ranges and
/// whose last group absorbs the remaining budget (floored). A last group
/// that receives no ranks is dropped.
PrecisionSchedule make_schedule(std::string_view spec, double alpha, std::size_t h_out, std::size_t h_in,
                                std::span<const std::size_t> prefix_bounds = kDefaultPrefixBounds);

/// Throws INVALID_ARGUMENT unless ranges are contiguous from 0, bits strictly
/// decrease, and the budget holds for (h_out, h_in).
void validate_schedule(const PrecisionSchedule& schedule, std::size_t h_out, std::size_t h_in);

double avg_bitwidth(const PrecisionSchedule& schedule, std::size_t h_out, std::size_t h_in);

/// Rank counts for the 16/8/4/3/2-bit tiers.
struct Allocation {
  static constexpr std::array<unsigned, 5> kTierBits{16, 8, 4, 3, 2};
  std::array<std::size_t, 5> counts{};

  std::size_t total_ranks() const noexcept;
  friend auto operator<=>(const Allocation&, const Allocation&) = default;
};

std::uint64_t allocation_bits(const Allocation& allocation, std::size_t h_out, std::size_t h_in);
PrecisionSchedule to_schedule(const Allocation& allocation, double alpha);
/// Inverse of to_schedule for schedules whose bits are all search tiers.
Allocation to_allocation(const PrecisionSchedule& schedule);
std::string format_allocation(const Allocation& allocation);

struct GeneticParams {
  std::size_t population = 32;
  std::size_t generations = 40;
  std::size_t tournament = 3;
  double mutation_rate = 0.5;
  /// Upper bound on total ranks; 0 means min(h_out, h_in).
  std::size_t max_rank = 0;
  /// Objective evaluations run on this many threads.
  std::size_t threads = 1;
};

struct SearchResult {
  Allocation best;
  double best_objective = 0.0;
  /// Best objective after each generation (index 0 is the initial population).
  std::vector<double> trace;
  std::size_t evaluations = 0;
};

using AllocationObjective = std::function<double(const Allocation&)>;

/// Genetic search over tier allocations that fit the bit budget:
/// tournament selection, uniform crossover, single-tier ± mutation with
/// budget repair, elitism of one. Deterministic for a given rng state.
SearchResult genetic_search(const AllocationObjective& objective, double alpha, std::size_t h_out, std::size_t h_in,
                            const GeneticParams& params, Rng& rng);

}  // namespace deltacomp
