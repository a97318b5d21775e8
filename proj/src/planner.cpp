#include "deltacomp/planner.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>

#include "deltacomp/error.hpp"
#include "deltacomp/parallel.hpp"

namespace deltacomp {

namespace {

bool is_schedule_bits(unsigned bits) noexcept {
  return bits == 16 || bits == 8 || bits == 4 || bits == 3 || bits == 2 || bits == 1;
}

std::uint64_t rank_cost(unsigned bits, std::size_t h_out, std::size_t h_in) {
  return static_cast<std::uint64_t>(bits) * (h_out + h_in);
}

}  // namespace

std::vector<unsigned> parse_schedule_spec(std::string_view spec) {
  std::vector<unsigned> bits;
  std::size_t pos = 0;
  while (true) {
    const std::size_t plus = spec.find('+', pos);
    const std::string_view token = spec.substr(pos, plus == std::string_view::npos ? std::string_view::npos : plus - pos);
    unsigned value = 0;
    const auto [end, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
    if (token.empty() || ec != std::errc{} || end != token.data() + token.size() || !is_schedule_bits(value)) {
      throw Error(ErrorCode::InvalidArgument, "bad schedule spec '" + std::string(spec) +
                                                  "': each term must be one of 16, 8, 4, 3, 2, 1");
    }
    if (!bits.empty() && value >= bits.back()) {
      throw Error(ErrorCode::InvalidArgument, "bad schedule spec '" + std::string(spec) + "': bits must strictly decrease");
    }
    bits.push_back(value);
    if (plus == std::string_view::npos) break;
    pos = plus + 1;
  }
  return bits;
}

std::string format_schedule_spec(std::span<const unsigned> bits) {
  std::string out;
  for (unsigned b : bits) {
    if (!out.empty()) out += '+';
    out += std::to_string(b);
  }
  return out;
}

std::uint64_t budget_bits(double alpha, std::size_t h_out, std::size_t h_in) {
  if (!(alpha >= 0.0) || alpha > 1.0) throw Error(ErrorCode::InvalidArgument, "alpha must lie in [0, 1]");
  const long double exact = 16.0L * alpha * static_cast<long double>(h_out) * static_cast<long double>(h_in);
  // Budgets meant to be whole numbers (e.g. alpha = 0.3) must not lose a bit
  // to the representation error of alpha.
  const long double nearest = std::round(exact);
  if (std::abs(exact - nearest) <= 1e-9L * std::max(1.0L, exact)) return static_cast<std::uint64_t>(nearest);
  return static_cast<std::uint64_t>(std::floor(exact));
}

std::size_t budget_ranks(unsigned bits, double alpha, std::size_t h_out, std::size_t h_in) {
  if (bits == 0) throw Error(ErrorCode::InvalidArgument, "bits must be positive");
  if (h_out == 0 || h_in == 0) throw Error(ErrorCode::InvalidArgument, "dimensions must be positive");
  return static_cast<std::size_t>(budget_bits(alpha, h_out, h_in) / rank_cost(bits, h_out, h_in));
}

std::uint64_t schedule_payload_bits(const PrecisionSchedule& schedule, std::size_t h_out, std::size_t h_in) {
  std::uint64_t total = 0;
  for (const auto& g : schedule.groups) total += rank_cost(g.bits, h_out, h_in) * g.width();
  return total;
}

PrecisionSchedule make_schedule(std::string_view spec, double alpha, std::size_t h_out, std::size_t h_in,
                                std::span<const std::size_t> prefix_bounds) {
  const auto bits = parse_schedule_spec(spec);
  if (h_out == 0 || h_in == 0) throw Error(ErrorCode::InvalidArgument, "dimensions must be positive");
  if (bits.size() - 1 > prefix_bounds.size()) {
    throw Error(ErrorCode::InvalidArgument, "schedule '" + std::string(spec) + "' needs " +
                                                std::to_string(bits.size() - 1) + " prefix boundaries");
  }
  const std::uint64_t budget = budget_bits(alpha, h_out, h_in);

  PrecisionSchedule schedule;
  schedule.alpha = alpha;
  std::size_t begin = 0;
  std::uint64_t used = 0;
  for (std::size_t i = 0; i + 1 < bits.size(); ++i) {
    const std::size_t end = prefix_bounds[i];
    if (end <= begin) throw Error(ErrorCode::InvalidArgument, "prefix boundaries must strictly increase");
    used += rank_cost(bits[i], h_out, h_in) * (end - begin);
    schedule.groups.push_back({bits[i], begin, end});
    begin = end;
  }
  if (used > budget) {
    throw Error(ErrorCode::BudgetExhausted, "fixed ranges of '" + std::string(spec) + "' need " + std::to_string(used) +
                                                " bits but the budget is " + std::to_string(budget));
  }
  const std::size_t last_width = static_cast<std::size_t>((budget - used) / rank_cost(bits.back(), h_out, h_in));
  if (last_width > 0) schedule.groups.push_back({bits.back(), begin, begin + last_width});
  return schedule;
}

void validate_schedule(const PrecisionSchedule& schedule, std::size_t h_out, std::size_t h_in) {
  std::size_t expected_begin = 0;
  unsigned prev_bits = 0;
  for (const auto& g : schedule.groups) {
    if (!is_schedule_bits(g.bits)) throw Error(ErrorCode::InvalidArgument, "invalid group bit width " + std::to_string(g.bits));
    if (g.r_begin != expected_begin || g.r_end < g.r_begin) {
      throw Error(ErrorCode::InvalidArgument, "schedule ranges are not contiguous from rank 0");
    }
    if (prev_bits != 0 && g.bits >= prev_bits) throw Error(ErrorCode::InvalidArgument, "schedule bits must strictly decrease");
    prev_bits = g.bits;
    expected_begin = g.r_end;
  }
  if (schedule_payload_bits(schedule, h_out, h_in) > budget_bits(schedule.alpha, h_out, h_in)) {
    throw Error(ErrorCode::BudgetExhausted, "schedule exceeds the bit budget for " + std::to_string(h_out) + "x" +
                                                std::to_string(h_in));
  }
}

double avg_bitwidth(const PrecisionSchedule& schedule, std::size_t h_out, std::size_t h_in) {
  const double dims = static_cast<double>(h_out) * static_cast<double>(h_in);
  return static_cast<double>(schedule_payload_bits(schedule, h_out, h_in)) / dims;
}

std::size_t Allocation::total_ranks() const noexcept {
  std::size_t total = 0;
  for (std::size_t c : counts) total += c;
  return total;
}

std::uint64_t allocation_bits(const Allocation& allocation, std::size_t h_out, std::size_t h_in) {
  std::uint64_t total = 0;
  for (std::size_t t = 0; t < Allocation::kTierBits.size(); ++t)
    total += rank_cost(Allocation::kTierBits[t], h_out, h_in) * allocation.counts[t];
  return total;
}

PrecisionSchedule to_schedule(const Allocation& allocation, double alpha) {
  PrecisionSchedule schedule;
  schedule.alpha = alpha;
  std::size_t begin = 0;
  for (std::size_t t = 0; t < Allocation::kTierBits.size(); ++t) {
    if (allocation.counts[t] == 0) continue;
    schedule.groups.push_back({Allocation::kTierBits[t], begin, begin + allocation.counts[t]});
    begin += allocation.counts[t];
  }
  return schedule;
}

Allocation to_allocation(const PrecisionSchedule& schedule) {
  Allocation a;
  for (const auto& g : schedule.groups) {
    const auto it = std::find(Allocation::kTierBits.begin(), Allocation::kTierBits.end(), g.bits);
    if (it == Allocation::kTierBits.end()) {
      throw Error(ErrorCode::InvalidArgument, std::to_string(g.bits) + "-bit groups are not a search tier");
    }
    a.counts[static_cast<std::size_t>(it - Allocation::kTierBits.begin())] += g.width();
  }
  return a;
}

std::string format_allocation(const Allocation& allocation) {
  std::string out;
  for (std::size_t t = 0; t < Allocation::kTierBits.size(); ++t) {
    if (!out.empty()) out += ' ';
    out += std::to_string(Allocation::kTierBits[t]) + "b:" + std::to_string(allocation.counts[t]);
  }
  return out;
}

namespace {

class Search {
 public:
  Search(const AllocationObjective& objective, double alpha, std::size_t h_out, std::size_t h_in,
         const GeneticParams& params, Rng& rng)
      : objective_(objective), params_(params), rng_(rng), budget_(budget_bits(alpha, h_out, h_in)) {
    for (std::size_t t = 0; t < unit_.size(); ++t) unit_[t] = rank_cost(Allocation::kTierBits[t], h_out, h_in);
    max_rank_ = params.max_rank ? params.max_rank : std::min(h_out, h_in);
  }

  SearchResult run() {
    if (params_.population == 0) throw Error(ErrorCode::InvalidArgument, "population must be positive");
    if (params_.tournament == 0) throw Error(ErrorCode::InvalidArgument, "tournament size must be positive");
    if (budget_ < unit_.back()) {
      throw Error(ErrorCode::BudgetExhausted, "budget of " + std::to_string(budget_) +
                                                  " bits cannot hold a single rank of the cheapest tier");
    }
    std::vector<Allocation> population;
    population.reserve(params_.population);
    for (std::size_t i = 0; i < params_.population; ++i) population.push_back(random_individual());
    auto scores = evaluate(population);

    SearchResult result;
    track_best(population, scores, result);
    result.trace.push_back(result.best_objective);

    for (std::size_t gen = 0; gen < params_.generations; ++gen) {
      std::vector<Allocation> next;
      next.reserve(params_.population);
      next.push_back(result.best);
      while (next.size() < params_.population) {
        const Allocation& a = population[tournament(scores)];
        const Allocation& b = population[tournament(scores)];
        Allocation child;
        for (std::size_t t = 0; t < child.counts.size(); ++t) child.counts[t] = (rng_.next_u64() & 1) ? a.counts[t] : b.counts[t];
        if (rng_.next_uniform() < params_.mutation_rate) mutate(child);
        repair(child);
        next.push_back(child);
      }
      population = std::move(next);
      scores = evaluate(population);
      track_best(population, scores, result);
      result.trace.push_back(result.best_objective);
    }
    result.evaluations = cache_.size();
    return result;
  }

 private:
  std::uint64_t cost(const Allocation& a) const {
    std::uint64_t c = 0;
    for (std::size_t t = 0; t < unit_.size(); ++t) c += unit_[t] * a.counts[t];
    return c;
  }

  // Shrinks the lowest-bit tiers until the rank cap and the budget hold.
  void repair(Allocation& a) const {
    for (std::size_t t = unit_.size(); t-- > 0 && a.total_ranks() > max_rank_;) {
      const std::size_t excess = a.total_ranks() - max_rank_;
      a.counts[t] -= std::min(a.counts[t], excess);
    }
    for (std::size_t t = unit_.size(); t-- > 0;) {
      const std::uint64_t c = cost(a);
      if (c <= budget_) break;
      const std::uint64_t needed = (c - budget_ + unit_[t] - 1) / unit_[t];
      a.counts[t] -= std::min<std::size_t>(a.counts[t], needed);
    }
  }

  Allocation random_individual() {
    std::array<std::size_t, 5> order{0, 1, 2, 3, 4};
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng_.next_below(i + 1)]);
    Allocation a;
    std::uint64_t remaining = budget_;
    std::size_t ranks_left = max_rank_;
    for (std::size_t t : order) {
      const std::size_t affordable = std::min<std::size_t>(remaining / unit_[t], ranks_left);
      const std::size_t pick = rng_.next_below(affordable + 1);
      a.counts[t] = pick;
      remaining -= unit_[t] * pick;
      ranks_left -= pick;
    }
    return a;
  }

  void mutate(Allocation& a) {
    const std::size_t t = rng_.next_below(unit_.size());
    const std::size_t span = std::max<std::size_t>(1, std::min<std::size_t>(budget_ / unit_[t], max_rank_) / 4);
    const auto step = static_cast<std::int64_t>(rng_.next_below(2 * span + 1)) - static_cast<std::int64_t>(span);
    const auto updated = static_cast<std::int64_t>(a.counts[t]) + step;
    a.counts[t] = static_cast<std::size_t>(std::max<std::int64_t>(0, updated));
  }

  std::size_t tournament(const std::vector<double>& scores) {
    std::size_t best = rng_.next_below(scores.size());
    for (std::size_t i = 1; i < params_.tournament; ++i) {
      const std::size_t challenger = rng_.next_below(scores.size());
      if (scores[challenger] < scores[best] || (scores[challenger] == scores[best] && challenger < best)) best = challenger;
    }
    return best;
  }

  std::vector<double> evaluate(const std::vector<Allocation>& population) {
    std::vector<Allocation> fresh;
    for (const auto& a : population)
      if (!cache_.contains(a) && std::find(fresh.begin(), fresh.end(), a) == fresh.end()) fresh.push_back(a);
    std::vector<double> values(fresh.size());
    parallel_for(fresh.size(), params_.threads, [&](std::size_t i) { values[i] = objective_(fresh[i]); });
    for (std::size_t i = 0; i < fresh.size(); ++i) cache_.emplace(fresh[i], values[i]);
    std::vector<double> scores;
    scores.reserve(population.size());
    for (const auto& a : population) scores.push_back(cache_.at(a));
    return scores;
  }

  static void track_best(const std::vector<Allocation>& population, const std::vector<double>& scores,
                         SearchResult& result) {
    for (std::size_t i = 0; i < population.size(); ++i) {
      if (result.trace.empty() && i == 0) {
        result.best = population[0];
        result.best_objective = scores[0];
      } else if (scores[i] < result.best_objective) {
        result.best = population[i];
        result.best_objective = scores[i];
      }
    }
  }

  const AllocationObjective& objective_;
  GeneticParams params_;
  Rng& rng_;
  std::uint64_t budget_;
  std::array<std::uint64_t, 5> unit_{};
  std::size_t max_rank_ = 0;
  std::map<Allocation, double> cache_;
};

}  // namespace

SearchResult genetic_search(const AllocationObjective& objective, double alpha, std::size_t h_out, std::size_t h_in,
                            const GeneticParams& params, Rng& rng) {
  return Search(objective, alpha, h_out, h_in, params, rng).run();
}

}  // namespace deltacomp
