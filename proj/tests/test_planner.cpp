#include <doctest.h>

#include <set>

#include "deltacomp/error.hpp"
#include "deltacomp/planner.hpp"

using namespace deltacomp;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST_SUITE("planner") {
  TEST_CASE("budget_ranks arithmetic") {
    CHECK(budget_ranks(3, 1.0 / 16, 4096, 4096) == 682);
    CHECK(budget_ranks(16, 1.0 / 16, 4096, 4096) == 128);
    CHECK(budget_ranks(2, 0.0, 4096, 4096) == 0);
    CHECK(budget_bits(1.0 / 16, 4096, 4096) == 16777216);
    // 16·0.3·10·10 = 480 must not floor to 479 through the binary error of 0.3.
    CHECK(budget_bits(0.3, 10, 10) == 480);
    CHECK(budget_bits(1.0 / 3, 3, 1) == 16);
  }

  TEST_CASE("triple schedule at 4096 squared") {
    const PrecisionSchedule s = make_schedule("8+3+2", 1.0 / 16, 4096, 4096);
    REQUIRE(s.groups.size() == 3);
    CHECK(s.groups[0] == PrecisionGroup{8, 0, 2});
    CHECK(s.groups[1] == PrecisionGroup{3, 2, 34});
    CHECK(s.groups[2] == PrecisionGroup{2, 34, 1002});
    CHECK(avg_bitwidth(s, 4096, 4096) == 1.0);
    CHECK(s.total_ranks() == 1002);
  }

  TEST_CASE("single and double schedules") {
    const PrecisionSchedule single = make_schedule("3", 1.0 / 16, 4096, 4096);
    REQUIRE(single.groups.size() == 1);
    CHECK(single.groups[0] == PrecisionGroup{3, 0, 682});
    const PrecisionSchedule dbl = make_schedule("8+3", 1.0 / 16, 4096, 4096);
    REQUIRE(dbl.groups.size() == 2);
    CHECK(dbl.groups[0] == PrecisionGroup{8, 0, 2});
    // (16777216 − 8·2·8192) / (3·8192) = 677 ranks after the prefix.
    CHECK(dbl.groups[1] == PrecisionGroup{3, 2, 679});
    const PrecisionSchedule half = make_schedule("16", 1.0 / 16, 4096, 4096);
    CHECK(half.groups[0] == PrecisionGroup{16, 0, 128});
    CHECK(avg_bitwidth(half, 4096, 4096) == 1.0);
  }

  TEST_CASE("avg_bitwidth of an empty schedule is zero") {
    CHECK(avg_bitwidth(PrecisionSchedule{}, 16, 16) == 0.0);
    CHECK(make_schedule("2", 1e-6, 8, 8).groups.empty());
  }

  TEST_CASE("schedule spec grammar") {
    CHECK(parse_schedule_spec("8+3+2") == std::vector<unsigned>{8, 3, 2});
    CHECK(parse_schedule_spec("16") == std::vector<unsigned>{16});
    CHECK(format_schedule_spec(std::vector<unsigned>{8, 3, 2}) == "8+3+2");
    for (const char* bad : {"2+8", "8+8", "5", "", "8+", "+8", "eight", "8 +3", "32", "8+3+2+1+0"}) {
      CAPTURE(bad);
      CHECK(code_of([&] { parse_schedule_spec(bad); }) == ErrorCode::InvalidArgument);
    }
  }

  TEST_CASE("prefix that does not fit the budget") {
    CHECK(code_of([] { make_schedule("8+3+2", 1.0 / 16, 64, 64); }) == ErrorCode::BudgetExhausted);
    CHECK(code_of([] { make_schedule("8+4+3+2", 1.0 / 16, 4096, 4096); }) == ErrorCode::InvalidArgument);
    const std::array<std::size_t, 3> wider{1, 5, 9};
    const PrecisionSchedule s = make_schedule("8+4+3+2", 1.0 / 16, 4096, 4096, wider);
    CHECK(s.groups.size() == 4);
    CHECK(s.groups[2] == PrecisionGroup{3, 5, 9});
  }

  TEST_CASE("budget slack and monotonicity properties") {
    const std::vector<double> alphas{1.0 / 32, 1.0 / 26, 1.0 / 22, 1.0 / 20, 1.0 / 18, 1.0 / 16, 0.1, 0.25};
    for (const char* spec : {"16", "3", "8+3", "8+3+2", "16+4+2", "4+1"}) {
      for (auto [h_out, h_in] : {std::pair<std::size_t, std::size_t>{1024, 1024}, {4096, 4096}, {2048, 512}, {768, 3072}}) {
        std::vector<std::size_t> prev_ends;
        for (double alpha : alphas) {
          const PrecisionSchedule s = make_schedule(spec, alpha, h_out, h_in);
          CAPTURE(spec);
          CAPTURE(alpha);
          validate_schedule(s, h_out, h_in);
          const std::uint64_t budget = budget_bits(alpha, h_out, h_in);
          const std::uint64_t used = schedule_payload_bits(s, h_out, h_in);
          const unsigned last_bits = parse_schedule_spec(spec).back();
          CHECK(used <= budget);
          CHECK(budget - used < static_cast<std::uint64_t>(last_bits) * (h_out + h_in));
          CHECK(avg_bitwidth(s, h_out, h_in) <= 16.0 * alpha + 1e-12);
          std::vector<std::size_t> ends;
          for (const auto& g : s.groups) ends.push_back(g.r_end);
          for (std::size_t i = 0; i < std::min(ends.size(), prev_ends.size()); ++i) CHECK(ends[i] >= prev_ends[i]);
          CHECK(ends.size() >= prev_ends.size());
          prev_ends = ends;
        }
      }
    }
  }

  TEST_CASE("validate_schedule rejects malformed schedules") {
    PrecisionSchedule gap{{{8, 0, 2}, {3, 3, 5}}, 1.0 / 16};
    CHECK(code_of([&] { validate_schedule(gap, 256, 256); }) == ErrorCode::InvalidArgument);
    PrecisionSchedule rising{{{3, 0, 2}, {8, 2, 5}}, 1.0 / 16};
    CHECK(code_of([&] { validate_schedule(rising, 256, 256); }) == ErrorCode::InvalidArgument);
    PrecisionSchedule greedy{{{16, 0, 200}}, 1.0 / 16};
    CHECK(code_of([&] { validate_schedule(greedy, 256, 256); }) == ErrorCode::BudgetExhausted);
  }

  TEST_CASE("allocation conversion") {
    Allocation a;
    a.counts = {0, 2, 0, 32, 968};
    const PrecisionSchedule s = to_schedule(a, 1.0 / 16);
    CHECK(s == make_schedule("8+3+2", 1.0 / 16, 4096, 4096));
    CHECK(to_allocation(s) == a);
    CHECK(allocation_bits(a, 4096, 4096) == 16777216);
    CHECK(format_allocation(a) == "16b:0 8b:2 4b:0 3b:32 2b:968");
    CHECK(to_schedule(Allocation{}, 0.5).groups.empty());
    CHECK_THROWS_AS(to_allocation(make_schedule("1", 1.0 / 16, 64, 64)), Error);
  }

  TEST_CASE("genetic search with a constant objective returns a feasible allocation") {
    Rng rng(1);
    GeneticParams p;
    p.population = 8;
    p.generations = 5;
    const SearchResult r = genetic_search([](const Allocation&) { return 1.0; }, 1.0 / 16, 256, 256, p, rng);
    CHECK(allocation_bits(r.best, 256, 256) <= budget_bits(1.0 / 16, 256, 256));
    CHECK(r.best_objective == 1.0);
    CHECK(r.trace.size() == 6);
    validate_schedule(to_schedule(r.best, 1.0 / 16), 256, 256);
  }

  TEST_CASE("genetic search finds the all-16-bit corner") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Rng rng(seed);
      const SearchResult r = genetic_search([](const Allocation& a) { return -static_cast<double>(a.counts[0]); },
                                            1.0 / 16, 64, 64, GeneticParams{}, rng);
      CHECK(r.best.counts[0] == budget_ranks(16, 1.0 / 16, 64, 64));
      for (std::size_t t = 1; t < 5; ++t) CHECK(r.best.counts[t] == 0);
    }
  }

  TEST_CASE("genetic search is deterministic, feasible and monotone") {
    // A smooth objective with an interior optimum.
    auto objective = [](const Allocation& a) {
      double v = 0.0;
      const std::array<double, 5> target{1, 3, 6, 10, 20};
      for (std::size_t t = 0; t < 5; ++t) v += (static_cast<double>(a.counts[t]) - target[t]) * (static_cast<double>(a.counts[t]) - target[t]);
      return v;
    };
    GeneticParams p;
    p.max_rank = 40;
    p.threads = 3;
    Rng r1(42), r2(42);
    const SearchResult a = genetic_search(objective, 1.0 / 8, 128, 128, p, r1);
    p.threads = 1;
    const SearchResult b = genetic_search(objective, 1.0 / 8, 128, 128, p, r2);
    CHECK(a.trace == b.trace);
    CHECK(a.best == b.best);
    CHECK(a.best.total_ranks() <= 40);
    CHECK(allocation_bits(a.best, 128, 128) <= budget_bits(1.0 / 8, 128, 128));
    for (std::size_t i = 1; i < a.trace.size(); ++i) CHECK(a.trace[i] <= a.trace[i - 1]);
    CHECK(a.best_objective == a.trace.back());
    CHECK(a.evaluations > 0);
    CHECK(a.evaluations <= p.population * (p.generations + 1));
  }

  TEST_CASE("genetic search rejects an infeasible budget") {
    Rng rng(0);
    CHECK(code_of([&] { genetic_search([](const Allocation&) { return 0.0; }, 1e-4, 8, 8, GeneticParams{}, rng); }) ==
          ErrorCode::BudgetExhausted);
  }
}
