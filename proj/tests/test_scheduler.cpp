#include <doctest.h>

#include <cmath>
#include <limits>

#include "trail/errors.hpp"
#include "trail/rng.hpp"
#include "trail/scheduler.hpp"

using namespace trail;
using namespace trail::sched;

namespace {

SchedulingInstance random_instance(std::uint64_t seed, int max_clients = 12, int max_servers = 4) {
  Rng rng(Rng::derive(seed, {0x5c4edull}));
  SchedulingInstance inst;
  inst.num_clients = 2 + static_cast<int>(rng.below(max_clients - 1));
  inst.num_servers = 1 + static_cast<int>(rng.below(max_servers));
  inst.capacity = 1 + static_cast<int>(rng.below(4));
  inst.data_size.resize(inst.num_clients);
  for (double& n : inst.data_size) n = 10.0 + 90.0 * rng.uniform();
  inst.trust.resize(static_cast<std::size_t>(inst.num_clients) * inst.num_servers);
  for (double& v : inst.trust) v = 20.0 * rng.uniform();
  inst.theta = 8.0 * rng.uniform();
  return inst;
}

}  // namespace

TEST_CASE("surrogate objective: empty assignment, D_m with five servers, single-server algebra") {
  SchedulingInstance inst;
  inst.num_clients = 3;
  inst.num_servers = 5;
  inst.capacity = 3;
  inst.data_size = {10, 20, 30};
  inst.trust.assign(15, 10.0);
  inst.theta = 0.0;

  auto empty = AssociationMatrix::empty(3, 5);
  CHECK(surrogate_objective(empty, inst) == 0.0);
  CHECK(distribution_parameter(5) == doctest::Approx(1.0 / 6.0).epsilon(1e-15));

  // One occupied server: the weights cancel and the contribution is D_m - 1,
  // whatever the data sizes.
  SchedulingInstance one = inst;
  one.num_servers = 1;
  one.trust.assign(3, 10.0);
  AssociationMatrix d = AssociationMatrix::empty(3, 1);
  d.server_of = {0, 0, 0};
  CHECK(surrogate_objective(d, one) == doctest::Approx(1.0 / 2.0 - 1.0).epsilon(1e-12));

  // Same value with wildly different sizes.
  one.data_size = {1, 1000, 5};
  CHECK(surrogate_objective(d, one) == doctest::Approx(-0.5).epsilon(1e-12));
}

TEST_CASE("surrogate objective: threshold violations add the indicator term") {
  SchedulingInstance inst;
  inst.num_clients = 2;
  inst.num_servers = 1;
  inst.capacity = 2;
  inst.data_size = {5, 5};
  inst.trust = {1.0, 9.0};
  inst.theta = 5.0;
  AssociationMatrix d = AssociationMatrix::empty(2, 1);
  d.server_of = {0, 0};
  // D_m = 1/2; client 0 violates: B = (5*(1/2-1+1) + 5*(1/2-1))/10 = 0.
  CHECK(surrogate_objective(d, inst) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK_FALSE(feasible(d, inst));
}

TEST_CASE("greedy: all below threshold yields the empty matrix") {
  SchedulingInstance inst;
  inst.num_clients = 4;
  inst.num_servers = 2;
  inst.capacity = 2;
  inst.data_size = {1, 1, 1, 1};
  inst.trust.assign(8, 0.5);
  inst.theta = 1.0;
  auto d = greedy_schedule(inst);
  CHECK(d.total_assigned() == 0);
  CHECK(feasible(d, inst));
}

TEST_CASE("greedy hand-trace: descending order assigns the trusted client first") {
  SchedulingInstance inst;
  inst.num_clients = 2;
  inst.num_servers = 1;
  inst.capacity = 1;
  inst.data_size = {1, 1};
  inst.trust = {5.0, 9.0};
  inst.theta = 1.0;
  auto d = greedy_schedule(inst);
  CHECK(d.server_of[1] == 0);  // TL 9 wins the single slot
  CHECK(d.server_of[0] == -1);

  // The literal ascending order of Algorithm 1 admits the low-TL client first.
  auto asc = greedy_schedule(inst, SortOrder::TrustAscending);
  CHECK(asc.server_of[0] == 0);
  CHECK(asc.server_of[1] == -1);
}

TEST_CASE("schedulers always produce feasible matrices (1000 random instances)") {
  for (std::uint64_t seed = 1; seed <= 1000; ++seed) {
    auto inst = random_instance(seed);
    CHECK(feasible(greedy_schedule(inst), inst));
    CHECK(feasible(random_schedule(inst, seed), inst));
    CHECK(feasible(trust_only_schedule(inst), inst));
  }
}

TEST_CASE("exhaustive oracle: empty-feasible, full-occupancy algebra, dominance over greedy") {
  SchedulingInstance none;
  none.num_clients = 3;
  none.num_servers = 2;
  none.capacity = 1;
  none.data_size = {1, 1, 1};
  none.trust.assign(6, 0.0);
  none.theta = 5.0;
  auto res = exhaustive_schedule(none);
  CHECK(res.objective == 0.0);
  CHECK(res.assignment.total_assigned() == 0);

  // All clients trusted everywhere: the optimum occupies every server and
  // equals S * (1/(1+S) - 1).
  SchedulingInstance all;
  all.num_clients = 4;
  all.num_servers = 2;
  all.capacity = 4;
  all.data_size = {3, 5, 7, 11};
  all.trust.assign(8, 10.0);
  all.theta = 0.0;
  auto opt = exhaustive_schedule(all);
  CHECK(opt.objective == doctest::Approx(2.0 * (1.0 / 3.0 - 1.0)).epsilon(1e-12));

  double gap_sum = 0.0;
  int gaps = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    auto inst = random_instance(seed, 6, 2);
    auto oracle = exhaustive_schedule(inst);
    auto greedy = greedy_schedule(inst);
    const double bg = surrogate_objective(greedy, inst);
    CHECK(oracle.objective <= bg + 1e-12);
    if (oracle.objective != 0.0) {
      gap_sum += (bg - oracle.objective) / std::abs(oracle.objective);
      ++gaps;
    }
  }
  CHECK(gaps > 0);
  CHECK(gap_sum / gaps <= 0.10);
}

TEST_CASE("exhaustive refuses oversized instances") {
  SchedulingInstance inst;
  inst.num_clients = 30;
  inst.num_servers = 4;
  inst.capacity = 30;
  inst.data_size.assign(30, 1.0);
  inst.trust.assign(120, 1.0);
  inst.theta = 0.0;
  CHECK_THROWS_AS(exhaustive_schedule(inst), SizeLimitError);
}

TEST_CASE("random schedule: reproducible per seed, near-uniform over eligible servers") {
  auto inst = random_instance(42);
  auto a = random_schedule(inst, 7);
  auto b = random_schedule(inst, 7);
  CHECK(a.server_of == b.server_of);

  auto blocked = inst;
  blocked.theta = 100.0;  // above every TL
  CHECK(random_schedule(blocked, 7).total_assigned() == 0);

  SchedulingInstance flat;
  flat.num_clients = 1;
  flat.num_servers = 4;
  flat.capacity = 1;
  flat.data_size = {1.0};
  flat.trust.assign(4, 1.0);
  flat.theta = 0.0;
  std::vector<int> counts(4, 0);
  const int trials = 10000;
  for (int s = 0; s < trials; ++s) {
    auto d = random_schedule(flat, static_cast<std::uint64_t>(s));
    REQUIRE(d.server_of[0] >= 0);
    ++counts[d.server_of[0]];
  }
  for (int s = 0; s < 4; ++s) {
    CHECK(std::abs(counts[s] / static_cast<double>(trials) - 0.25) < 0.02);
  }
}

TEST_CASE("trust-only: assigns every trusted client round-robin, none when untrusted") {
  SchedulingInstance inst;
  inst.num_clients = 4;
  inst.num_servers = 2;
  inst.capacity = 2;
  inst.data_size = {1, 1, 1, 1};
  inst.trust = {5, 5, 5, 5, 5, 5, 0, 0};
  inst.theta = 1.0;
  auto d = trust_only_schedule(inst);
  CHECK(d.total_assigned() == 3);  // client 3 fails the threshold everywhere
  CHECK(feasible(d, inst));

  inst.trust.assign(8, 0.0);
  CHECK(trust_only_schedule(inst).total_assigned() == 0);
}

TEST_CASE("indicator consistency: with theta = -inf, B depends only on occupancy") {
  auto inst = random_instance(11);
  inst.theta = -std::numeric_limits<double>::infinity();
  auto d = greedy_schedule(inst);
  const double dm = distribution_parameter(inst.num_servers);
  int occupied = 0;
  for (int s = 0; s < inst.num_servers; ++s) {
    if (d.assigned_count(s) > 0) ++occupied;
  }
  CHECK(surrogate_objective(d, inst) == doctest::Approx(occupied * (dm - 1.0)).epsilon(1e-12));
}

TEST_CASE("contraction factor: trivial values and monotonicity in B") {
  BoundParams p;
  p.mu = 0.5;
  p.smoothness = 2.0;
  p.omega1 = 0.01;
  p.omega2 = 0.0;
  p.initial_gap = 1.0;
  p.error_term = 3.0;
  CHECK(contraction_factor(p).value == doctest::Approx(1.0 - 0.25).epsilon(1e-15));
  CHECK(contraction_factor(p).contracting);

  p.mu = 2.0;
  p.error_term = 0.0;
  CHECK(contraction_factor(p).value == doctest::Approx(0.0).epsilon(1e-15));

  p.mu = 0.5;
  p.omega2 = 0.05;
  double prev = -1.0;
  for (double b = 0.0; b <= 2.0; b += 0.25) {
    p.error_term = b;
    const double d = contraction_factor(p).value;
    CHECK(d > prev);
    prev = d;
  }
}

TEST_CASE("convergence bound: t=0 exact, pure contraction, series identities, limit") {
  BoundParams p;
  p.mu = 0.5;
  p.smoothness = 2.0;
  p.omega1 = 0.01;
  p.omega2 = 0.02;
  p.initial_gap = 3.5;
  p.error_term = 1.0;

  CHECK(convergence_bound(p, 0) == 3.5);

  BoundParams pure = p;
  pure.error_term = 0.0;
  const double d0 = contraction_factor(pure).value;
  for (long t : {1L, 5L, 20L}) {
    CHECK(convergence_bound(pure, t) == doctest::Approx(std::pow(d0, t) * 3.5).epsilon(1e-12));
  }

  // Closed form vs direct geometric summation.
  const double d = contraction_factor(p).value;
  const double coeff = 2.0 * p.omega1 * p.error_term / p.smoothness;
  for (long t = 0; t <= 100; ++t) {
    double series = 0.0;
    double dk = 1.0;
    for (long k = 0; k < t; ++k) {
      series += dk;
      dk *= d;
    }
    const double direct = std::pow(d, t) * p.initial_gap + coeff * series;
    CHECK(std::abs(convergence_bound(p, t) - direct) < 1e-12);
  }

  // Large-t limit: coeff / (1 - D).
  const double limit = coeff / (1.0 - d);
  CHECK(std::abs(convergence_bound(p, 10000) - limit) / limit < 1e-8);

  // Above the floor the bound decays monotonically.
  REQUIRE(p.initial_gap >= limit);
  double prev_bound = convergence_bound(p, 0);
  for (long t = 1; t <= 50; ++t) {
    const double b = convergence_bound(p, t);
    CHECK(b <= prev_bound + 1e-15);
    prev_bound = b;
  }

  BoundParams degenerate = p;
  degenerate.omega2 = 0.0;
  degenerate.mu = degenerate.smoothness;  // D = 0
  CHECK(convergence_bound(degenerate, 3) == doctest::Approx(coeff).epsilon(1e-12));

  // D == 1 is rejected.
  BoundParams unit = p;
  unit.omega2 = 1.0 / (4.0 * unit.error_term);  // makes D exactly 1 - mu/L + mu/L... adjust
  unit.mu = 1.0;
  unit.smoothness = 1.0;
  unit.omega2 = 0.25;
  unit.error_term = 1.0;  // D = 1 - 1 + 4*0.25*1*1/1 = 1
  CHECK_THROWS_AS(convergence_bound(unit, 2), InvalidInputError);
}

TEST_CASE("instance validation rejects malformed inputs") {
  SchedulingInstance inst;
  inst.num_clients = 2;
  inst.num_servers = 1;
  inst.capacity = 1;
  inst.data_size = {1.0};  // wrong length
  inst.trust = {1.0, 1.0};
  CHECK_THROWS_AS(inst.validate(), InvalidInputError);
  inst.data_size = {1.0, -2.0};
  CHECK_THROWS_AS(inst.validate(), InvalidInputError);
}
